//! Patch sampling, the two-schedule training loop, the change prior and
//! tiled full-image inference.
//!
//! Every batch draws random co-located patches, augments them with one of
//! the eight square symmetries and takes two Adam steps: one on all
//! parameters for the reconstruction, cycle and translation terms and one on
//! the encoders for the code-alignment term. At the configured epochs the
//! prior `Π = 1 − Δ` is recomputed from the full-image translations.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{
    affinity_matrix, crossmodal_distance, default_rank, kernel_width, pairwise_distances, similarity_targets,
    AffinityError, AffinityMatrix, SquareMatrix,
};
use crate::changemap::{difference_image, ChangeError, DifferenceWeights, PixelDistance};
use crate::gradengine::{
    read_checkpoint, write_checkpoint, AdamConfig, AdamState, ArraySpec, Checkpoint, GradError, Graph, Grads,
    LrSchedule, ParamSet, RngState, Tensor4,
};
use crate::model::{
    record_losses, total_loss, CoupledModel, CropWindow, Direction, LossReport, LossWeights, ModelConfig, ModelError,
};
use crate::raster::{RasterError, RasterImage};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("images of {height}x{width} are smaller than the {patch}px patch")]
    ImageTooSmall { height: usize, width: usize, patch: usize },
    #[error("input images are not co-registered: {0}")]
    Registration(String),
    #[error("augmentation needs square patches, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("loss {term} diverged to {value} at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: u32,
        batch: usize,
        term: &'static str,
        value: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Change(#[from] ChangeError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Side of the centred window used for affinities and code correlation.
    pub affinity_crop: usize,
    pub lr_base: f64,
    pub lr_decay_main: f64,
    pub lr_decay_code: f64,
    /// Epochs between two learning-rate decays.
    pub lr_decay_every: u32,
    /// One-based epochs after which the prior is recomputed.
    pub prior_update_epochs: Vec<u32>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Filters of the hidden layers.
    pub hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub amsgrad: bool,
    /// Tile side and halo for full-image inference.
    pub tile_size: usize,
    pub tile_overlap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batches_per_epoch: 10,
            batch_size: 10,
            patch_size: 100,
            affinity_crop: 20,
            lr_base: 1e-4,
            lr_decay_main: 0.96,
            lr_decay_code: 0.9,
            lr_decay_every: 1,
            prior_update_epochs: vec![25, 50, 75],
            weights: LossWeights::default(),
            seed: 0,
            hidden: 100,
            dropout: 0.2,
            leaky_slope: 0.3,
            amsgrad: false,
            tile_size: 256,
            tile_overlap: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return bad("batch counts and patch size must be at least 1".into());
        }
        if self.affinity_crop < 2 || self.affinity_crop > self.patch_size {
            return bad(format!(
                "affinity crop {} must lie in [2, patch size {}]",
                self.affinity_crop, self.patch_size
            ));
        }
        LrSchedule::new(self.lr_base, self.lr_decay_main, self.lr_decay_every)?;
        LrSchedule::new(self.lr_base, self.lr_decay_code, self.lr_decay_every)?;
        self.weights.validate()?;
        self.model_config(1, 1).validate()?;
        if self.tile_size < 3 || 2 * self.tile_overlap >= self.tile_size {
            return bad(format!(
                "tile size {} must be at least 3 and exceed twice the overlap {}",
                self.tile_size, self.tile_overlap
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, channels_x: usize, channels_y: usize) -> ModelConfig {
        ModelConfig {
            channels_x,
            channels_y,
            hidden: self.hidden,
            code_channels: 3,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn schedules(&self) -> (LrSchedule, LrSchedule) {
        (
            LrSchedule::new(self.lr_base, self.lr_decay_main, self.lr_decay_every).expect("validated schedule"),
            LrSchedule::new(self.lr_base, self.lr_decay_code, self.lr_decay_every).expect("validated schedule"),
        )
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            amsgrad: self.amsgrad,
            ..AdamConfig::default()
        }
    }
}

/// A co-registered image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub x: RasterImage,
    pub y: RasterImage,
}

impl ImagePair {
    pub fn new(x: RasterImage, y: RasterImage) -> Result<Self> {
        if !x.same_spatial_dims(&y) {
            return Err(TrainError::Registration(format!(
                "{}x{} vs {}x{}",
                x.height(),
                x.width(),
                y.height(),
                y.width()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn height(&self) -> usize {
        self.x.height()
    }

    pub fn width(&self) -> usize {
        self.x.width()
    }
}

/// Per-pixel probability of no change, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl PriorMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// `Π = 1 − Δ` for a difference image already scaled to `[0, 1]`.
    pub fn from_scaled_delta(delta: &RasterImage) -> Self {
        Self {
            height: delta.height(),
            width: delta.width(),
            values: delta.values().iter().map(|&d| 1.0 - d).collect(),
        }
    }

    pub fn from_raster(img: &RasterImage) -> Result<Self> {
        if img.channels() != 1 {
            return Err(TrainError::Config("prior raster must have one band".into()));
        }
        let (lo, hi) = img.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(TrainError::Config(format!("prior values outside [0, 1]: [{lo}, {hi}]")));
        }
        Ok(Self {
            height: img.height(),
            width: img.width(),
            values: img.values().to_vec(),
        })
    }

    pub fn to_raster(&self) -> RasterImage {
        RasterImage::from_plane(self.height, self.width, self.values.clone()).expect("prior dimensions are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Mean over the pixels where `mask` is true; `None` for an empty mask.
    pub fn mean_where(&self, mask: impl Fn(usize) -> bool) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .enumerate()
            .filter(|&(i, _)| mask(i))
            .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// One of the eight symmetries of the square: `rotations` quarter turns
/// counter-clockwise followed by an optional upside-down flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub rotations: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rotations: 0,
        flip: false,
    };

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            rotations: rng.gen_range(0..4),
            flip: rng.gen(),
        }
    }

    /// Source pixel of output pixel `(r, c)` in an `n×n` grid.
    fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let (mut r, mut c) = (r, c);
        if self.flip {
            r = n - 1 - r;
        }
        for _ in 0..self.rotations % 4 {
            // inverse of one counter-clockwise quarter turn
            (r, c) = (c, n - 1 - r);
        }
        (r, c)
    }

    /// Applies the transform to a row-major `n×n×channels` grid.
    pub fn apply<T: Copy>(self, data: &[T], n: usize, channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(r, c, n);
                let start = (sr * n + sc) * channels;
                out.extend_from_slice(&data[start..start + channels]);
            }
        }
        out
    }
}

/// One training sample: co-located patches and prior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub row: usize,
    pub col: usize,
    pub x: Tensor4<f32>,
    pub y: Tensor4<f32>,
    pub pi: Vec<f32>,
}

fn extract(img: &[f32], width: usize, channels: usize, row: usize, col: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size * channels);
    for r in row..row + size {
        let start = (r * width + col) * channels;
        out.extend_from_slice(&img[start..start + size * channels]);
    }
    out
}

/// Applies one random symmetry identically to both patches and the prior
/// grid.
pub fn augment<R: Rng + ?Sized>(
    x: &Tensor4<f32>,
    y: &Tensor4<f32>,
    pi: &[f32],
    rng: &mut R,
) -> Result<(Tensor4<f32>, Tensor4<f32>, Vec<f32>)> {
    let n = x.height();
    if x.width() != n || y.height() != n || y.width() != n || pi.len() != n * n {
        return Err(TrainError::NonSquare(x.height(), x.width()));
    }
    let t = Dihedral::random(rng);
    Ok((
        Tensor4::from_vec(x.shape(), t.apply(x.data(), n, x.channels())),
        Tensor4::from_vec(y.shape(), t.apply(y.data(), n, y.channels())),
        t.apply(pi, n, 1),
    ))
}

/// Draws `batch_size` random co-located patches with their prior weights,
/// each augmented independently.
pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    images: &ImagePair,
    prior: &PriorMap,
    cfg: &TrainConfig,
) -> Result<Vec<PatchSample>> {
    let (h, w, p) = (images.height(), images.width(), cfg.patch_size);
    if p > h || p > w {
        return Err(TrainError::ImageTooSmall {
            height: h,
            width: w,
            patch: p,
        });
    }
    let (cx, cy) = (images.x.channels(), images.y.channels());
    (0..cfg.batch_size)
        .map(|_| {
            let row = rng.gen_range(0..=h - p);
            let col = rng.gen_range(0..=w - p);
            let x = Tensor4::from_vec([1, p, p, cx], extract(images.x.values(), w, cx, row, col, p));
            let y = Tensor4::from_vec([1, p, p, cy], extract(images.y.values(), w, cy, row, col, p));
            let pi = extract(&prior.values, w, 1, row, col, p);
            let (x, y, pi) = augment(&x, &y, &pi, rng)?;
            Ok(PatchSample { row, col, x, y, pi })
        })
        .collect()
}

/// Affinities of one crop; when every pixel coincides the kernel width is
/// undefined and all pixels are treated as fully similar.
fn crop_affinity(patch: &Tensor4<f32>, crop: CropWindow) -> Result<AffinityMatrix> {
    let c = patch.crop(crop.y0, crop.x0, crop.size, crop.size);
    let values: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
    let d = pairwise_distances(&values, c.channels())?;
    match kernel_width(&d, default_rank(d.n())) {
        Ok(sigma) => Ok(affinity_matrix(&d, sigma)?),
        Err(AffinityError::Degenerate) => Ok(AffinityMatrix {
            entries: SquareMatrix::from_fn(d.n(), |_, _| 1.0),
            sigma: 0.0,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Similarity targets `S` of a batch, contrast-stretched over the batch.
pub fn batch_similarities(batch: &[PatchSample], crop: CropWindow) -> Result<Vec<Vec<f32>>> {
    let ds = batch
        .par_iter()
        .map(|s| Ok(crossmodal_distance(&crop_affinity(&s.x, crop)?, &crop_affinity(&s.y, crop)?)?))
        .collect::<Result<Vec<SquareMatrix>>>()?;
    Ok(similarity_targets(ds, true)
        .into_iter()
        .map(|s| s.similarities.as_slice().iter().map(|&v| v as f32).collect())
        .collect())
}

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: u32,
    pub l_r: f64,
    pub l_c: f64,
    pub l_t: f64,
    pub l_z: f64,
    pub total: f64,
    pub lr_main: f64,
    pub lr_code: f64,
}

/// Tiled inference along `direction` with dropout off.
///
/// The image is split into cores of `tile − 2·overlap` pixels; each core is
/// evaluated on a window widened by `overlap` pixels on every side (clipped
/// to the image) and only the core is kept. With an overlap at least the
/// receptive radius of the direction the result equals a whole-image pass.
pub fn infer_full(
    model: &CoupledModel<f32>,
    image: &RasterImage,
    direction: Direction,
    tile: usize,
    overlap: usize,
) -> Result<RasterImage> {
    if tile < 3 || 2 * overlap >= tile {
        return Err(TrainError::Config(format!("tile {tile} with overlap {overlap}")));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let out_c = model.output_channels(direction);
    if h <= tile && w <= tile {
        let input = Tensor4::from_hwc_f32(h, w, c, image.values());
        let out = model.infer(direction, &input)?;
        return Ok(RasterImage::new(h, w, out_c, out.into_data())?);
    }
    let core = tile - 2 * overlap;
    let mut out = vec![0.0f32; h * w * out_c];
    for r0 in (0..h).step_by(core) {
        for c0 in (0..w).step_by(core) {
            let (r1, c1) = ((r0 + core).min(h), (c0 + core).min(w));
            let (wr0, wc0) = (r0.saturating_sub(overlap), c0.saturating_sub(overlap));
            let (wr1, wc1) = ((r1 + overlap).min(h), (c1 + overlap).min(w));
            let (th, tw) = (wr1 - wr0, wc1 - wc0);
            let mut window = Vec::with_capacity(th * tw * c);
            for r in wr0..wr1 {
                let start = (r * w + wc0) * c;
                window.extend_from_slice(&image.values()[start..start + tw * c]);
            }
            let result = model.infer(direction, &Tensor4::from_vec([1, th, tw, c], window))?;
            for r in r0..r1 {
                let src = ((r - wr0) * tw + (c0 - wc0)) * out_c;
                let dst = (r * w + c0) * out_c;
                let len = (c1 - c0) * out_c;
                out[dst..dst + len].copy_from_slice(&result.data()[src..src + len]);
            }
        }
    }
    Ok(RasterImage::new(h, w, out_c, out)?)
}

/// Both crossdomain predictions of a pair.
pub fn translate_pair(model: &CoupledModel<f32>, images: &ImagePair, cfg: &TrainConfig) -> Result<(RasterImage, RasterImage)> {
    let x_hat = infer_full(model, &images.y, Direction::YToX, cfg.tile_size, cfg.tile_overlap)?;
    let y_hat = infer_full(model, &images.x, Direction::XToY, cfg.tile_size, cfg.tile_overlap)?;
    Ok((x_hat, y_hat))
}

/// Recomputes the prior from the unfiltered, min-max scaled difference
/// image. A constant difference yields `Π = 1` everywhere.
pub fn update_prior(model: &CoupledModel<f32>, images: &ImagePair, cfg: &TrainConfig) -> Result<PriorMap> {
    let (x_hat, y_hat) = translate_pair(model, images, cfg)?;
    let weights = DifferenceWeights::for_channels(images.x.channels(), images.y.channels());
    let delta = difference_image(&images.x, &x_hat, &images.y, &y_hat, weights, PixelDistance::Squared)?;
    Ok(PriorMap::from_scaled_delta(&delta))
}

/// Complete mutable state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CoupledModel<f32>,
    pub adam_main: AdamState<f32>,
    pub adam_code: AdamState<f32>,
    pub prior: PriorMap,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
    pub history: Vec<HistoryRecord>,
}

const CHECKPOINT_KIND: &str = "mmcd-trainer";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    history: Vec<HistoryRecord>,
    prior_shape: [usize; 2],
}

impl Trainer {
    pub fn new(images: &ImagePair, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model_cfg = config.model_config(images.x.channels(), images.y.channels());
        let model = CoupledModel::new(model_cfg, &mut rng)?;
        let adam_main = AdamState::new(config.adam(), model.all_params(), &model.params);
        let adam_code = AdamState::new(config.adam(), model.encoder_params(), &model.params);
        Ok(Self {
            prior: PriorMap::zeros(images.height(), images.width()),
            config,
            model,
            adam_main,
            adam_code,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn learning_rates(&self, epoch_index: u32) -> (f64, f64) {
        let (main, code) = self.config.schedules();
        (main.rate(epoch_index), code.rate(epoch_index))
    }

    /// Runs the next epoch and appends its mean losses to the history.
    pub fn train_epoch(&mut self, images: &ImagePair) -> Result<LossReport> {
        let cfg = self.config.clone();
        if images.x.channels() != self.model.config.channels_x || images.y.channels() != self.model.config.channels_y {
            return Err(TrainError::Registration(format!(
                "model expects {}/{} channels, images have {}/{}",
                self.model.config.channels_x,
                self.model.config.channels_y,
                images.x.channels(),
                images.y.channels()
            )));
        }
        let epoch = self.epoch + 1;
        let (lr_main, lr_code) = self.learning_rates(self.epoch);
        let crop = CropWindow::centered(cfg.patch_size, cfg.affinity_crop);
        let scale = 1.0 / cfg.batch_size as f32;
        let mut grads_main = Grads::zeros_like(&self.model.params);
        let mut grads_code = Grads::zeros_like(&self.model.params);
        let mut sums = [0.0f64; 4];

        for batch_index in 0..cfg.batches_per_epoch {
            let batch = sample_batch(&mut self.rng, images, &self.prior, &cfg)?;
            let targets = batch_similarities(&batch, crop)?;
            let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
            let model = &self.model;
            let per_patch = batch
                .into_par_iter()
                .zip(targets.par_iter())
                .zip(seeds)
                .map(|((sample, s), seed)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut g = Graph::new(&model.params);
                    let nodes = record_losses(model, &mut g, sample.x, sample.y, &sample.pi, crop, s, &cfg.weights, true, &mut rng)?;
                    let terms = [nodes.l_r, nodes.l_c, nodes.l_t, nodes.l_z].map(|n| g.scalar(n) as f64);
                    let mut main = Grads::zeros_like(&model.params);
                    let mut code = Grads::zeros_like(&model.params);
                    if terms.iter().all(|v| v.is_finite()) {
                        g.backward(nodes.main, scale, &mut main)?;
                        g.backward(nodes.l_z, scale * cfg.weights.lambda_z as f32, &mut code)?;
                    }
                    Ok((terms, main, code))
                })
                .collect::<Result<Vec<_>>>()?;

            grads_main.zero();
            grads_code.zero();
            let mut batch_sums = [0.0f64; 4];
            for (terms, main, code) in &per_patch {
                for (name, &value) in ["l_r", "l_c", "l_t", "l_z"].iter().zip(terms) {
                    if !value.is_finite() {
                        return Err(TrainError::Divergence {
                            epoch,
                            batch: batch_index,
                            term: name,
                            value,
                        });
                    }
                }
                for (acc, v) in batch_sums.iter_mut().zip(terms) {
                    *acc += v;
                }
                grads_main.add_assign(main);
                grads_code.add_assign(code);
            }
            self.adam_main.step(&mut self.model.params, &grads_main, lr_main)?;
            self.adam_code.step(&mut self.model.params, &grads_code, lr_code)?;
            debug!(
                "epoch {epoch} batch {batch_index}: l_r {:.5} l_c {:.5} l_t {:.5} l_z {:.5}",
                batch_sums[0] / cfg.batch_size as f64,
                batch_sums[1] / cfg.batch_size as f64,
                batch_sums[2] / cfg.batch_size as f64,
                batch_sums[3] / cfg.batch_size as f64
            );
            for (acc, v) in sums.iter_mut().zip(batch_sums) {
                *acc += v;
            }
        }

        let n = (cfg.batches_per_epoch * cfg.batch_size) as f64;
        let report = total_loss(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, &cfg.weights)?;
        self.epoch = epoch;
        self.history.push(HistoryRecord {
            epoch,
            l_r: report.l_r,
            l_c: report.l_c,
            l_t: report.l_t,
            l_z: report.l_z,
            total: report.total,
            lr_main,
            lr_code,
        });
        Ok(report)
    }

    pub fn update_prior(&mut self, images: &ImagePair) -> Result<&PriorMap> {
        self.prior = update_prior(&self.model, images, &self.config)?;
        Ok(&self.prior)
    }

    /// Serializes parameters, optimizer moments, prior, history and the
    /// random stream position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            model: self.model.config,
            train: self.config.clone(),
            history: self.history.clone(),
            prior_shape: [self.prior.height, self.prior.width],
        };
        let mut arrays = Vec::new();
        let params = &self.model.params;
        for id in params.ids() {
            let t = params.get(id);
            arrays.push((spec(params.name(id), t.shape().to_vec()), t.data().to_vec()));
        }
        for (group, adam) in [("main", &self.adam_main), ("code", &self.adam_code)] {
            for (slot, &id) in adam.params.iter().enumerate() {
                let shape = params.get(id).shape().to_vec();
                let name = params.name(id);
                arrays.push((spec(&format!("adam.{group}.m.{name}"), shape.clone()), adam.m[slot].clone()));
                arrays.push((spec(&format!("adam.{group}.v.{name}"), shape.clone()), adam.v[slot].clone()));
                if adam.config.amsgrad {
                    arrays.push((spec(&format!("adam.{group}.vmax.{name}"), shape), adam.v_max[slot].clone()));
                }
            }
        }
        arrays.push((spec("prior", vec![self.prior.height, self.prior.width]), self.prior.values.clone()));
        Checkpoint {
            meta: serde_json::to_value(meta).expect("meta is serializable"),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            adam_t: BTreeMap::from([("main".into(), self.adam_main.t), ("code".into(), self.adam_code.t)]),
            arrays,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_checkpoint(&self.to_checkpoint(), path)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(ckpt.meta.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(TrainError::Checkpoint(format!("unexpected kind {}", meta.kind)));
        }
        let model = model_from_checkpoint(ckpt)?;
        let array = |name: &str| -> Result<Vec<f32>> {
            ckpt.array(name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {name}")))
        };
        let restore = |group: &str, ids: Vec<_>| -> Result<AdamState<f32>> {
            let mut adam = AdamState::new(meta.train.adam(), ids, &model.params);
            adam.t = *ckpt.adam_t.get(group).unwrap_or(&0);
            for (slot, &id) in adam.params.clone().iter().enumerate() {
                let name = model.params.name(id);
                adam.m[slot] = array(&format!("adam.{group}.m.{name}"))?;
                adam.v[slot] = array(&format!("adam.{group}.v.{name}"))?;
                if adam.config.amsgrad {
                    adam.v_max[slot] = array(&format!("adam.{group}.vmax.{name}"))?;
                }
            }
            Ok(adam)
        };
        let adam_main = restore("main", model.all_params())?;
        let adam_code = restore("code", model.encoder_params())?;
        let [ph, pw] = meta.prior_shape;
        let prior_values = array("prior")?;
        if prior_values.len() != ph * pw {
            return Err(TrainError::Checkpoint("prior size mismatch".into()));
        }
        Ok(Self {
            config: meta.train,
            model,
            adam_main,
            adam_code,
            prior: PriorMap {
                height: ph,
                width: pw,
                values: prior_values,
            },
            rng: ckpt.rng.restore()?,
            epoch: ckpt.epoch,
            history: meta.history,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

fn spec(name: &str, shape: Vec<usize>) -> ArraySpec {
    ArraySpec {
        name: name.to_string(),
        shape,
    }
}

/// Rebuilds only the network from a trainer checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<CoupledModel<f32>> {
    let config: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
        .map_err(|e| TrainError::Checkpoint(format!("model config: {e}")))?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let layout = CoupledModel::<f32>::new(config, &mut rng)?;
    let mut params = ParamSet::new();
    for id in layout.params.ids() {
        let name = layout.params.name(id);
        let (spec, data) = ckpt
            .array(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing parameter {name}")))?;
        let shape = layout.params.get(id).shape();
        if spec.shape != shape {
            return Err(TrainError::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                spec.shape
            )));
        }
        params.add(name, Tensor4::from_vec(shape, data.clone()));
    }
    Ok(CoupledModel::with_params(config, params)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CoupledModel<f32>> {
    model_from_checkpoint(&read_checkpoint(path)?)
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub trainer: Trainer,
    /// Prior after each update, keyed by the epoch that triggered it.
    pub prior_updates: Vec<(u32, PriorMap)>,
}

/// Trains for `cfg.epochs` epochs, updating the prior after every epoch in
/// `cfg.prior_update_epochs` and writing `checkpoint-epoch-NNNN.ckpt` into
/// `checkpoint_dir` at each update when given.
pub fn fit(images: &ImagePair, cfg: TrainConfig, checkpoint_dir: Option<&Path>) -> Result<FitResult> {
    let mut trainer = Trainer::new(images, cfg)?;
    let mut prior_updates = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let report = trainer.train_epoch(images)?;
        let rec = trainer.history.last().expect("epoch recorded");
        info!(
            "epoch {}/{}: total {:.5} (l_r {:.5}, l_c {:.5}, l_t {:.5}, l_z {:.5})",
            rec.epoch, trainer.config.epochs, report.total, report.l_r, report.l_c, report.l_t, report.l_z
        );
        if trainer.config.prior_update_epochs.contains(&trainer.epoch) {
            let mean = trainer.update_prior(images)?.mean();
            info!("epoch {}: prior updated, mean {mean:.4}", trainer.epoch);
            prior_updates.push((trainer.epoch, trainer.prior.clone()));
            if let Some(dir) = checkpoint_dir {
                trainer.save(dir.join(format!("checkpoint-epoch-{:04}.ckpt", trainer.epoch)))?;
            }
        }
    }
    Ok(FitResult { trainer, prior_updates })
}
