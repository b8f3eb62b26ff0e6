//! The two coupled autoencoders and the four loss terms.
//!
//! Each encoder and decoder is `Conv(3×3×h) → LReLU → Conv(3×3×h) → LReLU →
//! Conv(3×3×C) → tanh` with no striding or pooling, so every mapping keeps
//! the patch size. Encoders emit `C = 3` code channels; decoders emit the
//! channel count of their domain.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradengine::{
    self, code_correlation_matrix, weighted_sq_distance, Activation, ConvLayer, GradError, Graph, NodeId,
    ParamId, ParamSet, Scalar, Tensor4,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prior weights must lie in [0, 1]; found {value} at pixel {index}")]
    PriorRange { index: usize, value: f64 },
    #[error("loss term {term} is not finite ({value})")]
    Divergence { term: &'static str, value: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels_x: usize,
    pub channels_y: usize,
    /// Filters in the two hidden layers of every network.
    pub hidden: usize,
    pub code_channels: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(channels_x: usize, channels_y: usize) -> Self {
        Self {
            channels_x,
            channels_y,
            hidden: 100,
            code_channels: 3,
            dropout: 0.2,
            leaky_slope: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_x == 0 || self.channels_y == 0 || self.hidden == 0 || self.code_channels == 0 {
            return Err(ModelError::Config("channel and filter counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(ModelError::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }
}

/// Three stacked same-size convolutions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    pub layers: Vec<ConvLayer>,
}

impl Network {
    fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let widths = [(c_in, hidden), (hidden, hidden), (hidden, c_out)];
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let act = if i + 1 == widths.len() {
                    Activation::Tanh
                } else {
                    Activation::LeakyRelu
                };
                ConvLayer::init(params, &format!("{name}.{i}"), a, b, act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.kernel, l.bias]).collect()
    }

    /// Records the network on a tape. Dropout follows every hidden activation.
    pub fn record<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        input: NodeId,
        cfg: &ModelConfig,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let slope = T::from_f64_lossy(cfg.leaky_slope);
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            h = g.conv2d(h, layer.kernel, layer.bias)?;
            h = match layer.activation {
                Activation::LeakyRelu => g.leaky_relu(h, slope),
                Activation::Tanh => g.tanh(h),
                Activation::None => h,
            };
            if i + 1 < self.layers.len() {
                h = g.dropout(h, cfg.dropout, training, rng)?;
            }
        }
        Ok(h)
    }

    /// Inference pass (dropout off) without a tape.
    pub fn infer<T: Scalar>(&self, params: &ParamSet<T>, input: &Tensor4<T>, cfg: &ModelConfig) -> Result<Tensor4<T>> {
        let slope = T::from_f64_lossy(cfg.leaky_slope);
        let mut h = gradengine::conv2d(input, &self.layers[0], params, slope)?;
        for layer in &self.layers[1..] {
            h = gradengine::conv2d(&h, layer, params, slope)?;
        }
        Ok(h)
    }
}

/// Parameters of `E_X, D_X, E_Y, D_Y` in one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder_x: Network,
    pub encoder_y: Network,
    pub decoder_x: Network,
    pub decoder_y: Network,
}

/// Node handles of every mapping recorded by [`CoupledModel::transform`].
#[derive(Debug, Clone, Copy)]
pub struct Mappings {
    pub x: NodeId,
    pub y: NodeId,
    pub z_x: NodeId,
    pub z_y: NodeId,
    /// `D_X(E_X(x))`
    pub x_tilde: NodeId,
    /// `D_Y(E_Y(y))`
    pub y_tilde: NodeId,
    /// `G(y) = D_X(E_Y(y))`
    pub x_hat: NodeId,
    /// `F(x) = D_Y(E_X(x))`
    pub y_hat: NodeId,
    /// `G(F(x))`
    pub x_dot: NodeId,
    /// `F(G(y))`
    pub y_dot: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    XToY,
    YToX,
    ReconstructX,
    ReconstructY,
    EncodeX,
    EncodeY,
}

impl Direction {
    /// True when the direction consumes the X image.
    pub fn reads_x(self) -> bool {
        matches!(self, Direction::XToY | Direction::ReconstructX | Direction::EncodeX)
    }

    /// Longest chain of 3×3 convolutions along the direction.
    pub fn receptive_radius(self) -> usize {
        match self {
            Direction::EncodeX | Direction::EncodeY => 3,
            _ => 6,
        }
    }
}

impl<T: Scalar> CoupledModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (h, z) = (config.hidden, config.code_channels);
        let encoder_x = Network::init(&mut params, "encoder_x", config.channels_x, h, z, rng);
        let encoder_y = Network::init(&mut params, "encoder_y", config.channels_y, h, z, rng);
        let decoder_x = Network::init(&mut params, "decoder_x", z, h, config.channels_x, rng);
        let decoder_y = Network::init(&mut params, "decoder_y", z, h, config.channels_y, rng);
        Ok(Self {
            config,
            params,
            encoder_x,
            encoder_y,
            decoder_x,
            decoder_y,
        })
    }

    /// Rebuilds the layer layout over an existing parameter set (e.g. one
    /// loaded from a checkpoint). Fails when names or shapes disagree.
    pub fn with_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut fresh = Self::new(config, &mut rng)?;
        if params.len() != fresh.params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for id in fresh.params.ids() {
            if fresh.params.name(id) != params.name(id) || fresh.params.get(id).shape() != params.get(id).shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {} has shape {:?}, expected {} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    fresh.params.name(id),
                    fresh.params.get(id).shape()
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_x.param_ids();
        ids.extend(self.encoder_y.param_ids());
        ids
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut ids = self.decoder_x.param_ids();
        ids.extend(self.decoder_y.param_ids());
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    fn check_inputs(&self, x: &Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.config.channels_x || y.channels() != self.config.channels_y {
            return Err(ModelError::Shape(format!(
                "model expects {}/{} channels, got {}/{}",
                self.config.channels_x,
                self.config.channels_y,
                x.channels(),
                y.channels()
            )));
        }
        if x.batch() != y.batch() || x.height() != y.height() || x.width() != y.width() {
            return Err(ModelError::Shape(format!(
                "patches are not co-located: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// Records all six mappings and both codes for one co-located pair.
    pub fn transform<'p, R: Rng + ?Sized>(
        &'p self,
        g: &mut Graph<'p, T>,
        x: Tensor4<T>,
        y: Tensor4<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Mappings> {
        self.check_inputs(&x, &y)?;
        let cfg = &self.config;
        let x = g.input(x, false);
        let y = g.input(y, false);
        let z_x = self.encoder_x.record(g, x, cfg, training, rng)?;
        let z_y = self.encoder_y.record(g, y, cfg, training, rng)?;
        let x_tilde = self.decoder_x.record(g, z_x, cfg, training, rng)?;
        let y_tilde = self.decoder_y.record(g, z_y, cfg, training, rng)?;
        let y_hat = self.decoder_y.record(g, z_x, cfg, training, rng)?;
        let x_hat = self.decoder_x.record(g, z_y, cfg, training, rng)?;
        let z_y_hat = self.encoder_y.record(g, y_hat, cfg, training, rng)?;
        let x_dot = self.decoder_x.record(g, z_y_hat, cfg, training, rng)?;
        let z_x_hat = self.encoder_x.record(g, x_hat, cfg, training, rng)?;
        let y_dot = self.decoder_y.record(g, z_x_hat, cfg, training, rng)?;
        Ok(Mappings {
            x,
            y,
            z_x,
            z_y,
            x_tilde,
            y_tilde,
            x_hat,
            y_hat,
            x_dot,
            y_dot,
        })
    }

    /// Inference along one direction (dropout off).
    pub fn infer(&self, direction: Direction, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let expected = if direction.reads_x() {
            self.config.channels_x
        } else {
            self.config.channels_y
        };
        if input.channels() != expected {
            return Err(ModelError::Shape(format!(
                "{direction:?} expects {expected} channels, got {}",
                input.channels()
            )));
        }
        let (p, c) = (&self.params, &self.config);
        Ok(match direction {
            Direction::XToY => self.decoder_y.infer(p, &self.encoder_x.infer(p, input, c)?, c)?,
            Direction::YToX => self.decoder_x.infer(p, &self.encoder_y.infer(p, input, c)?, c)?,
            Direction::ReconstructX => self.decoder_x.infer(p, &self.encoder_x.infer(p, input, c)?, c)?,
            Direction::ReconstructY => self.decoder_y.infer(p, &self.encoder_y.infer(p, input, c)?, c)?,
            Direction::EncodeX => self.encoder_x.infer(p, input, c)?,
            Direction::EncodeY => self.encoder_y.infer(p, input, c)?,
        })
    }

    /// Output channel count of a direction.
    pub fn output_channels(&self, direction: Direction) -> usize {
        match direction {
            Direction::XToY | Direction::ReconstructY => self.config.channels_y,
            Direction::YToX | Direction::ReconstructX => self.config.channels_x,
            Direction::EncodeX | Direction::EncodeY => self.config.code_channels,
        }
    }
}

/// `λ` weights of the total loss; the defaults are all one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub lambda_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_c: 1.0,
            lambda_t: 1.0,
            lambda_z: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.lambda_r, self.lambda_c, self.lambda_t, self.lambda_z] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Config(format!("loss weight {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub l_t: f64,
    pub l_z: f64,
    pub total: f64,
}

/// `λ_r·L_r + λ_c·L_c + λ_t·L_t + λ_z·L_z`; any non-finite term is a divergence.
pub fn total_loss(l_r: f64, l_c: f64, l_t: f64, l_z: f64, w: &LossWeights) -> Result<LossReport> {
    for (term, value) in [("l_r", l_r), ("l_c", l_c), ("l_t", l_t), ("l_z", l_z)] {
        if !value.is_finite() {
            return Err(ModelError::Divergence { term, value });
        }
    }
    Ok(LossReport {
        l_r,
        l_c,
        l_t,
        l_z,
        total: w.lambda_r * l_r + w.lambda_c * l_c + w.lambda_t * l_t + w.lambda_z * l_z,
    })
}

/// `(1/n)·Σᵢ πᵢ‖aᵢ − bᵢ‖²` over the pixels of two equal-shape patches.
pub fn weighted_patch_distance<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, pi: Option<&[T]>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(ModelError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if let Some(pi) = pi {
        if pi.len() != a.pixels() {
            return Err(ModelError::Shape(format!("{} weights for {} pixels", pi.len(), a.pixels())));
        }
    }
    Ok(weighted_sq_distance(a.data(), b.data(), a.channels(), pi))
}

/// Code correlation matrix `R` of two code crops.
pub fn code_correlation<T: Scalar>(z_x: &Tensor4<T>, z_y: &Tensor4<T>) -> Result<Tensor4<T>> {
    if z_x.channels() != z_y.channels() || z_x.pixels() != z_y.pixels() {
        return Err(ModelError::Shape(format!("codes {:?} vs {:?}", z_x.shape(), z_y.shape())));
    }
    Ok(code_correlation_matrix(z_x.data(), z_y.data(), z_x.pixels(), z_x.channels()))
}

fn check_prior<T: Scalar>(pi: &[T]) -> Result<()> {
    match pi.iter().position(|&p| !(p >= T::zero() && p <= T::one())) {
        Some(index) => Err(ModelError::PriorRange {
            index,
            value: pi[index].as_f64(),
        }),
        None => Ok(()),
    }
}

/// `δ(x̃, x) + δ(ỹ, y)`.
pub fn loss_reconstruction<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    x_tilde: NodeId,
    y: NodeId,
    y_tilde: NodeId,
) -> Result<NodeId> {
    let a = g.sq_distance(x_tilde, x, None)?;
    let b = g.sq_distance(y_tilde, y, None)?;
    Ok(g.weighted_sum(&[(a, T::one()), (b, T::one())])?)
}

/// `δ(ẋ, x) + δ(ẏ, y)`.
pub fn loss_cycle<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, x_dot: NodeId, y: NodeId, y_dot: NodeId) -> Result<NodeId> {
    loss_reconstruction(g, x, x_dot, y, y_dot)
}

/// `δ(x̂, x | π) + δ(ŷ, y | π)`.
pub fn loss_translation<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    x_hat: NodeId,
    y: NodeId,
    y_hat: NodeId,
    pi: &[T],
) -> Result<NodeId> {
    check_prior(pi)?;
    let a = g.sq_distance(x_hat, x, Some(pi))?;
    let b = g.sq_distance(y_hat, y, Some(pi))?;
    Ok(g.weighted_sum(&[(a, T::one()), (b, T::one())])?)
}

/// Mean squared difference between `R` (a recorded `(1, n, n, 1)` node) and
/// the fixed target `S`, averaged over all `n²` entries.
pub fn loss_code<T: Scalar>(g: &mut Graph<'_, T>, r: NodeId, s: &[T]) -> Result<NodeId> {
    let shape = g.value(r).shape();
    if s.len() != shape.iter().product::<usize>() {
        return Err(ModelError::Shape(format!("target of {} entries for R {:?}", s.len(), shape)));
    }
    let s = g.input(Tensor4::from_vec(shape, s.to_vec()), false);
    Ok(g.sq_distance(r, s, None)?)
}

/// Where the code-correlation crop sits inside a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl CropWindow {
    /// Centered `size×size` window of a `patch×patch` patch.
    pub fn centered(patch: usize, size: usize) -> Self {
        let off = (patch - size.min(patch)) / 2;
        Self {
            y0: off,
            x0: off,
            size: size.min(patch),
        }
    }
}

/// Node handles of the four loss terms for one patch pair.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub mappings: Mappings,
    pub l_r: NodeId,
    pub l_c: NodeId,
    pub l_t: NodeId,
    pub l_z: NodeId,
    /// `λ_r·L_r + λ_c·L_c + λ_t·L_t`, the part optimized on every parameter.
    pub main: NodeId,
}

/// Records one patch pair's forward pass and all loss terms.
#[allow(clippy::too_many_arguments)]
pub fn record_losses<'p, T: Scalar, R: Rng + ?Sized>(
    model: &'p CoupledModel<T>,
    g: &mut Graph<'p, T>,
    x: Tensor4<T>,
    y: Tensor4<T>,
    pi: &[T],
    crop: CropWindow,
    similarity: &[T],
    weights: &LossWeights,
    training: bool,
    rng: &mut R,
) -> Result<LossNodes> {
    let m = model.transform(g, x, y, training, rng)?;
    let l_r = loss_reconstruction(g, m.x, m.x_tilde, m.y, m.y_tilde)?;
    let l_c = loss_cycle(g, m.x, m.x_dot, m.y, m.y_dot)?;
    let l_t = loss_translation(g, m.x, m.x_hat, m.y, m.y_hat, pi)?;
    let zx = g.crop(m.z_x, crop.y0, crop.x0, crop.size, crop.size)?;
    let zy = g.crop(m.z_y, crop.y0, crop.x0, crop.size, crop.size)?;
    let r = g.code_correlation(zx, zy)?;
    let l_z = loss_code(g, r, similarity)?;
    let w = |v: f64| T::from_f64_lossy(v);
    let main = g.weighted_sum(&[
        (l_r, w(weights.lambda_r)),
        (l_c, w(weights.lambda_c)),
        (l_t, w(weights.lambda_t)),
    ])?;
    Ok(LossNodes {
        mappings: m,
        l_r,
        l_c,
        l_t,
        l_z,
        main,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradengine::Grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> CoupledModel<f64> {
        let mut cfg = ModelConfig::new(2, 3);
        cfg.hidden = 4;
        CoupledModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn architecture_layout() {
        let m = small_model(0);
        let p = &m.params;
        let outs = |n: &Network| n.layers.iter().map(|l| l.out_channels(p)).collect::<Vec<_>>();
        assert_eq!(outs(&m.encoder_x), vec![4, 4, 3]);
        assert_eq!(outs(&m.encoder_y), vec![4, 4, 3]);
        assert_eq!(outs(&m.decoder_x), vec![4, 4, 2]);
        assert_eq!(outs(&m.decoder_y), vec![4, 4, 3]);
        assert_eq!(m.encoder_x.layers[2].activation, Activation::Tanh);
        assert_eq!(m.decoder_y.layers[0].activation, Activation::LeakyRelu);
        let default = ModelConfig::new(3, 5);
        assert_eq!((default.hidden, default.code_channels, default.dropout, default.leaky_slope), (100, 3, 0.2, 0.3));
    }

    #[test]
    fn transform_shapes_and_code_bounds() {
        let m = small_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor([1, 6, 5, 2], &mut rng).map(|v| v * 50.0);
        let y = random_tensor([1, 6, 5, 3], &mut rng);
        let mut g = Graph::new(&m.params);
        let t = m.transform(&mut g, x, y, true, &mut rng).unwrap();
        for (id, c) in [
            (t.x_tilde, 2),
            (t.x_hat, 2),
            (t.x_dot, 2),
            (t.y_tilde, 3),
            (t.y_hat, 3),
            (t.y_dot, 3),
            (t.z_x, 3),
            (t.z_y, 3),
        ] {
            assert_eq!(g.value(id).shape(), [1, 6, 5, c]);
        }
        assert!(g.value(t.z_x).max_abs() <= 1.0);
        assert!(g.value(t.z_y).max_abs() <= 1.0);
    }

    #[test]
    fn transform_rejects_bad_channels() {
        let m = small_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&m.params);
        let x = random_tensor([1, 4, 4, 3], &mut rng);
        let y = random_tensor([1, 4, 4, 3], &mut rng);
        assert!(matches!(m.transform(&mut g, x, y, false, &mut rng), Err(ModelError::Shape(_))));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = small_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor([1, 5, 5, 2], &mut rng);
        let a = m.infer(Direction::ReconstructX, &x).unwrap();
        let b = m.infer(Direction::ReconstructX, &x).unwrap();
        assert_eq!(a, b);
        // the tape path without dropout gives the same numbers
        let y = random_tensor([1, 5, 5, 3], &mut rng);
        let mut g = Graph::new(&m.params);
        let t = m.transform(&mut g, x.clone(), y, false, &mut rng).unwrap();
        assert_eq!(g.value(t.x_tilde), &a);
        assert_eq!(g.value(t.y_hat), &m.infer(Direction::XToY, &x).unwrap());
    }

    #[test]
    fn weighted_patch_distance_examples() {
        let a = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let b = Tensor4::zeros([1, 1, 2, 2]);
        assert_eq!(weighted_patch_distance(&a, &a, None).unwrap(), 0.0);
        assert_eq!(weighted_patch_distance(&a, &b, Some(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(weighted_patch_distance(&a, &b, Some(&[1.0, 0.5])).unwrap(), 1.5);
        let c = Tensor4::zeros([1, 2, 2, 1]);
        assert!(weighted_patch_distance(&a, &c, None).is_err());
    }

    fn graph_loss(
        f: impl for<'g> Fn(&mut Graph<'g, f64>, NodeId, NodeId, NodeId, NodeId) -> Result<NodeId>,
        x: Tensor4<f64>,
        xo: Tensor4<f64>,
        y: Tensor4<f64>,
        yo: Tensor4<f64>,
    ) -> f64 {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (x, xo, y, yo) = (g.input(x, false), g.input(xo, false), g.input(y, false), g.input(yo, false));
        let l = f(&mut g, x, xo, y, yo).unwrap();
        g.scalar(l)
    }

    #[test]
    fn reconstruction_and_cycle_examples() {
        let x = Tensor4::from_vec([1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]);
        let y = Tensor4::from_vec([1, 2, 2, 2], vec![0.5; 8]);
        let perfect = graph_loss(loss_reconstruction, x.clone(), x.clone(), y.clone(), y.clone());
        assert_eq!(perfect, 0.0);

        let shifted = x.map(|v| v + 1.0);
        let one = graph_loss(loss_reconstruction, x.clone(), shifted.clone(), y.clone(), y.clone());
        assert!((one - 1.0).abs() < 1e-12);
        let doubled = x.map(|v| v + 2.0);
        let four = graph_loss(loss_reconstruction, x.clone(), doubled, y.clone(), y.clone());
        assert!((four - 4.0).abs() < 1e-12);

        // ẏ off by c on one of n pixels → c²/n
        let mut y_dot = y.clone();
        y_dot.data_mut()[2] += 0.3;
        let c = graph_loss(loss_cycle, x.clone(), x.clone(), y.clone(), y_dot.clone());
        assert!((c - 0.09 / 4.0).abs() < 1e-12);
        // error moved to the x side gives the same total
        let mut x_dot = x.clone();
        x_dot.data_mut()[1] += 0.3;
        let c2 = graph_loss(loss_cycle, x.clone(), x_dot, y.clone(), y.clone());
        assert!((c - c2).abs() < 1e-12);
    }

    #[test]
    fn translation_examples() {
        let x = Tensor4::from_vec([1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]);
        let y = Tensor4::from_vec([1, 2, 2, 1], vec![-0.1, 0.0, 0.5, 0.9]);
        let eval = |pi: &[f64]| {
            let params = ParamSet::new();
            let mut g = Graph::new(&params);
            let (xn, xh) = (g.input(x.clone(), false), g.input(y.clone(), false));
            let (yn, yh) = (g.input(y.clone(), false), g.input(x.clone(), false));
            loss_translation(&mut g, xn, xh, yn, yh, pi).map(|l| g.scalar(l))
        };
        assert_eq!(eval(&[0.0; 4]).unwrap(), 0.0);
        let full = eval(&[0.8; 4]).unwrap();
        let half = eval(&[0.4; 4]).unwrap();
        assert!((full - 2.0 * half).abs() < 1e-12);
        assert!(matches!(eval(&[0.0, 1.5, 0.0, 0.0]), Err(ModelError::PriorRange { index: 1, .. })));
    }

    #[test]
    fn code_correlation_examples() {
        let r = |a: [f64; 3], b: [f64; 3]| {
            let za = Tensor4::from_vec([1, 1, 1, 3], a.to_vec());
            let zb = Tensor4::from_vec([1, 1, 1, 3], b.to_vec());
            code_correlation(&za, &zb).unwrap().data()[0]
        };
        assert_eq!(r([1.0; 3], [1.0; 3]), 1.0);
        assert_eq!(r([1.0; 3], [-1.0; 3]), 0.0);
        assert_eq!(r([1.0, -1.0, 0.0], [1.0, 1.0, 0.0]), 0.5);
    }

    #[test]
    fn loss_code_examples() {
        let params = ParamSet::<f64>::new();
        let mut g = Graph::new(&params);
        let s = vec![0.2, 0.5, 0.7, 0.1];
        let r_same = g.input(Tensor4::from_vec([1, 2, 2, 1], s.clone()), false);
        let l = loss_code(&mut g, r_same, &s).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let r_off = g.input(Tensor4::from_vec([1, 2, 2, 1], s.iter().map(|v| v + 0.1).collect()), false);
        let l = loss_code(&mut g, r_off, &s).unwrap();
        assert!((g.scalar(l) - 0.01).abs() < 1e-12);
        assert!(loss_code(&mut g, r_off, &s[..3]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(w, LossWeights { lambda_r: 1.0, lambda_c: 1.0, lambda_t: 1.0, lambda_z: 1.0 });
        let r = total_loss(0.1, 0.2, 0.3, 0.4, &w).unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
        let no_z = LossWeights { lambda_z: 0.0, ..w };
        assert_eq!(
            total_loss(0.1, 0.2, 0.3, 0.4, &no_z).unwrap().total,
            total_loss(0.1, 0.2, 0.3, 99.0, &no_z).unwrap().total
        );
        assert!(matches!(
            total_loss(0.1, f64::NAN, 0.3, 0.4, &w),
            Err(ModelError::Divergence { term: "l_c", .. })
        ));
    }

    #[test]
    fn code_loss_only_reaches_encoders() {
        let m = small_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor([1, 6, 6, 2], &mut rng);
        let y = random_tensor([1, 6, 6, 3], &mut rng);
        let crop = CropWindow::centered(6, 4);
        let s: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pi = vec![0.5; 36];
        let mut g = Graph::new(&m.params);
        let nodes = record_losses(&m, &mut g, x, y, &pi, crop, &s, &LossWeights::default(), true, &mut rng).unwrap();
        let mut grads = Grads::zeros_like(&m.params);
        g.backward(nodes.l_z, 1.0, &mut grads).unwrap();
        assert_eq!(grads.norm(m.decoder_params()), 0.0);
        assert!(grads.norm(m.encoder_params()) > 0.0);
    }

    #[test]
    fn with_params_checks_layout() {
        let m = small_model(7);
        let rebuilt = CoupledModel::with_params(m.config, m.params.clone()).unwrap();
        assert_eq!(rebuilt, m);
        let mut other = m.config;
        other.hidden = 5;
        assert!(CoupledModel::with_params(other, m.params.clone()).is_err());
    }

    #[test]
    fn crop_window_is_centered() {
        assert_eq!(CropWindow::centered(100, 20), CropWindow { y0: 40, x0: 40, size: 20 });
        assert_eq!(CropWindow::centered(64, 16), CropWindow { y0: 24, x0: 24, size: 16 });
    }
}
