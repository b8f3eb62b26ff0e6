//! Difference image, spatial smoothing, Otsu thresholding and accuracy
//! scores against a reference change map.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{save_rgb_png, RasterError, RasterImage};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_FILTER_SIGMA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value {value} at pixel {index} is not binary")]
    NonBinary { index: usize, value: f32 },
    #[error("difference weights must be finite and non-negative, got ({0}, {1})")]
    InvalidWeights(f64, f64),
    #[error("filter sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("at least 2 histogram bins are required, got {0}")]
    InvalidBins(usize),
    #[error("histogram is degenerate: no threshold separates the values")]
    DegenerateHistogram,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, ChangeError>;

/// Per-pixel discrepancy measure inside the difference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelDistance {
    /// Squared Euclidean norm of the channel residuals.
    #[default]
    Squared,
    /// Euclidean norm.
    Root,
}

/// Weights of the two modalities; the default divides by channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceWeights {
    pub w_x: f64,
    pub w_y: f64,
}

impl DifferenceWeights {
    pub fn for_channels(channels_x: usize, channels_y: usize) -> Self {
        Self {
            w_x: 1.0 / channels_x as f64,
            w_y: 1.0 / channels_y as f64,
        }
    }
}

fn check_pair(a: &RasterImage, b: &RasterImage, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(ChangeError::ShapeMismatch(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Unscaled difference image `w_x·d(x, x̂) + w_y·d(y, ŷ)`.
pub fn raw_difference(
    x: &RasterImage,
    x_hat: &RasterImage,
    y: &RasterImage,
    y_hat: &RasterImage,
    weights: DifferenceWeights,
    distance: PixelDistance,
) -> Result<RasterImage> {
    check_pair(x, x_hat, "x vs x_hat")?;
    check_pair(y, y_hat, "y vs y_hat")?;
    if !x.same_spatial_dims(y) {
        return Err(ChangeError::ShapeMismatch(format!(
            "x is {}x{}, y is {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let DifferenceWeights { w_x, w_y } = weights;
    if !(w_x >= 0.0 && w_y >= 0.0 && w_x.is_finite() && w_y.is_finite()) {
        return Err(ChangeError::InvalidWeights(w_x, w_y));
    }
    let pixel_distance = |a: &[f32], b: &[f32]| {
        let sq: f64 = a.iter().zip(b).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum();
        match distance {
            PixelDistance::Squared => sq,
            PixelDistance::Root => sq.sqrt(),
        }
    };
    let (cx, cy) = (x.channels(), y.channels());
    let values = (0..x.pixel_count())
        .map(|p| {
            let r = p * cx..(p + 1) * cx;
            let s = p * cy..(p + 1) * cy;
            let dx = pixel_distance(&x.values()[r.clone()], &x_hat.values()[r]);
            let dy = pixel_distance(&y.values()[s.clone()], &y_hat.values()[s]);
            (w_x * dx + w_y * dy) as f32
        })
        .collect();
    Ok(RasterImage::from_plane(x.height(), x.width(), values)?)
}

/// Global min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn min_max_scale(img: &RasterImage) -> RasterImage {
    let (lo, hi) = img.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if hi > lo {
        img.map(|v| ((v as f64 - lo) / (hi - lo)) as f32)
    } else {
        img.map(|_| 0.0)
    }
    .expect("scaling preserves finiteness")
}

/// Difference image scaled to `[0, 1]`.
pub fn difference_image(
    x: &RasterImage,
    x_hat: &RasterImage,
    y: &RasterImage,
    y_hat: &RasterImage,
    weights: DifferenceWeights,
    distance: PixelDistance,
) -> Result<RasterImage> {
    Ok(min_max_scale(&raw_difference(x, x_hat, y, y_hat, weights, distance)?))
}

/// Normalized 1-D Gaussian of radius `ceil(3σ)`; `[1]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ChangeError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection (`… 1 0 | 0 1 … n-1 | n-1 n-2 …`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

pub(crate) fn convolve_axis(src: &[f64], h: usize, w: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let idx = if along_rows {
                    reflect(r as i64 + off, h) * w + c
                } else {
                    r * w + reflect(c as i64 + off, w)
                };
                acc += wk * src[idx];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Separable Gaussian smoothing of a single-band raster with reflected
/// borders; the result is clamped to `[0, 1]`.
pub fn gaussian_filter(delta: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if delta.channels() != 1 {
        return Err(ChangeError::ShapeMismatch(format!(
            "expected a single-band raster, got {} bands",
            delta.channels()
        )));
    }
    let kernel = gaussian_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(delta.clone());
    }
    let (h, w) = (delta.height(), delta.width());
    let src: Vec<f64> = delta.values().iter().map(|&v| v as f64).collect();
    let tmp = convolve_axis(&src, h, w, &kernel, false);
    let out = convolve_axis(&tmp, h, w, &kernel, true);
    let values = out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(RasterImage::from_plane(h, w, values)?)
}

/// Histogram bin of a `[0, 1]` value: `floor(v·bins)`, clamped.
fn bin_index(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Otsu's threshold over `bins` equal-width bins of `[0, 1]`.
///
/// Candidates are the inner bin edges `k/bins`; the class with bins `< k` is
/// "unchanged". The between-class score uses bin centres and is evaluated as
/// `(N₁·S₀ − N₀·S₁)² / (N₀·N₁)`, where `S` sums `2·bin + 1` in exact integer
/// arithmetic. Ties resolve to the lowest edge.
pub fn otsu_threshold_values(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(ChangeError::InvalidBins(bins));
    }
    let mut hist = vec![0i128; bins];
    for &v in values {
        hist[bin_index(v, bins)] += 1;
    }
    let n: i128 = hist.iter().sum();
    let s_total: i128 = hist.iter().enumerate().map(|(b, &c)| c * (2 * b as i128 + 1)).sum();
    let (mut n0, mut s0) = (0i128, 0i128);
    let mut best: Option<(f64, usize)> = None;
    for k in 1..bins {
        n0 += hist[k - 1];
        s0 += hist[k - 1] * (2 * (k as i128 - 1) + 1);
        let (n1, s1) = (n - n0, s_total - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let num = (n1 * s0 - n0 * s1) as f64;
        let score = num * num / ((n0 as f64) * (n1 as f64));
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, k));
        }
    }
    best.map(|(_, k)| k as f64 / bins as f64)
        .ok_or(ChangeError::DegenerateHistogram)
}

pub fn otsu_threshold(delta: &RasterImage, bins: usize) -> Result<f64> {
    let values: Vec<f64> = delta.values().iter().map(|&v| v as f64).collect();
    otsu_threshold_values(&values, bins)
}

/// Binary change map, `1` = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(ChangeError::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some((index, &v)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(ChangeError::NonBinary {
                index,
                value: v as f32,
            });
        }
        Ok(Self { height, width, values })
    }

    /// Accepts a single-band raster holding only `0` and `1`.
    pub fn from_raster(img: &RasterImage) -> Result<Self> {
        if img.channels() != 1 {
            return Err(ChangeError::ShapeMismatch(format!(
                "binary map must have one band, got {}",
                img.channels()
            )));
        }
        let values = img
            .values()
            .iter()
            .enumerate()
            .map(|(index, &v)| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                value => Err(ChangeError::NonBinary { index, value }),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(img.height(), img.width(), values)
    }

    pub fn to_raster(&self) -> RasterImage {
        let values = self.values.iter().map(|&v| v as f32).collect();
        RasterImage::from_plane(self.height, self.width, values).expect("map dimensions are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn changed_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v == 1).count() as f64 / self.values.len() as f64
    }
}

/// `1` where `value ≥ threshold`.
pub fn binarize(delta: &RasterImage, threshold: f64) -> Result<BinaryMap> {
    if delta.channels() != 1 {
        return Err(ChangeError::ShapeMismatch(format!(
            "expected a single-band raster, got {} bands",
            delta.channels()
        )));
    }
    let values = delta.values().iter().map(|&v| u8::from(v as f64 >= threshold)).collect();
    BinaryMap::new(delta.height(), delta.width(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Chance-agreement formula used by κ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaVariant {
    /// `p_e = (TP+FP)(FN+TN)/N² + (TP+FN)(FP+TN)/N²`.
    #[default]
    CrossPaired,
    /// Textbook Cohen: `p_e = (TP+FP)(TP+FN)/N² + (FN+TN)(FP+TN)/N²`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub confusion: Confusion,
    pub oa: f64,
    pub p_e: f64,
    pub kappa: f64,
    /// `p_e = 1`, κ undefined and reported as 0.
    pub degenerate_kappa: bool,
    pub kappa_variant: KappaVariant,
}

/// OA and κ of a confusion matrix.
pub fn score_confusion(c: Confusion, variant: KappaVariant) -> Score {
    let n = c.total() as f64;
    let (tp, tn, fp, fn_) = (c.tp as f64 / n, c.tn as f64 / n, c.fp as f64 / n, c.fn_ as f64 / n);
    let oa = tp + tn;
    let p_e = match variant {
        KappaVariant::CrossPaired => (tp + fp) * (fn_ + tn) + (tp + fn_) * (fp + tn),
        KappaVariant::Standard => (tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn),
    };
    let degenerate = p_e >= 1.0;
    let kappa = if degenerate { 0.0 } else { (oa - p_e) / (1.0 - p_e) };
    Score {
        confusion: c,
        oa,
        p_e,
        kappa,
        degenerate_kappa: degenerate,
        kappa_variant: variant,
    }
}

pub fn confusion(map: &BinaryMap, gt: &BinaryMap) -> Result<Confusion> {
    if map.height != gt.height || map.width != gt.width {
        return Err(ChangeError::ShapeMismatch(format!(
            "map is {}x{}, ground truth is {}x{}",
            map.height, map.width, gt.height, gt.width
        )));
    }
    let mut c = Confusion::default();
    for (&m, &g) in map.values.iter().zip(&gt.values) {
        match (m, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn score(map: &BinaryMap, gt: &BinaryMap, variant: KappaVariant) -> Result<Score> {
    Ok(score_confusion(confusion(map, gt)?, variant))
}

pub const COLOR_TP: [u8; 3] = [255, 255, 255];
pub const COLOR_TN: [u8; 3] = [0, 0, 0];
pub const COLOR_FP: [u8; 3] = [0, 255, 0];
pub const COLOR_FN: [u8; 3] = [255, 0, 0];

/// RGB confusion map: TP white, TN black, FP green, FN red.
pub fn confusion_rgb(map: &BinaryMap, gt: &BinaryMap) -> Result<Vec<u8>> {
    confusion(map, gt)?;
    let mut buf = Vec::with_capacity(map.values.len() * 3);
    for (&m, &g) in map.values.iter().zip(&gt.values) {
        buf.extend_from_slice(match (m, g) {
            (1, 1) => &COLOR_TP,
            (0, 0) => &COLOR_TN,
            (1, 0) => &COLOR_FP,
            _ => &COLOR_FN,
        });
    }
    Ok(buf)
}

pub fn save_confusion_png(map: &BinaryMap, gt: &BinaryMap, path: impl AsRef<Path>) -> Result<()> {
    let buf = confusion_rgb(map, gt)?;
    Ok(save_rgb_png(map.width, map.height, buf, path.as_ref())?)
}

/// Parameters of the thresholding tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub filter_sigma: f64,
    pub bins: usize,
    pub kappa_variant: KappaVariant,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            filter_sigma: DEFAULT_FILTER_SIGMA,
            bins: DEFAULT_BINS,
            kappa_variant: KappaVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeResult {
    pub delta: RasterImage,
    pub delta_filtered: RasterImage,
    pub threshold: f64,
    pub map: BinaryMap,
    pub score: Option<Score>,
}

/// Filters a scaled difference image, thresholds it and optionally scores
/// the result.
pub fn detect(delta: RasterImage, cfg: &DetectConfig, gt: Option<&BinaryMap>) -> Result<ChangeResult> {
    let delta_filtered = gaussian_filter(&delta, cfg.filter_sigma)?;
    let threshold = otsu_threshold(&delta_filtered, cfg.bins)?;
    let map = binarize(&delta_filtered, threshold)?;
    let score = gt.map(|g| score(&map, g, cfg.kappa_variant)).transpose()?;
    Ok(ChangeResult {
        delta,
        delta_filtered,
        threshold,
        map,
        score,
    })
}

/// Flat metrics record for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: Option<f64>,
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub kappa: f64,
    pub degenerate_kappa: bool,
    pub kappa_variant: KappaVariant,
}

impl MetricsReport {
    pub fn new(score: &Score, threshold: Option<f64>) -> Self {
        Self {
            threshold,
            tp: score.confusion.tp,
            tn: score.confusion.tn,
            fp: score.confusion.fp,
            fn_: score.confusion.fn_,
            oa: score.oa,
            kappa: score.kappa,
            degenerate_kappa: score.degenerate_kappa,
            kappa_variant: score.kappa_variant,
        }
    }
}
