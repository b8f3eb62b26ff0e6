//! Synthetic co-registered image pairs from two sensors with a known change
//! region.
//!
//! A smooth latent class field is rendered through two unrelated sensor
//! models. Inside one connected blob the class of the second acquisition is
//! reassigned, so the ground truth is exactly the blob.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::changemap::{convolve_axis, gaussian_kernel, BinaryMap};
use crate::raster::{compute_stats, normalize, RasterError, RasterImage};

/// Attempts (distinct random streams) before giving up on a change blob.
pub const MAX_ATTEMPTS: u64 = 10;
/// Relative tolerance on the realized change fraction.
pub const FRACTION_TOLERANCE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("change blob missed the target fraction {target} in {attempts} attempts")]
    BlobFailed { target: f64, attempts: u64 },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub channels_x: usize,
    pub channels_y: usize,
    pub change_fraction: f64,
    pub noise_std_x: f64,
    pub noise_std_y: f64,
    /// Correlation length of the latent field in pixels.
    pub smoothness: f64,
    /// Equivalent number of looks of multiplicative gamma noise on the
    /// second sensor; `0` disables it.
    pub speckle_looks: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            num_classes: 5,
            channels_x: 3,
            channels_y: 5,
            change_fraction: 0.1,
            noise_std_x: 0.05,
            noise_std_y: 0.15,
            smoothness: 8.0,
            speckle_looks: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.channels_x == 0 || self.channels_y == 0 {
            return bad("channel counts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.change_fraction) {
            return bad("change_fraction must lie in [0, 1)");
        }
        for (name, v) in [
            ("noise_std_x", self.noise_std_x),
            ("noise_std_y", self.noise_std_y),
            ("smoothness", self.smoothness),
            ("speckle_looks", self.speckle_looks),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub x: RasterImage,
    pub y: RasterImage,
    pub gt: BinaryMap,
    /// Latent classes of the first and second acquisition.
    pub field_x: Vec<u8>,
    pub field_y: Vec<u8>,
    /// Zero-based attempt that produced the blob.
    pub attempt: u64,
}

/// Record of a generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub attempt: u64,
    pub changed_pixels: usize,
    pub realized_change_fraction: f64,
}

impl SynthPair {
    pub fn manifest(&self, config: &SynthConfig) -> SynthManifest {
        let changed = self.gt.values().iter().filter(|&&v| v == 1).count();
        SynthManifest {
            config: config.clone(),
            attempt: self.attempt,
            changed_pixels: changed,
            realized_change_fraction: changed as f64 / self.gt.values().len() as f64,
        }
    }
}

/// Smoothed white noise quantized into `k` equally populated classes.
fn class_field(h: usize, w: usize, k: usize, smoothness: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
    let kernel = gaussian_kernel(smoothness).expect("validated smoothness");
    let smooth = convolve_axis(&convolve_axis(&noise, h, w, &kernel, false), h, w, &kernel, true);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(a.cmp(&b)));
    let mut field = vec![0u8; h * w];
    for (rank, &p) in order.iter().enumerate() {
        field[p] = (rank * k / (h * w)) as u8;
    }
    field
}

/// Connected blob of exactly `target` pixels grown by a random walk that
/// stamps disks; each new centre lies inside the previous disk.
fn random_walk_blob(h: usize, w: usize, target: usize, rng: &mut ChaCha8Rng) -> Option<Vec<bool>> {
    let mut mask = vec![false; h * w];
    if target == 0 {
        return Some(mask);
    }
    let radius = ((target as f64).sqrt() / 5.0).max(1.0) as i64;
    let (mut cy, mut cx) = (rng.gen_range(0..h) as i64, rng.gen_range(0..w) as i64);
    let mut count = 0;
    let max_steps = 50 * target + 100;
    for _ in 0..max_steps {
        let mut disk: Vec<(i64, usize)> = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (y, x) = (cy + dy, cx + dx);
                if dy * dy + dx * dx > radius * radius || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                disk.push((dy * dy + dx * dx, y as usize * w + x as usize));
            }
        }
        disk.sort();
        for (_, p) in disk {
            if !mask[p] {
                mask[p] = true;
                count += 1;
                if count == target {
                    return Some(mask);
                }
            }
        }
        let step = |c: i64, n: usize, rng: &mut ChaCha8Rng| (c + rng.gen_range(-radius..=radius)).clamp(0, n as i64 - 1);
        cy = step(cy, h, rng);
        cx = step(cx, w, rng);
    }
    None
}

/// `k` mean vectors in `[-lim, lim]^c`, resampled greedily for spread.
fn class_means(k: usize, c: usize, lim: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    while means.len() < k {
        let best = (0..32)
            .map(|_| (0..c).map(|_| rng.gen_range(-lim..=lim)).collect::<Vec<f64>>())
            .map(|cand| {
                let gap = means
                    .iter()
                    .map(|m| m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                (gap, cand)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty candidate set");
        means.push(best.1);
    }
    means
}

fn render_x(field: &[u8], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let means = class_means(cfg.num_classes, cfg.channels_x, 0.8, rng);
    let noise = Normal::new(0.0, cfg.noise_std_x).expect("validated noise");
    let values = field
        .iter()
        .flat_map(|&k| means[k as usize].iter().map(|&m| m + noise.sample(rng)).collect::<Vec<_>>())
        .map(|v| v.clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(RasterImage::new(cfg.height, cfg.width, cfg.channels_x, values)?)
}

/// Nonlinear second sensor: class means are mixed across channels and
/// passed through a saturating response before additive and optional
/// multiplicative noise; the result is rescaled to `[-1, 1]`.
fn render_y(field: &[u8], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let c = cfg.channels_y;
    let means = class_means(cfg.num_classes, c, 1.0, rng);
    let mixing: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 1.0 } else { rng.gen_range(-0.4..0.4) }).collect())
        .collect();
    let gains: Vec<f64> = (0..c).map(|_| rng.gen_range(1.0..2.5)).collect();
    let responses: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            (0..c)
                .map(|i| (gains[i] * mixing[i].iter().zip(m).map(|(a, b)| a * b).sum::<f64>()).tanh())
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std_y).expect("validated noise");
    let speckle = (cfg.speckle_looks > 0.0)
        .then(|| Gamma::new(cfg.speckle_looks, 1.0 / cfg.speckle_looks).expect("positive looks"));
    let mut values = Vec::with_capacity(field.len() * c);
    for &k in field {
        for &r in &responses[k as usize] {
            let mut v = r + noise.sample(rng);
            if let Some(g) = &speckle {
                // speckle acts on a positive intensity
                v = (v + 2.0) * g.sample(rng) - 2.0;
            }
            values.push(v as f32);
        }
    }
    let raw = RasterImage::new(cfg.height, cfg.width, c, values)?;
    Ok(normalize(&raw, &compute_stats(&raw))?)
}

fn attempt(cfg: &SynthConfig, attempt: u64) -> Result<Option<SynthPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(attempt);
    let (h, w) = (cfg.height, cfg.width);
    let field_x = class_field(h, w, cfg.num_classes, cfg.smoothness, &mut rng);
    let target = (cfg.change_fraction * (h * w) as f64).round() as usize;
    let Some(blob) = random_walk_blob(h, w, target, &mut rng) else {
        return Ok(None);
    };
    let realized = blob.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
    if (realized - cfg.change_fraction).abs() > FRACTION_TOLERANCE * cfg.change_fraction {
        return Ok(None);
    }
    let offset = rng.gen_range(1..cfg.num_classes) as u8;
    let k = cfg.num_classes as u8;
    let field_y: Vec<u8> = field_x
        .iter()
        .zip(&blob)
        .map(|(&c, &b)| if b { (c + offset) % k } else { c })
        .collect();
    let gt = BinaryMap::new(h, w, field_x.iter().zip(&field_y).map(|(a, b)| u8::from(a != b)).collect())
        .expect("dimensions match");
    let x = render_x(&field_x, cfg, &mut rng)?;
    let y = render_y(&field_y, cfg, &mut rng)?;
    Ok(Some(SynthPair {
        x,
        y,
        gt,
        field_x,
        field_y,
        attempt,
    }))
}

/// Generates a pair; bitwise reproducible for a given config.
pub fn generate_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    for a in 0..MAX_ATTEMPTS {
        if let Some(pair) = attempt(cfg, a)? {
            return Ok(pair);
        }
    }
    Err(SynthError::BlobFailed {
        target: cfg.change_fraction,
        attempts: MAX_ATTEMPTS,
    })
}

/// Number of 4-connected components of a mask.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> usize {
    let mut seen = HashSet::new();
    let mut count = 0;
    for start in 0..h * w {
        if !mask[start] || !seen.insert(start) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(p - w);
            }
            if r + 1 < h {
                nbrs.push(p + w);
            }
            if c > 0 {
                nbrs.push(p - 1);
            }
            if c + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if mask[q] && seen.insert(q) {
                    stack.push(q);
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            height: 48,
            width: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let d = SynthConfig::default();
        assert_eq!((d.num_classes, d.channels_x, d.channels_y), (5, 3, 5));
        assert_eq!((d.change_fraction, d.noise_std_x, d.noise_std_y), (0.1, 0.05, 0.15));
    }

    #[test]
    fn no_change_means_identical_fields() {
        let cfg = SynthConfig {
            change_fraction: 0.0,
            ..small(3)
        };
        let p = generate_pair(&cfg).unwrap();
        assert_eq!(p.field_x, p.field_y);
        assert!(p.gt.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn deterministic() {
        let a = generate_pair(&small(7)).unwrap();
        let b = generate_pair(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_pair(&small(8)).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn gt_is_the_disagreement_set_and_one_blob() {
        let p = generate_pair(&small(1)).unwrap();
        for ((&a, &b), &g) in p.field_x.iter().zip(&p.field_y).zip(p.gt.values()) {
            assert_eq!(g == 1, a != b);
        }
        let mask: Vec<bool> = p.gt.values().iter().map(|&v| v == 1).collect();
        assert_eq!(connected_components(&mask, 48, 40), 1);
    }

    #[test]
    fn change_fraction_within_tolerance() {
        for seed in 0..20 {
            let p = generate_pair(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
            let f = p.gt.changed_fraction();
            assert!((0.08..=0.12).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn rasters_are_normalized() {
        let cfg = SynthConfig {
            speckle_looks: 4.0,
            ..small(2)
        };
        let p = generate_pair(&cfg).unwrap();
        assert_eq!((p.x.channels(), p.y.channels()), (3, 5));
        for img in [&p.x, &p.y] {
            let (lo, hi) = img.min_max();
            assert!(lo >= -1.0 && hi <= 1.0);
        }
    }

    #[test]
    fn classes_balanced() {
        let p = generate_pair(&small(4)).unwrap();
        for k in 0..5u8 {
            let n = p.field_x.iter().filter(|&&c| c == k).count();
            assert!((n as f64 - 48.0 * 40.0 / 5.0).abs() <= 1.0);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_pair(&SynthConfig { change_fraction: 1.0, ..small(0) }).is_err());
        assert!(generate_pair(&SynthConfig { num_classes: 1, ..small(0) }).is_err());
        assert!(generate_pair(&SynthConfig { channels_y: 0, ..small(0) }).is_err());
    }

    #[test]
    fn component_counter() {
        let m = [true, false, true, true, false, false, false, true, true];
        assert_eq!(connected_components(&m, 3, 3), 3);
    }
}
