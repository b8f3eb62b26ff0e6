//! Multiband raster storage, validation and input scaling.
//!
//! Rasters are stored as row-major `H×W×C` 32-bit floats. The on-disk format
//! is a short ASCII magic line, a single-line JSON header and a little-endian
//! payload:
//!
//! ```text
//! MMCD1\n
//! {"height":H,"width":W,"channels":C,"dtype":"f32","layout":"hwc-row-major"}\n
//! <H·W·C little-endian f32>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8] = b"MMCD1\n";
const DTYPE: &str = "f32";
const LAYOUT: &str = "hwc-row-major";

/// Default offset used by [`log_transform`] to keep zero intensities finite.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid raster dimensions {height}x{width}x{channels}")]
    InvalidShape {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("value count {got} does not match {height}x{width}x{channels} = {expected}")]
    LengthMismatch {
        height: usize,
        width: usize,
        channels: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("malformed raster header: {0}")]
    MalformedHeader(String),
    #[error("negative value {value} at index {index} is outside the log-transform domain")]
    NegativeInput { index: usize, value: f32 },
    #[error("statistics describe {stats} channels but the image has {image}")]
    ChannelMismatch { stats: usize, image: usize },
    #[error("{0} band names given for {1} channels")]
    BandNames(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding failed: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
    layout: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    band_names: Vec<String>,
}

/// A co-registered multiband image.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    band_names: Vec<String>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::InvalidShape {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                channels,
                expected,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(RasterError::NonFinite { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            band_names: Vec::new(),
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Single-channel raster from a row-major plane.
    pub fn from_plane(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(height, width, 1, values)
    }

    pub fn with_band_names(mut self, names: Vec<String>) -> Result<Self> {
        if !names.is_empty() && names.len() != self.channels {
            return Err(RasterError::BandNames(names.len(), self.channels));
        }
        self.band_names = names;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[self.index(row, col, channel)]
    }

    /// Feature vector of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = self.index(row, col, 0);
        &self.values[start..start + self.channels]
    }

    /// Copy of one channel as a row-major plane.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        self.values
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn same_spatial_dims(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        let mut out = Self::new(self.height, self.width, self.channels, values)?;
        out.band_names = self.band_names.clone();
        Ok(out)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

pub fn save_raster(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        height: img.height,
        width: img.width,
        channels: img.channels,
        dtype: DTYPE.to_string(),
        layout: LAYOUT.to_string(),
        band_names: img.band_names.clone(),
    };
    let header = serde_json::to_string(&header)
        .map_err(|e| RasterError::MalformedHeader(e.to_string()))?;
    let mut buf = Vec::with_capacity(MAGIC.len() + header.len() + 1 + img.values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(header.as_bytes());
    buf.push(b'\n');
    for v in &img.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| RasterError::MalformedHeader("missing magic".into()))?;
    if magic != MAGIC {
        return Err(RasterError::MalformedHeader("bad magic".into()));
    }
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(io_err(path))?;
    if line.pop() != Some(b'\n') {
        return Err(RasterError::MalformedHeader("unterminated header line".into()));
    }
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| RasterError::MalformedHeader(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(RasterError::MalformedHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.layout != LAYOUT {
        return Err(RasterError::MalformedHeader(format!(
            "unsupported layout {:?}",
            header.layout
        )));
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err(path))?;
    let expected = header.height * header.width * header.channels;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(RasterError::LengthMismatch {
            height: header.height,
            width: header.width,
            channels: header.channels,
            expected,
            got: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    RasterImage::new(header.height, header.width, header.channels, values)?
        .with_band_names(header.band_names)
}

/// `v ↦ ln(v + epsilon)`, used to bring SAR intensities closer to Gaussian.
pub fn log_transform(img: &RasterImage, epsilon: f64) -> Result<RasterImage> {
    if let Some((index, &value)) = img.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(RasterError::NegativeInput { index, value });
    }
    img.map(|v| (v as f64 + epsilon).ln() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
    pub p1: f64,
    pub p99: f64,
}

/// Per-channel statistics of a raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub channels: Vec<ChannelStats>,
}

/// Nearest-rank percentile on sorted data: zero-based index `ceil(p·N/100)`,
/// clamped to the last element.
pub fn nearest_rank(sorted: &[f64], percent: f64) -> f64 {
    let n = sorted.len();
    let idx = ((percent / 100.0) * n as f64).ceil() as usize;
    sorted[idx.min(n - 1)]
}

pub fn compute_stats(img: &RasterImage) -> BandStats {
    let channels = (0..img.channels)
        .map(|c| {
            let mut band: Vec<f64> = img.channel(c).into_iter().map(f64::from).collect();
            let n = band.len() as f64;
            let mean = band.iter().sum::<f64>() / n;
            let var = band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            band.sort_by(f64::total_cmp);
            ChannelStats {
                min: band[0],
                max: band[band.len() - 1],
                // keep mean inside [min, max] despite rounding
                mean: mean.clamp(band[0], band[band.len() - 1]),
                stddev: var.sqrt(),
                p1: nearest_rank(&band, 1.0),
                p99: nearest_rank(&band, 99.0),
            }
        })
        .collect();
    BandStats { channels }
}

/// Percentile affine scaling into `[-1, 1]` with clamping.
///
/// A channel with `p99 == p1` maps to all zeros.
pub fn normalize(img: &RasterImage, stats: &BandStats) -> Result<RasterImage> {
    if stats.channels.len() != img.channels {
        return Err(RasterError::ChannelMismatch {
            stats: stats.channels.len(),
            image: img.channels,
        });
    }
    let c = img.channels;
    let values = img
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = &stats.channels[i % c];
            let span = s.p99 - s.p1;
            if span <= 0.0 {
                0.0
            } else {
                (2.0 * (v as f64 - s.p1) / span - 1.0).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    let mut out = RasterImage::new(img.height, img.width, c, values)?;
    out.band_names = img.band_names.clone();
    Ok(out)
}

/// Writes an 8-bit preview: grayscale for one band, otherwise an RGB composite
/// of `bands` (default: the first three, repeating the last when fewer).
/// Each preview is min-max stretched for display only.
pub fn save_png(img: &RasterImage, path: impl AsRef<Path>, bands: Option<[usize; 3]>) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) = img.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_u8 = |v: f32| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    if img.channels == 1 && bands.is_none() {
        let buf: Vec<u8> = img.values.iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(w, h, buf)
            .expect("buffer sized from raster")
            .save(path)
            .map_err(|e| RasterError::Png(e.to_string()))
    } else {
        let last = img.channels - 1;
        let bands = bands.unwrap_or([0, 1.min(last), 2.min(last)]);
        if let Some(&b) = bands.iter().find(|&&b| b > last) {
            return Err(RasterError::ShapeMismatch(format!(
                "band {b} requested from a {}-channel raster",
                img.channels
            )));
        }
        let mut buf = Vec::with_capacity(img.pixel_count() * 3);
        for p in 0..img.pixel_count() {
            for &b in &bands {
                buf.push(to_u8(img.values[p * img.channels + b]));
            }
        }
        save_rgb_png(img.width, img.height, buf, path)
    }
}

pub(crate) fn save_rgb_png(width: usize, height: usize, buf: Vec<u8>, path: &Path) -> Result<()> {
    image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized from raster")
        .save(path)
        .map_err(|e| RasterError::Png(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_small() {
        let dir = tmp();
        let p = dir.path().join("a.mmcd");
        let img = RasterImage::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        save_raster(&img, &p).unwrap();
        assert_eq!(load_raster(&p).unwrap(), img);
    }

    #[test]
    fn payload_sizes() {
        let dir = tmp();
        let p = dir.path().join("a.mmcd");
        let header_len = |img: &RasterImage| {
            let h = format!(
                "{{\"height\":{},\"width\":{},\"channels\":{},\"dtype\":\"f32\",\"layout\":\"hwc-row-major\"}}\n",
                img.height, img.width, img.channels
            );
            MAGIC.len() + h.len()
        };
        let one = RasterImage::zeros(1, 1, 1).unwrap();
        save_raster(&one, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, header_len(&one) + 4);

        let six = RasterImage::zeros(2, 3, 2).unwrap();
        save_raster(&six, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, header_len(&six) + 48);
    }

    #[test]
    fn header_is_exact() {
        let dir = tmp();
        let p = dir.path().join("a.mmcd");
        save_raster(&RasterImage::zeros(4, 5, 3).unwrap(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let expected = b"MMCD1\n{\"height\":4,\"width\":5,\"channels\":3,\"dtype\":\"f32\",\"layout\":\"hwc-row-major\"}\n";
        assert_eq!(&bytes[..expected.len()], expected);
    }

    #[test]
    fn random_round_trip_seed_7() {
        let dir = tmp();
        let p = dir.path().join("r.mmcd");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values = (0..5 * 7 * 3).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
        let img = RasterImage::new(5, 7, 3, values).unwrap();
        save_raster(&img, &p).unwrap();
        let back = load_raster(&p).unwrap();
        let bits = |i: &RasterImage| i.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
    }

    fn write_raw(path: &Path, h: usize, w: usize, c: usize, vals: &[f32]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(MAGIC).unwrap();
        writeln!(
            f,
            "{{\"height\":{h},\"width\":{w},\"channels\":{c},\"dtype\":\"f32\",\"layout\":\"hwc-row-major\"}}"
        )
        .unwrap();
        for v in vals {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let dir = tmp();
        let p = dir.path().join("bad.mmcd");
        write_raw(&p, 4, 4, 3, &vec![0.0; 47]);
        match load_raster(&p) {
            Err(RasterError::LengthMismatch { expected, got, .. }) => {
                assert_eq!((expected, got), (48, 47))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_reports_position() {
        let dir = tmp();
        let p = dir.path().join("nan.mmcd");
        let mut vals = vec![0.0f32; 8];
        vals[5] = f32::NAN;
        write_raw(&p, 2, 2, 2, &vals);
        match load_raster(&p) {
            Err(RasterError::NonFinite { index, .. }) => assert_eq!(index, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tmp();
        let p = dir.path().join("h.mmcd");
        fs::write(&p, b"MMCD1\n{\"height\":2}\n").unwrap();
        assert!(matches!(load_raster(&p), Err(RasterError::MalformedHeader(_))));
        fs::write(&p, b"NOPE!\n").unwrap();
        assert!(matches!(load_raster(&p), Err(RasterError::MalformedHeader(_))));
    }

    #[test]
    fn log_transform_values() {
        let eps = DEFAULT_LOG_EPSILON;
        let e = std::f64::consts::E;
        let img = RasterImage::new(1, 2, 1, vec![(e - eps) as f32, (1.0 - eps) as f32]).unwrap();
        let out = log_transform(&img, eps).unwrap();
        assert!((out.values()[0] - 1.0).abs() < 1e-6);
        assert!(out.values()[1].abs() < 1e-6);

        let neg = RasterImage::new(1, 1, 1, vec![-0.5]).unwrap();
        assert!(matches!(
            log_transform(&neg, eps),
            Err(RasterError::NegativeInput { index: 0, .. })
        ));
    }

    #[test]
    fn stats_examples() {
        let c = compute_stats(&RasterImage::new(1, 3, 1, vec![5.0; 3]).unwrap()).channels[0];
        assert_eq!((c.min, c.max, c.mean, c.p1, c.p99, c.stddev), (5.0, 5.0, 5.0, 5.0, 5.0, 0.0));

        let c = compute_stats(&RasterImage::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap()).channels[0];
        assert_eq!(c.mean, 1.5);

        // sort-and-index oracle: the value at zero-based rank ceil(p·N/100)
        let vals: Vec<f32> = (0..100).rev().map(|v| v as f32).collect();
        let c = compute_stats(&RasterImage::new(10, 10, 1, vals).unwrap()).channels[0];
        assert_eq!((c.p1, c.p99), (1.0, 99.0));
    }

    #[test]
    fn normalize_examples() {
        let img = RasterImage::new(1, 3, 1, vec![2.0, 6.0, 10.0]).unwrap();
        let stats = BandStats {
            channels: vec![ChannelStats {
                min: 2.0,
                max: 10.0,
                mean: 6.0,
                stddev: 1.0,
                p1: 2.0,
                p99: 10.0,
            }],
        };
        assert_eq!(normalize(&img, &stats).unwrap().values(), &[-1.0, 0.0, 1.0]);

        let constant = RasterImage::new(1, 3, 1, vec![4.0; 3]).unwrap();
        let s = compute_stats(&constant);
        assert_eq!(normalize(&constant, &s).unwrap().values(), &[0.0; 3]);

        let two = RasterImage::zeros(1, 1, 2).unwrap();
        assert!(matches!(
            normalize(&two, &stats),
            Err(RasterError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn channel_extraction() {
        let img = RasterImage::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.channel(1), vec![2.0, 5.0]);
        assert_eq!(img.pixel(0, 1), &[4.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn save_load_is_bit_exact(
            (h, w, c, vals) in (1usize..6, 1usize..6, 1usize..4)
                .prop_flat_map(|(h, w, c)| (Just(h), Just(w), Just(c),
                    proptest::collection::vec(-1e30f32..1e30, h * w * c)))
        ) {
            let dir = tmp();
            let p = dir.path().join("p.mmcd");
            let img = RasterImage::new(h, w, c, vals).unwrap();
            save_raster(&img, &p).unwrap();
            prop_assert_eq!(load_raster(&p).unwrap(), img);
        }

        #[test]
        fn normalize_bounded_and_monotone(mut vals in proptest::collection::vec(-1e4f32..1e4, 2..60)) {
            let n = vals.len();
            let img = RasterImage::new(1, n, 1, vals.clone()).unwrap();
            let out = normalize(&img, &compute_stats(&img)).unwrap();
            let mut pairs: Vec<(f32, f32)> = vals.drain(..).zip(out.values().iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert!(out.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn log_transform_strictly_monotone(a in 0.0f32..1e3, b in 0.0f32..1e3) {
            prop_assume!(a < b);
            let img = RasterImage::new(1, 2, 1, vec![a, b]).unwrap();
            let out = log_transform(&img, DEFAULT_LOG_EPSILON).unwrap();
            prop_assert!(out.values()[0] <= out.values()[1]);
        }
    }
}
