//! Self-tuned Gaussian affinities and the crossmodal distance built on them.
//!
//! For one patch and one modality, pairwise Euclidean distances `d_ij` become
//! affinities `A_ij = exp(-d_ij² / σ²)`, where σ is the mean distance to the
//! k-th nearest neighbour (k = ⌈¾·n⌉ by default). Rows of the two affinity
//! matrices live in the same `n`-dimensional space regardless of the sensor,
//! so `D_ij = ‖A^X_i − A^Y_j‖ / √n` compares pixels across modalities.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AffinityError {
    #[error("need at least two pixels, got {0}")]
    TooFewPixels(usize),
    #[error("patch of {len} values is not a whole number of {channels}-channel pixels")]
    RaggedPatch { len: usize, channels: usize },
    #[error("neighbour rank {k} outside [1, {max}]")]
    RankOutOfRange { k: usize, max: usize },
    #[error("all points coincide; kernel width would be zero")]
    Degenerate,
    #[error("kernel width must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, AffinityError>;

/// Dense row-major `n×n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "matrix data must be n*n");
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub entries: SquareMatrix,
    pub sigma: f64,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.entries.n()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossmodalSimilarity {
    pub distances: SquareMatrix,
    pub similarities: SquareMatrix,
    pub stretch_min: f64,
    pub stretch_max: f64,
}

impl CrossmodalSimilarity {
    pub fn n(&self) -> usize {
        self.distances.n()
    }
}

/// Euclidean distances between the rows of a flattened `n×channels` patch.
pub fn pairwise_distances(patch: &[f64], channels: usize) -> Result<SquareMatrix> {
    if channels == 0 || patch.len() % channels != 0 {
        return Err(AffinityError::RaggedPatch {
            len: patch.len(),
            channels,
        });
    }
    let n = patch.len() / channels;
    if n < 2 {
        return Err(AffinityError::TooFewPixels(n));
    }
    let px = |i: usize| &patch[i * channels..(i + 1) * channels];
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = px(i)
                .iter()
                .zip(px(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(SquareMatrix { n, data })
}

/// Default neighbour rank `⌈¾·n⌉`, kept inside `[1, n−1]`.
pub fn default_rank(n: usize) -> usize {
    ((3 * n).div_ceil(4)).clamp(1, n.saturating_sub(1).max(1))
}

/// Mean over all points of the distance to their k-th nearest neighbour
/// (the point itself excluded).
pub fn kernel_width(dists: &SquareMatrix, k: usize) -> Result<f64> {
    let n = dists.n();
    if n < 2 {
        return Err(AffinityError::TooFewPixels(n));
    }
    if k == 0 || k > n - 1 {
        return Err(AffinityError::RankOutOfRange { k, max: n - 1 });
    }
    let mut others = Vec::with_capacity(n - 1);
    let mut total = 0.0;
    for i in 0..n {
        others.clear();
        others.extend(
            dists
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &d)| d),
        );
        let (_, kth, _) = others.select_nth_unstable_by(k - 1, f64::total_cmp);
        total += *kth;
    }
    let sigma = total / n as f64;
    if sigma <= 0.0 {
        return Err(AffinityError::Degenerate);
    }
    Ok(sigma)
}

pub fn affinity_matrix(dists: &SquareMatrix, sigma: f64) -> Result<AffinityMatrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AffinityError::NonPositiveSigma(sigma));
    }
    let inv = 1.0 / (sigma * sigma);
    let n = dists.n();
    let entries = SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            1.0
        } else {
            let d = dists.get(i, j);
            (-d * d * inv).exp()
        }
    });
    Ok(AffinityMatrix { entries, sigma })
}

/// Distances, self-tuned σ and affinities for one patch in one step.
pub fn patch_affinity(patch: &[f64], channels: usize) -> Result<AffinityMatrix> {
    let d = pairwise_distances(patch, channels)?;
    let sigma = kernel_width(&d, default_rank(d.n()))?;
    affinity_matrix(&d, sigma)
}

/// `D_ij = ‖row_i(A^X) − row_j(A^Y)‖₂ / √n`.
pub fn crossmodal_distance(ax: &AffinityMatrix, ay: &AffinityMatrix) -> Result<SquareMatrix> {
    let n = ax.n();
    if ay.n() != n {
        return Err(AffinityError::SizeMismatch(n, ay.n()));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(SquareMatrix::from_fn(n, |i, j| {
        sq_euclidean(ax.entries.row(i), ay.entries.row(j)).sqrt() * scale
    }))
}

/// Squared distance with four independent partial sums.
fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| (p - q) * (p - q)).sum();
    for (pa, pb) in ca.zip(cb) {
        for k in 0..4 {
            let d = pa[k] - pb[k];
            acc[k] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `S = 1 − D`, with optional contrast stretching of `D` to `[0, 1]`.
pub fn similarity_target(d: SquareMatrix, stretch: bool) -> CrossmodalSimilarity {
    similarity_targets(vec![d], stretch)
        .pop()
        .expect("one input gives one output")
}

/// Batch version of [`similarity_target`]: the stretch uses the extremes over
/// every matrix in the batch. A batch whose distances are all equal stretches
/// to zero distance everywhere (similarity one).
pub fn similarity_targets(ds: Vec<SquareMatrix>, stretch: bool) -> Vec<CrossmodalSimilarity> {
    let (lo, hi) = ds
        .iter()
        .map(SquareMatrix::min_max)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)));
    ds.into_iter()
        .map(|d| {
            let n = d.n();
            let stretched: Vec<f64> = if !stretch {
                d.as_slice().to_vec()
            } else if hi > lo {
                d.as_slice().iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.0; n * n]
            };
            let similarities = SquareMatrix {
                n,
                data: stretched.iter().map(|v| 1.0 - v).collect(),
            };
            CrossmodalSimilarity {
                distances: d,
                similarities,
                stretch_min: lo,
                stretch_max: hi,
            }
        })
        .collect()
}
