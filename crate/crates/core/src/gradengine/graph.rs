//! Tape-based reverse-mode differentiation over the handful of operations
//! the coupled autoencoders need.
//!
//! Parameters live in a [`ParamSet`] outside the tape. A [`Graph`] borrows
//! them immutably while recording the forward pass; [`Graph::backward`] then
//! accumulates parameter gradients into a caller-owned [`Grads`] buffer, so
//! several losses can be routed into different buffers from the same tape.

use rand::Rng;

use super::conv::{conv2d_backward, conv2d_forward};
use super::scalar::{gemm, Mat, Scalar};
use super::tensor::Tensor4;
use super::GradError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
}

/// Ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            buffers: params
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.buffers[id.0]
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            add_into(dst, src);
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(T::zero());
        }
    }

    /// Euclidean norm over the given parameters.
    pub fn norm(&self, ids: impl IntoIterator<Item = ParamId>) -> T {
        ids.into_iter()
            .flat_map(|id| self.buffers[id.0].iter())
            .fold(T::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Conv {
        input: NodeId,
        kernel: ParamId,
        bias: ParamId,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Tanh {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    Crop {
        input: NodeId,
        y0: usize,
        x0: usize,
    },
    SqDistance {
        a: NodeId,
        b: NodeId,
        weights: Option<Vec<T>>,
    },
    CodeCorrelation {
        zx: NodeId,
        zy: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient of a tracked input leaf.
    leaf_grad: Option<Vec<T>>,
}

/// Recorded forward pass.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient accumulated so far into a tracked input.
    pub fn input_grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].leaf_grad.as_deref()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf_grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf tensor; `tracked` leaves receive gradients on backward.
    pub fn input(&mut self, value: Tensor4<T>, tracked: bool) -> NodeId {
        let id = self.push(value, Op::Input, tracked);
        if tracked {
            self.nodes[id.0].leaf_grad = Some(vec![T::zero(); self.nodes[id.0].value.len()]);
        }
        id
    }

    /// Same-padded 3×3 convolution plus bias (no activation).
    pub fn conv2d(&mut self, input: NodeId, kernel: ParamId, bias: ParamId) -> Result<NodeId, GradError> {
        let k = self.params.get(kernel);
        let x = self.value(input);
        if k.shape()[2] != x.channels() {
            return Err(GradError::ChannelMismatch {
                expected: k.shape()[2],
                got: x.channels(),
            });
        }
        let out = conv2d_forward(x, k, self.params.get(bias).data());
        Ok(self.push(out, Op::Conv { input, kernel, bias }, true))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: T) -> NodeId {
        let out = self.value(input).map(|v| if v >= T::zero() { v } else { slope * v });
        let needs = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope }, needs)
    }

    /// Sign of every leaky-ReLU input in recording order (`true` for the
    /// identity branch). Two evaluations with equal patterns lie on the same
    /// linear piece of every activation.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { input, .. } = node.op {
                out.extend(self.nodes[input.0].value.data().iter().map(|&v| v >= T::zero()));
            }
        }
        out
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(T::tanh);
        let needs = self.needs(input);
        self.push(out, Op::Tanh { input }, needs)
    }

    /// Inverted dropout: identity unless `training` and `rate > 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId, GradError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GradError::InvalidDropout(rate));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let x = self.value(input);
        let out = Tensor4::from_vec(
            x.shape(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        let needs = self.needs(input);
        Ok(self.push(out, Op::Dropout { input, mask }, needs))
    }

    pub fn crop(&mut self, input: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> Result<NodeId, GradError> {
        let x = self.value(input);
        if y0 + h > x.height() || x0 + w > x.width() {
            return Err(GradError::ShapeMismatch(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                x.height(),
                x.width()
            )));
        }
        let out = x.crop(y0, x0, h, w);
        let needs = self.needs(input);
        Ok(self.push(out, Op::Crop { input, y0, x0 }, needs))
    }

    /// `(1/n)·Σᵢ wᵢ‖aᵢ − bᵢ‖²` over the `n` pixels of `a` and `b`.
    pub fn sq_distance(&mut self, a: NodeId, b: NodeId, weights: Option<&[T]>) -> Result<NodeId, GradError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(GradError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.pixels();
        if let Some(w) = weights {
            if w.len() != n {
                return Err(GradError::ShapeMismatch(format!(
                    "{} weights for {n} pixels",
                    w.len()
                )));
            }
        }
        let value = weighted_sq_distance(va.data(), vb.data(), va.channels(), weights);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor4::scalar(value),
            Op::SqDistance {
                a,
                b,
                weights: weights.map(<[T]>::to_vec),
            },
            needs,
        ))
    }

    /// `R_ij = (zxᵢ·zyⱼ + c)/(2c)` for the `n` pixels of two `c`-channel
    /// codes, returned as a `(1, n, n, 1)` tensor.
    pub fn code_correlation(&mut self, zx: NodeId, zy: NodeId) -> Result<NodeId, GradError> {
        let (a, b) = (self.value(zx), self.value(zy));
        if a.channels() != b.channels() || a.pixels() != b.pixels() {
            return Err(GradError::ShapeMismatch(format!(
                "codes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = code_correlation_matrix(a.data(), b.data(), a.pixels(), a.channels());
        let needs = self.needs(zx) || self.needs(zy);
        Ok(self.push(out, Op::CodeCorrelation { zx, zy }, needs))
    }

    /// `Σ cₖ·vₖ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId, GradError> {
        let mut total = T::zero();
        for &(id, c) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(GradError::ShapeMismatch("weighted_sum expects scalar nodes".into()));
            }
            total = total + c * v.data()[0];
        }
        let needs = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push(
            Tensor4::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar root seeded with `seed`.
    pub fn backward(&mut self, root: NodeId, seed: T, grads: &mut Grads<T>) -> Result<(), GradError> {
        if root.0 >= self.nodes.len() {
            return Err(GradError::NoForward);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(GradError::ShapeMismatch("backward root must be a scalar".into()));
        }
        self.backward_with(root, vec![seed], grads)
    }

    /// Reverse pass from any node with an explicit output gradient.
    pub fn backward_with(&mut self, root: NodeId, seed: Vec<T>, grads: &mut Grads<T>) -> Result<(), GradError> {
        if root.0 >= self.nodes.len() {
            return Err(GradError::NoForward);
        }
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(GradError::ShapeMismatch("seed gradient shape differs from root".into()));
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        scratch[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Input) {
                if let Some(acc) = self.nodes[i].leaf_grad.as_mut() {
                    add_into(acc, &g);
                }
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { input, kernel, bias } => {
                    let x = &self.nodes[input.0].value;
                    let k = self.params.get(*kernel);
                    let (kernel, bias) = (*kernel, *bias);
                    let gi = if self.nodes[input.0].needs_grad {
                        Some(slot(&mut scratch, *input, x.len()))
                    } else {
                        None
                    };
                    // kernel and bias buffers are distinct parameters
                    let mut gk = std::mem::take(&mut grads.buffers[kernel.0]);
                    conv2d_backward(x, k, &g, gi, &mut gk, &mut grads.buffers[bias.0]);
                    grads.buffers[kernel.0] = gk;
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.nodes[input.0].value.data();
                    let slope = *slope;
                    accumulate(&mut scratch, *input, g.iter().zip(x).map(|(&gv, &xv)| {
                        if xv >= T::zero() {
                            gv
                        } else {
                            slope * gv
                        }
                    }));
                }
                Op::Tanh { input } => {
                    let y = node.value.data();
                    accumulate(&mut scratch, *input, g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)));
                }
                Op::Dropout { input, mask } => {
                    accumulate(&mut scratch, *input, g.iter().zip(mask).map(|(&gv, &m)| gv * m));
                }
                Op::Crop { input, y0, x0 } => {
                    let src_shape = self.nodes[input.0].value.shape();
                    let [b, h, w, c] = node.value.shape();
                    let dst = slot(&mut scratch, *input, src_shape.iter().product());
                    for bi in 0..b {
                        for y in 0..h {
                            let from = ((bi * h + y) * w) * c;
                            let to = ((bi * src_shape[1] + y + y0) * src_shape[2] + x0) * c;
                            add_into(&mut dst[to..to + w * c], &g[from..from + w * c]);
                        }
                    }
                }
                Op::SqDistance { a, b, weights } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let c = va.channels();
                    let n = T::from_usize(va.pixels()).expect("pixel count fits");
                    let scale = g[0] * T::from_f64_lossy(2.0) / n;
                    let diff: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .enumerate()
                        .map(|(k, (&p, &q))| {
                            let w = weights.as_ref().map_or(T::one(), |w| w[k / c]);
                            scale * w * (p - q)
                        })
                        .collect();
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].needs_grad {
                        add_into(slot(&mut scratch, a, diff.len()), &diff);
                    }
                    if self.nodes[b.0].needs_grad {
                        let dst = slot(&mut scratch, b, diff.len());
                        for (d, &v) in dst.iter_mut().zip(&diff) {
                            *d = *d - v;
                        }
                    }
                }
                Op::CodeCorrelation { zx, zy } => {
                    let (a, b) = (&self.nodes[zx.0].value, &self.nodes[zy.0].value);
                    let (n, c) = (a.pixels(), a.channels());
                    let inv = T::one() / T::from_usize(2 * c).expect("channel count fits");
                    let gr: Vec<T> = g.iter().map(|&v| v * inv).collect();
                    let (zx, zy) = (*zx, *zy);
                    if self.nodes[zx.0].needs_grad {
                        let dst = slot(&mut scratch, zx, n * c);
                        gemm(Mat::new(&gr, n, n), Mat::new(b.data(), n, c), T::one(), dst);
                    }
                    if self.nodes[zy.0].needs_grad {
                        let dst = slot(&mut scratch, zy, n * c);
                        gemm(Mat::new(&gr, n, n).t(), Mat::new(a.data(), n, c), T::one(), dst);
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(id, coeff) in terms {
                        if self.nodes[id.0].needs_grad {
                            let dst = slot(&mut scratch, id, 1);
                            dst[0] = dst[0] + coeff * g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Scalar>(scratch: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    scratch[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Adds `values` into the node's gradient, taking them as-is when the node
/// has no gradient yet.
fn accumulate<T: Scalar>(scratch: &mut [Option<Vec<T>>], id: NodeId, values: impl Iterator<Item = T>) {
    match scratch[id.0].as_mut() {
        Some(dst) => {
            for (d, v) in dst.iter_mut().zip(values) {
                *d = *d + v;
            }
        }
        None => scratch[id.0] = Some(values.collect()),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `(1/n)·Σᵢ wᵢ‖aᵢ − bᵢ‖²` over flattened `n×channels` data.
pub fn weighted_sq_distance<T: Scalar>(a: &[T], b: &[T], channels: usize, weights: Option<&[T]>) -> T {
    let n = a.len() / channels;
    let total = a
        .chunks_exact(channels)
        .zip(b.chunks_exact(channels))
        .enumerate()
        .map(|(i, (pa, pb))| {
            let sq = pa
                .iter()
                .zip(pb)
                .map(|(&p, &q)| (p - q) * (p - q))
                .fold(T::zero(), |s, v| s + v);
            weights.map_or(sq, |w| w[i] * sq)
        })
        .fold(T::zero(), |s, v| s + v);
    total / T::from_usize(n).expect("pixel count fits")
}

/// Code correlation matrix of two flattened `n×channels` codes.
pub fn code_correlation_matrix<T: Scalar>(zx: &[T], zy: &[T], n: usize, channels: usize) -> Tensor4<T> {
    let mut r = vec![T::zero(); n * n];
    gemm(
        Mat::new(zx, n, channels),
        Mat::new(zy, n, channels).t(),
        T::zero(),
        &mut r,
    );
    let c = T::from_usize(channels).expect("channel count fits");
    let denom = c + c;
    for v in &mut r {
        *v = (*v + c) / denom;
    }
    Tensor4::from_vec([1, n, n, 1], r)
}
