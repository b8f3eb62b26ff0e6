//! Independent reference implementations used by the test suites.
//!
//! Everything here is written as plain loops over the definitions and
//! deliberately shares no code path with the production implementations it
//! checks (no GEMM, no cumulative histograms, no selection algorithms).

/// Central finite differences of `f` with respect to every entry of `theta`.
pub fn central_differences(theta: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + step;
            let up = f(theta);
            theta[i] = orig - step;
            let down = f(theta);
            theta[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with an absolute floor so that vanishing gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crosses a leaky-ReLU kink.
    pub skipped_nonsmooth: usize,
}

/// Compares `analytic` against central differences. `f` returns the
/// objective together with the activation pattern of the evaluation; a
/// coordinate whose `±step` evaluations change the pattern straddles a
/// non-differentiable point and is skipped.
pub fn check_gradient(
    theta: &mut [f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> GradCheck {
    assert_eq!(theta.len(), analytic.len());
    let (_, base) = f(theta);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let (up, p_up) = f(theta);
        theta[i] = orig - step;
        let (down, p_down) = f(theta);
        theta[i] = orig;
        if p_up != base || p_down != base {
            out.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        out.checked += 1;
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i], numeric, floor));
    }
    out
}

/// k-th nearest neighbour distance averaged over points, by sorting every
/// row of brute-force distances (self excluded).
pub fn knn_kernel_width(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut ds: Vec<f64> = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for c in 0..points[i].len() {
                let d = points[i][c] - points[j][c];
                s += d * d;
            }
            ds.push(s.sqrt());
        }
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total += ds[k - 1];
    }
    total / n as f64
}

/// `(1/n)·Σᵢ πᵢ·Σ_c (aᵢc − bᵢc)²` written as nested loops over pixels `[i][c]`.
pub fn patch_distance(a: &[Vec<f64>], b: &[Vec<f64>], pi: Option<&[f64]>) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for c in 0..a[i].len() {
            sq += (a[i][c] - b[i][c]) * (a[i][c] - b[i][c]);
        }
        total += pi.map_or(1.0, |p| p[i]) * sq;
    }
    total / n as f64
}

/// Code correlation loss by explicit double loop over pixel pairs.
pub fn code_loss(zx: &[Vec<f64>], zy: &[Vec<f64>], s: &[f64]) -> f64 {
    let n = zx.len();
    let c = zx[0].len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..zx[i].len() {
                dot += zx[i][k] * zy[j][k];
            }
            let r = (dot + c) / (2.0 * c);
            total += (r - s[i * n + j]).powi(2);
        }
    }
    total / (n * n) as f64
}

/// Bins a `[0, 1]` value exactly like the thresholding code documents:
/// `floor(v·bins)`, clamped to the last bin.
pub fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

/// Exhaustive Otsu search. For every candidate edge `k/bins` the two classes
/// are rebuilt from the raw values; class means use bin centres, so the
/// between-class score is `(N₁·S₀ − N₀·S₁)² / (N₀·N₁)` with `S` summed over
/// `2·bin + 1`. Ties resolve to the lowest edge. `None` when no edge splits
/// the data.
pub fn otsu_brute_force(values: &[f64], bins: usize) -> Option<f64> {
    let mut best: Option<(f64, usize)> = None;
    for k in 1..bins {
        let (mut n0, mut n1, mut s0, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for &v in values {
            let b = bin_of(v, bins) as i128;
            if (b as usize) < k {
                n0 += 1;
                s0 += 2 * b + 1;
            } else {
                n1 += 1;
                s1 += 2 * b + 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let num = (n1 * s0 - n0 * s1) as f64;
        let score = num * num / ((n0 as f64) * (n1 as f64));
        match best {
            Some((s, _)) if score <= s => {}
            _ => best = Some((score, k)),
        }
    }
    best.map(|(_, k)| k as f64 / bins as f64)
}

/// Confusion counts by direct comparison: `(tp, tn, fp, fn)`.
pub fn confusion(map: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&m, &g) in map.iter().zip(gt) {
        match (m, g) {
            (1, 1) => c.0 += 1,
            (0, 0) => c.1 += 1,
            (1, 0) => c.2 += 1,
            _ => c.3 += 1,
        }
    }
    c
}

/// Finite-difference harnesses for the gradient engine and the full model.
pub mod gradients {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_gradient, GradCheck};
    use crate::gradengine::{Graph, Grads, NodeId, ParamId, ParamSet, Tensor4};
    use crate::model::{record_losses, CoupledModel, CropWindow, LossWeights, ModelConfig};

    pub const STEP: f64 = 1e-4;
    pub const FLOOR: f64 = 1e-4;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn rand_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
        [rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=3)]
    }

    type Build = dyn for<'g> Fn(&mut Graph<'g, f64>, &[NodeId], &[ParamId], &mut ChaCha8Rng) -> NodeId;

    /// Checks one recorded operation: the scalar objective is `Σ r ⊙ out`
    /// for a fixed random `r`, differentiated w.r.t. every input and
    /// parameter entry.
    fn check_op(inputs: Vec<Tensor4<f64>>, params: ParamSet<f64>, build: &Build, seed: u64) -> GradCheck {
        let pids: Vec<ParamId> = params.ids().collect();
        let weights_for = |out: &Tensor4<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            (0..out.len()).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
        };

        let mut g = Graph::new(&params);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &ids, &pids, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = weights_for(g.value(out));
        let mut grads = Grads::zeros_like(&params);
        g.backward_with(out, r.clone(), &mut grads).unwrap();

        let mut analytic = Vec::new();
        let mut theta = Vec::new();
        for (id, t) in ids.iter().zip(&inputs) {
            analytic.extend_from_slice(g.input_grad(*id).unwrap());
            theta.extend_from_slice(t.data());
        }
        for &p in &pids {
            analytic.extend_from_slice(grads.get(p));
            theta.extend_from_slice(params.get(p).data());
        }

        let f = |theta: &[f64]| {
            let mut off = 0;
            let ins: Vec<Tensor4<f64>> = inputs
                .iter()
                .map(|t| {
                    let v = Tensor4::from_vec(t.shape(), theta[off..off + t.len()].to_vec());
                    off += t.len();
                    v
                })
                .collect();
            let mut ps = params.clone();
            for &p in &pids {
                let n = ps.get(p).len();
                ps.get_mut(p).data_mut().copy_from_slice(&theta[off..off + n]);
                off += n;
            }
            let mut g = Graph::new(&ps);
            let ids: Vec<NodeId> = ins.into_iter().map(|t| g.input(t, false)).collect();
            let out = build(&mut g, &ids, &pids, &mut ChaCha8Rng::seed_from_u64(seed));
            let value = g.value(out).data().iter().zip(&r).map(|(a, b)| a * b).sum();
            (value, g.activation_pattern())
        };
        check_gradient(&mut theta, &analytic, STEP, FLOOR, f)
    }

    /// Finite-difference checks of every differentiable operation on random
    /// tensors no larger than `4×5×5×3`.
    pub fn op_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut results = Vec::new();

        // conv2d: input, kernel and bias
        let shape = rand_shape(&mut rng);
        let c_out = rng.gen_range(1..=3);
        let mut params = ParamSet::new();
        params.add("k", rand_tensor([3, 3, shape[3], c_out], &mut rng));
        params.add("b", rand_tensor([1, 1, 1, c_out], &mut rng));
        let conv: &Build = &|g, ids, p, _| g.conv2d(ids[0], p[0], p[1]).unwrap();
        results.push(("conv2d", check_op(vec![rand_tensor(shape, &mut rng)], params, conv, seed)));

        let empty = ParamSet::new;
        let shape = rand_shape(&mut rng);
        let lrelu: &Build = &|g, ids, _, _| g.leaky_relu(ids[0], 0.3);
        results.push(("leaky_relu", check_op(vec![rand_tensor(shape, &mut rng)], empty(), lrelu, seed)));

        let shape = rand_shape(&mut rng);
        let tanh: &Build = &|g, ids, _, _| g.tanh(ids[0]);
        results.push(("tanh", check_op(vec![rand_tensor(shape, &mut rng)], empty(), tanh, seed)));

        let shape = rand_shape(&mut rng);
        let drop: &Build = &|g, ids, _, rng| g.dropout(ids[0], 0.2, true, rng).unwrap();
        results.push(("dropout", check_op(vec![rand_tensor(shape, &mut rng)], empty(), drop, seed)));

        let shape = [rng.gen_range(1..=4), 5, 5, rng.gen_range(1..=3)];
        let crop: &Build = &|g, ids, _, _| g.crop(ids[0], 1, 2, 3, 2).unwrap();
        results.push(("crop", check_op(vec![rand_tensor(shape, &mut rng)], empty(), crop, seed)));

        let shape = rand_shape(&mut rng);
        let pixels = shape[0] * shape[1] * shape[2];
        let weights: Vec<f64> = (0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sq: &Build = &move |g, ids, _, _| g.sq_distance(ids[0], ids[1], Some(&weights)).unwrap();
        let (a, b) = (rand_tensor(shape, &mut rng), rand_tensor(shape, &mut rng));
        results.push(("sq_distance", check_op(vec![a, b], empty(), sq, seed)));

        let c = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let corr: &Build = &|g, ids, _, _| g.code_correlation(ids[0], ids[1]).unwrap();
        let (a, b) = (rand_tensor([1, h, w, c], &mut rng), rand_tensor([1, h, w, c], &mut rng));
        results.push(("code_correlation", check_op(vec![a, b], empty(), corr, seed)));

        let coeffs = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
        let sum: &Build = &move |g, ids, _, _| g.weighted_sum(&[(ids[0], coeffs[0]), (ids[1], coeffs[1])]).unwrap();
        let (a, b) = (rand_tensor([1, 1, 1, 1], &mut rng), rand_tensor([1, 1, 1, 1], &mut rng));
        results.push(("weighted_sum", check_op(vec![a, b], empty(), sum, seed)));

        results
    }

    /// Finite-difference check of the complete coupled model: the objective
    /// is the weighted total of all four loss terms on a small random patch
    /// pair (dropout off), differentiated w.r.t. every parameter. The
    /// analytic gradient is assembled from the two routed backward passes
    /// (main terms and code term), exactly as training does.
    pub fn model_check(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(2, 3);
        cfg.hidden = 4;
        let model = CoupledModel::<f64>::new(cfg, &mut rng).unwrap();
        let (h, w) = (5, 5);
        let x = rand_tensor([1, h, w, 2], &mut rng);
        let y = rand_tensor([1, h, w, 3], &mut rng);
        let pi: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let crop = CropWindow::centered(5, 3);
        let s: Vec<f64> = (0..81).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weights = LossWeights {
            lambda_r: rng.gen_range(0.5..1.5),
            lambda_c: rng.gen_range(0.5..1.5),
            lambda_t: rng.gen_range(0.5..1.5),
            lambda_z: rng.gen_range(0.5..1.5),
        };

        let mut g = Graph::new(&model.params);
        let nodes = record_losses(&model, &mut g, x.clone(), y.clone(), &pi, crop, &s, &weights, false, &mut rng).unwrap();
        let mut grads = Grads::zeros_like(&model.params);
        g.backward(nodes.main, 1.0, &mut grads).unwrap();
        g.backward(nodes.l_z, weights.lambda_z, &mut grads).unwrap();

        let ids: Vec<ParamId> = model.params.ids().collect();
        let mut analytic = Vec::new();
        let mut theta = Vec::new();
        for &p in &ids {
            analytic.extend_from_slice(grads.get(p));
            theta.extend_from_slice(model.params.get(p).data());
        }
        let f = |theta: &[f64]| {
            let mut m = model.clone();
            let mut off = 0;
            for &p in &ids {
                let n = m.params.get(p).len();
                m.params.get_mut(p).data_mut().copy_from_slice(&theta[off..off + n]);
                off += n;
            }
            let mut g = Graph::new(&m.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let nodes = record_losses(&m, &mut g, x.clone(), y.clone(), &pi, crop, &s, &weights, false, &mut rng).unwrap();
            let value = g.scalar(nodes.main) + weights.lambda_z * g.scalar(nodes.l_z);
            (value, g.activation_pattern())
        };
        check_gradient(&mut theta, &analytic, STEP, FLOOR, f)
    }
}
