//! 3×3, stride-1, zero-padded cross-correlation via im2col + GEMM.
//!
//! Kernels are stored as `(3, 3, c_in, c_out)`, which flattened row-major is
//! exactly the `(9·c_in) × c_out` matrix multiplied against the im2col
//! buffer.

use super::scalar::{gemm, Mat, Scalar};
use super::tensor::Tensor4;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Unrolls one batch item into a `(h·w) × (9·c)` patch matrix, replacing
/// the contents of `cols`.
fn im2col<T: Scalar>(input: &Tensor4<T>, b: usize, cols: &mut Vec<T>) {
    let [_, h, w, c] = input.shape();
    let data = input.data();
    cols.clear();
    let zeros = |cols: &mut Vec<T>, taps: usize| cols.extend(std::iter::repeat(T::zero()).take(taps * c));
    for y in 0..h {
        for x in 0..w {
            for ky in 0..KERNEL {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    zeros(cols, KERNEL);
                    continue;
                }
                let row = input.offset(b, sy as usize, 0, 0);
                let lo = x.saturating_sub(1);
                let hi = (x + 2).min(w);
                if x == 0 {
                    zeros(cols, 1);
                }
                cols.extend_from_slice(&data[row + lo * c..row + hi * c]);
                if x + 2 > w {
                    zeros(cols, 1);
                }
            }
        }
    }
}

/// Scatters a patch-matrix gradient back onto one batch item (accumulating).
fn col2im_add<T: Scalar>(cols: &[T], shape: [usize; 4], b: usize, grad: &mut [T]) {
    let [_, h, w, c] = shape;
    let row_len = TAPS * c;
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..KERNEL {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let start = ((b * h + sy as usize) * w + sx as usize) * c;
                    let src = &row[(ky * KERNEL + kx) * c..(ky * KERNEL + kx + 1) * c];
                    for (g, &s) in grad[start..start + c].iter_mut().zip(src) {
                        *g = *g + s;
                    }
                }
            }
        }
    }
}

/// Pre-activation output `conv(input, kernel) + bias`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, kernel: &Tensor4<T>, bias: &[T]) -> Tensor4<T> {
    let [n, h, w, c_in] = input.shape();
    let [kh, kw, k_in, c_out] = kernel.shape();
    assert_eq!((kh, kw), (KERNEL, KERNEL), "kernel must be 3x3");
    assert_eq!(k_in, c_in, "kernel input channels must match the input");
    assert_eq!(bias.len(), c_out, "one bias per output channel");

    let hw = h * w;
    let mut out = Tensor4::from_vec([n, h, w, c_out], bias.iter().copied().cycle().take(n * hw * c_out).collect());
    let mut cols = Vec::with_capacity(hw * TAPS * c_in);
    for b in 0..n {
        let dst = &mut out.data_mut()[b * hw * c_out..(b + 1) * hw * c_out];
        im2col(input, b, &mut cols);
        gemm(
            Mat::new(&cols, hw, TAPS * c_in),
            Mat::new(kernel.data(), TAPS * c_in, c_out),
            T::one(),
            dst,
        );
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients for `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let [n, h, w, c_in] = input.shape();
    let c_out = kernel.shape()[3];
    let hw = h * w;
    let mut cols = Vec::with_capacity(hw * TAPS * c_in);
    let mut grad_input = grad_input;
    let mut grad_cols = if grad_input.is_some() {
        vec![T::zero(); hw * TAPS * c_in]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let g = &grad_out[b * hw * c_out..(b + 1) * hw * c_out];
        for px in g.chunks_exact(c_out) {
            for (gb, &v) in grad_bias.iter_mut().zip(px) {
                *gb = *gb + v;
            }
        }
        im2col(input, b, &mut cols);
        gemm(
            Mat::new(&cols, hw, TAPS * c_in).t(),
            Mat::new(g, hw, c_out),
            T::one(),
            grad_kernel,
        );
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                Mat::new(g, hw, c_out),
                Mat::new(kernel.data(), TAPS * c_in, c_out).t(),
                T::zero(),
                &mut grad_cols,
            );
            col2im_add(&grad_cols, input.shape(), b, gi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn reference(input: &Tensor4<f64>, kernel: &Tensor4<f64>, bias: &[f64]) -> Tensor4<f64> {
        let [n, h, w, ci] = input.shape();
        let co = kernel.shape()[3];
        let mut out = Tensor4::zeros([n, h, w, co]);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for o in 0..co {
                        let mut acc = bias[o];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for i in 0..ci {
                                    acc += input.at(b, sy as usize, sx as usize, i) * kernel.at(ky, kx, i, o);
                                }
                            }
                        }
                        let off = out.offset(b, y, x, o);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_on_ones() {
        let input = Tensor4::<f64>::filled([1, 3, 3, 1], 1.0);
        let kernel = Tensor4::filled([3, 3, 1, 1], 1.0);
        let out = conv2d_forward(&input, &kernel, &[0.0]);
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_input_zero_bias() {
        let input = Tensor4::<f32>::zeros([2, 4, 5, 3]);
        let kernel = Tensor4::filled([3, 3, 3, 2], 0.7);
        let out = conv2d_forward(&input, &kernel, &[0.0, 0.0]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), [2, 4, 5, 2]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor4::<f64>::from_vec([1, 4, 6, 2], (0..48).map(|_| rng.gen()).collect());
        let mut kernel = Tensor4::zeros([3, 3, 2, 2]);
        for c in 0..2 {
            let off = kernel.offset(1, 1, c, c);
            kernel.data_mut()[off] = 1.0;
        }
        let out = conv2d_forward(&input, &kernel, &[0.0, 0.0]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn matches_reference_and_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(n, h, w, ci, co) in &[(1, 1, 1, 1, 1), (2, 5, 3, 3, 4), (1, 7, 7, 5, 2), (3, 2, 9, 1, 3)] {
            let input = Tensor4::from_vec([n, h, w, ci], (0..n * h * w * ci).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let kernel = Tensor4::from_vec([3, 3, ci, co], (0..9 * ci * co).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = conv2d_forward(&input, &kernel, &bias);
            let want = reference(&input, &kernel, &bias);
            assert_eq!(out.shape(), [n, h, w, co]);
            for (a, b) in out.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
