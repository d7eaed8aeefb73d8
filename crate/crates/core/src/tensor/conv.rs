//! im2col-based 2-D convolution kernels (forward and backward).
//!
//! Layout is channels-first: activations are `(C, H, W)`, weights are
//! `(C_out, C_in, KH, KW)`. Padding is zero-fill, output size follows the
//! usual `(H + 2*pad - KH) / stride + 1` rule with floor division.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(C, H, W)` into a `(C*KH*KW, HO*WO)` patch matrix.
///
/// Row index is `c*KH*KW + ki*KW + kj`, column index is `oy*WO + ox`.
pub fn im2col(x: &ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input, accumulating overlaps.
/// Exact adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the output map together with the patch
/// matrix, which the backward pass reuses for the weight gradient.
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    weight: &ArrayView4<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (c_out, c_in, kh, kw) = weight.dim();
    let (cx, h, w) = x.dim();
    debug_assert_eq!(cx, c_in);
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("contiguous weight")
        .to_owned();
    let mut out_mat = w_mat.dot(&cols);
    for (mut row, b) in out_mat.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    let out = out_mat
        .into_shape_with_order((c_out, ho, wo))
        .expect("conv output reshape");
    (out, cols)
}

/// Gradients of a convolution w.r.t. input, weight and bias.
pub fn conv2d_backward(
    grad_out: &ArrayView3<f64>,
    cols: &Array2<f64>,
    weight: &ArrayView4<f64>,
    input_dim: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c_out, c_in, kh, kw) = weight.dim();
    let (ci, h, w) = input_dim;
    let (_, ho, wo) = grad_out.dim();
    let g_mat = grad_out
        .to_shape((c_out, ho * wo))
        .expect("contiguous grad")
        .to_owned();
    let d_weight_mat = g_mat.dot(&cols.t());
    let d_weight = d_weight_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("weight grad reshape");
    let d_bias = g_mat.sum_axis(ndarray::Axis(1));
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("contiguous weight")
        .to_owned();
    let d_cols = w_mat.t().dot(&g_mat);
    let d_input = col2im(&d_cols, ci, h, w, kh, kw, stride, pad);
    (d_input, d_weight, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn identity_kernel_preserves_input() {
        // 1x1 kernel with weight 1 is the identity map.
        let x = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let mut w = Array4::<f64>::zeros((2, 2, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        w[[1, 1, 0, 0]] = 1.0;
        let (out, _) = conv2d_forward(&x.view(), &w.view(), &[0.0, 0.0], 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn stride_two_output_size() {
        let x = Array3::<f64>::zeros((3, 64, 128));
        let w = Array4::<f64>::zeros((8, 3, 3, 3));
        let (out, _) = conv2d_forward(&x.view(), &w.view(), &[0.0; 8], 2, 1);
        assert_eq!(out.dim(), (8, 32, 64));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Array3::from_shape_fn((2, 5, 6), |_| rng.random_range(-1.0..1.0));
        let cols = im2col(&x.view(), 3, 3, 2, 1);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, 2, 5, 6, 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
