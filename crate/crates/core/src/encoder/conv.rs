//! 3x3 / stride-2 / pad-1 convolution lowered to a matrix product.

use ndarray::{Array2, Array3, ArrayView3};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const LEAK: f32 = 0.1;

pub fn out_size(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

/// `(C, H, W) -> (C * 9, Ho * Wo)`; row index is `c * 9 + ky * 3 + kx`.
pub fn im2col(input: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let (ho, wo) = (out_size(h), out_size(w));
    let mut cols = Array2::zeros((c * KERNEL * KERNEL, ho * wo));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ch * KERNEL * KERNEL + ky * KERNEL + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("standard layout");
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = input[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input grid.
pub fn col2im(cols: &Array2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
    let (ho, wo) = (out_size(h), out_size(w));
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ch * KERNEL * KERNEL + ky * KERNEL + kx;
                let src = cols.row(row);
                let src = src.as_slice().expect("standard layout");
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

pub fn leaky_relu_grad(pre: f32) -> f32 {
    if pre > 0.0 {
        1.0
    } else {
        LEAK
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| ((c * 36 + y * 6 + x) as f32 * 0.37).sin());
        let cols = im2col(x.view());
        let y = Array2::from_shape_fn(cols.dim(), |(r, c)| ((r * 31 + c) as f32 * 0.11).cos());
        let lhs: f32 = (&cols * &y).sum();
        let rhs: f32 = (&x * &col2im(&y, 2, 6, 6)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_size_halves_even_inputs() {
        assert_eq!(out_size(96), 48);
        assert_eq!(out_size(12), 6);
        assert_eq!(out_size(6), 3);
    }
}
