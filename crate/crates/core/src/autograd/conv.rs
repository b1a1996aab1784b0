//! im2col convolution kernels backing the graph's conv ops.
//!
//! A convolution over an `h × w` image with square kernel `k`, stride `s`
//! and zero padding `p` is a single matrix product between the kernel,
//! viewed as `[out, in·k·k]`, and the column matrix `[in·k·k, ho·wo]`.
//! The transposed convolution runs the same geometry backwards: the column
//! matrix is produced by the product and scattered with `col2im`.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use ndarray::ArrayViewMut2;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

pub(crate) fn im2col(image: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a column matrix back onto an image of the geometry's input size.
pub(crate) fn col2im(cols_data: &[f64], g: &Geometry, image: &mut [f64]) {
    let cols = g.col_cols();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c`, with optional transposition of the stored operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a = ArrayView2::from_shape(a_dims, a).expect("gemm lhs");
    let b = ArrayView2::from_shape(b_dims, b).expect("gemm rhs");
    let a = if trans_a { a.t() } else { a };
    let b = if trans_b { b.t() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm out");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Forward convolution of one image. `kernel` is `[out, in, k, k]`.
pub(crate) fn conv_forward(
    image: &[f64],
    kernel: &[f64],
    bias: &[f64],
    out_channels: usize,
    g: &Geometry,
) -> Vec<f64> {
    let cols = im2col(image, g);
    let spatial = g.col_cols();
    let mut out = vec![0.0; out_channels * spatial];
    for (o, chunk) in out.chunks_mut(spatial).enumerate() {
        chunk.fill(bias[o]);
    }
    gemm(
        kernel,
        (out_channels, g.col_rows()),
        false,
        &cols,
        (g.col_rows(), spatial),
        false,
        &mut out,
        1.0,
    );
    out
}

/// Backward of `conv_forward` for one image; accumulates into the three gradient buffers.
pub(crate) fn conv_backward(
    image: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    out_channels: usize,
    g: &Geometry,
    grad_image: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let spatial = g.col_cols();
    if let Some(gk) = grad_kernel {
        let cols = im2col(image, g);
        gemm(
            grad_out,
            (out_channels, spatial),
            false,
            &cols,
            (g.col_rows(), spatial),
            true,
            gk,
            1.0,
        );
    }
    if let Some(gb) = grad_bias {
        for (o, chunk) in grad_out.chunks(spatial).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
    }
    if let Some(gi) = grad_image {
        let mut dcols = vec![0.0; g.col_rows() * spatial];
        gemm(
            kernel,
            (out_channels, g.col_rows()),
            true,
            grad_out,
            (out_channels, spatial),
            false,
            &mut dcols,
            0.0,
        );
        col2im(&dcols, g, gi);
    }
}

/// Transposed convolution of one image. `kernel` is `[in, out, k, k]` and the
/// geometry describes the *adjoint* convolution: its input is this op's output
/// (`g.channels` = out channels, `g.height × g.width` = output size) and its
/// output extent equals this op's input extent.
pub(crate) fn conv_transpose_forward(
    image: &[f64],
    kernel: &[f64],
    bias: &[f64],
    in_channels: usize,
    g: &Geometry,
) -> Vec<f64> {
    let spatial = g.col_cols();
    let mut dcols = vec![0.0; g.col_rows() * spatial];
    gemm(
        kernel,
        (in_channels, g.col_rows()),
        true,
        image,
        (in_channels, spatial),
        false,
        &mut dcols,
        0.0,
    );
    let plane = g.height * g.width;
    let mut out = vec![0.0; g.channels * plane];
    for (o, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bias[o]);
    }
    col2im(&dcols, g, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    image: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    in_channels: usize,
    g: &Geometry,
    grad_image: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let spatial = g.col_cols();
    let plane = g.height * g.width;
    if let Some(gb) = grad_bias {
        for (o, chunk) in grad_out.chunks(plane).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
    }
    if grad_image.is_none() && grad_kernel.is_none() {
        return;
    }
    let cols = im2col(grad_out, g);
    if let Some(gk) = grad_kernel {
        gemm(
            image,
            (in_channels, spatial),
            false,
            &cols,
            (g.col_rows(), spatial),
            true,
            gk,
            1.0,
        );
    }
    if let Some(gi) = grad_image {
        gemm(
            kernel,
            (in_channels, g.col_rows()),
            false,
            &cols,
            (g.col_rows(), spatial),
            false,
            gi,
            1.0,
        );
    }
}
