use super::{gemm, LayerGrad, Mat, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        input.expect_rank(3, "conv2d input")?;
        kernels.expect_rank(4, "conv2d kernels")?;
        let &[channels, height, width] = input.shape() else {
            unreachable!()
        };
        let &[k, kc, kh, kw] = kernels.shape() else {
            unreachable!()
        };
        if kc != channels {
            return Err(Error::invalid(format!(
                "conv2d: input has {channels} channels but kernels expect {kc}"
            )));
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(height, kh, stride, pad),
            conv_output_size(width, kw, stride, pad),
        ) else {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {height}x{width}"
            )));
        };
        Ok(Geometry {
            channels,
            height,
            width,
            kernels: k,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position `o` and kernel tap `k`, if inside the input.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let y = (o * self.stride + k) as isize - self.pad as isize;
        (y >= 0).then_some(y as usize)
    }

    /// Unrolls input patches into a `[C·kh·kw, H'·W']` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ky).filter(|&y| y < self.height) else {
                            continue;
                        };
                        let src = &plane[y * self.width..(y + 1) * self.width];
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            if let Some(x) = self.source(ox, kx).filter(|&x| x < self.width) {
                                *v = src[x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Adjoint of [`Geometry::im2col`].
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.out_len();
        let mut out = vec![0.0; self.channels * self.height * self.width];
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ky).filter(|&y| y < self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[y * self.width..(y + 1) * self.width];
                        for (ox, v) in line.iter().enumerate() {
                            if let Some(x) = self.source(ox, kx).filter(|&x| x < self.width) {
                                dst[x] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }
}

/// Zero-padded 2-D cross-correlation of a `[C,H,W]` input with `[K,C,kh,kw]`
/// kernels plus a per-kernel bias.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input, kernels, stride, pad)?;
    if bias.len() != g.kernels {
        return Err(Error::invalid(format!(
            "conv2d: {} kernels but bias has {} entries",
            g.kernels,
            bias.len()
        )));
    }
    let n = g.out_len();
    let mut out = vec![0.0; g.kernels * n];
    for (k, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias.data()[k]);
    }
    let cols = g.im2col(input.data());
    gemm(
        Mat::new(kernels.data(), g.kernels, g.patch_len()),
        Mat::new(&cols, g.patch_len(), n),
        1.0,
        &mut out,
    );
    Tensor::new(&[g.kernels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] given the upstream gradient of its output.
/// `wrt_params` is `[kernels, bias]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<LayerGrad> {
    let g = Geometry::new(input, kernels, stride, pad)?;
    if upstream.shape() != [g.kernels, g.out_h, g.out_w] {
        return Err(Error::invalid(format!(
            "conv2d backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [g.kernels, g.out_h, g.out_w]
        )));
    }
    let n = g.out_len();
    let p = g.patch_len();
    let up = Mat::new(upstream.data(), g.kernels, n);

    let cols = g.im2col(input.data());
    let mut d_kernels = vec![0.0; g.kernels * p];
    gemm(up, Mat::new(&cols, p, n).t(), 0.0, &mut d_kernels);

    let d_bias: Vec<f64> = upstream.data().chunks(n).map(|r| r.iter().sum()).collect();

    let mut d_cols = cols;
    gemm(
        Mat::new(kernels.data(), g.kernels, p).t(),
        up,
        0.0,
        &mut d_cols,
    );
    let d_input = g.col2im(&d_cols);

    Ok(LayerGrad {
        wrt_input: Tensor::new(input.shape(), d_input)?,
        wrt_params: vec![
            Tensor::new(kernels.shape(), d_kernels)?,
            Tensor::new(&[g.kernels], d_bias)?,
        ],
    })
}
