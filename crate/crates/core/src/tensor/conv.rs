use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::par;

/// Resolved extents of a 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry> {
        let ([n, c, h, w], [f, wc, kh, kw]) = (
            <[usize; 4]>::try_from(input)
                .map_err(|_| dim_err!("conv2d input must be rank 4, got {input:?}"))?,
            <[usize; 4]>::try_from(weight)
                .map_err(|_| dim_err!("conv2d weight must be rank 4, got {weight:?}"))?,
        );
        if c != wc {
            return Err(dim_err!(
                "conv2d channel mismatch: input {input:?} vs weight {weight:?}"
            ));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let out = |size: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Shape(format!(
                    "conv2d {axis}: ({size} + 2*{padding} - {k}) / {stride} is not a non-negative integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: out(h, kh, "height")?,
            out_w: out(w, kw, "width")?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.padding as isize;
        (v >= 0).then_some(v as usize)
    }

    /// Unfolds one example into a `patch_len × positions` matrix.
    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * p;
                    for oy in 0..self.out_h {
                        let iy = self.source(oy, i).filter(|&y| y < self.in_h);
                        for ox in 0..self.out_w {
                            let ix = self.source(ox, j).filter(|&x| x < self.in_w);
                            col[row + oy * self.out_w + ox] = match (iy, ix) {
                                (Some(y), Some(x)) => input[(c * self.in_h + y) * self.in_w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column matrix back onto one example, accumulating overlaps in
    /// ascending (channel, tap, position) order.
    fn col2im<T: Scalar>(&self, col: &[T], out: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * p;
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, i).filter(|&y| y < self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source(ox, j).filter(|&x| x < self.in_w) {
                                out[(c * self.in_h + y) * self.in_w + x] +=
                                    col[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation (no kernel flip) with zero padding. Uses the
/// im2col + matmul path; [`conv2d_direct`] is the loop-nest reference.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_im2col(input, weight, stride, padding)
}

pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (p, k, f) = (g.positions(), g.patch_len(), g.out_channels);
    let mut out = vec![T::zero(); g.batch * f * p];
    let (x, w) = (input.data(), weight.data());
    par::for_each_chunk_mut(&mut out, f * p, |n, dst| {
        let mut col = vec![T::zero(); k * p];
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
        gemm_nn(f, k, p, w, &col, dst);
    });
    Tensor::new(&g.output_shape(), out)
}

/// Loop-nest cross-correlation, summing taps in ascending (channel, ky, kx) order.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.positions()];
    par::for_each_chunk_mut(&mut out, g.out_channels * g.positions(), |n, dst| {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        for f in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        for i in 0..g.kernel_h {
                            let Some(y) = g.source(oy, i).filter(|&y| y < g.in_h) else {
                                continue;
                            };
                            for j in 0..g.kernel_w {
                                if let Some(xx) = g.source(ox, j).filter(|&v| v < g.in_w) {
                                    acc += xn[(c * g.in_h + y) * g.in_w + xx]
                                        * w[((f * g.in_channels + c) * g.kernel_h + i)
                                            * g.kernel_w
                                            + j];
                                }
                            }
                        }
                    }
                    dst[(f * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    });
    Tensor::new(&g.output_shape(), out)
}

/// Adjoint of [`conv2d`]: returns `(grad_input, grad_weight)`.
///
/// Per-example weight gradients are computed independently and then summed in
/// ascending batch order.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (gi, gw) = conv2d_backward_parts(input, weight, grad_output, stride, padding, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

/// Per-example weight gradients, one `F×C×kH×kW` tensor per batch item.
pub fn conv2d_weight_grad_per_example<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Vec<Tensor<T>>> {
    let g = checked_geometry(input, weight, grad_output, stride, padding)?;
    let partials = weight_partials(&g, input.data(), grad_output.data());
    partials
        .into_iter()
        .map(|p| Tensor::new(weight.shape(), p))
        .collect()
}

fn checked_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_output.shape() != g.output_shape() {
        return Err(dim_err!(
            "conv2d_backward: grad_output {:?} does not match forward output {:?}",
            grad_output.shape(),
            g.output_shape()
        ));
    }
    Ok(g)
}

fn weight_partials<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T]) -> Vec<Vec<T>> {
    let (p, k, f) = (g.positions(), g.patch_len(), g.out_channels);
    par::map_indices(g.batch, |n| {
        let mut col = vec![T::zero(); k * p];
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
        let mut gw = vec![T::zero(); f * k];
        gemm_nt(f, p, k, &dy[n * f * p..(n + 1) * f * p], &col, &mut gw);
        gw
    })
}

pub(crate) fn conv2d_backward_parts<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = checked_geometry(input, weight, grad_output, stride, padding)?;
    let (p, k, f) = (g.positions(), g.patch_len(), g.out_channels);
    let (w, dy) = (weight.data(), grad_output.data());

    let partials = weight_partials(&g, input.data(), dy);
    let mut gw = vec![T::zero(); f * k];
    for part in &partials {
        for (a, &b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }

    let grad_input = if need_input {
        let mut gx = vec![T::zero(); g.batch * g.in_len()];
        par::for_each_chunk_mut(&mut gx, g.in_len(), |n, dst| {
            let mut col = vec![T::zero(); k * p];
            gemm_tn(k, f, p, w, &dy[n * f * p..(n + 1) * f * p], &mut col);
            g.col2im(&col, dst);
        });
        Some(Tensor::new(input.shape(), gx)?)
    } else {
        None
    };
    Ok((grad_input, Tensor::new(weight.shape(), gw)?))
}
