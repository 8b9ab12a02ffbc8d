//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to a
//! single matrix product through an im2col expansion.
//!
//! Column layout: the expanded matrix has `C·KH·KW` rows and `B·OH·OW`
//! columns. Row `(c·KH + ki)·KW + kj` holds the input value that kernel tap
//! `(c, ki, kj)` sees; column `b·OH·OW + oy·OW + ox` is output pixel
//! `(oy, ox)` of image `b`. Kernels are stored `OC × C × KH × KW`, which is
//! already the row-major `OC × (C·KH·KW)` matrix the product needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, transpose_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::dim("conv2d: kernel and stride must be positive"));
        }
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::dim(format!(
                "conv2d: kernel {} does not fit padded input {span_h}x{span_w}",
                self.kernel
            )));
        }
        Ok((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    pub geometry: ConvGeometry,
    pub input_shape: [usize; 4],
    pub output_hw: (usize, usize),
    /// im2col expansion of the input, `C·KH·KW × B·OH·OW`.
    pub columns: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub delta_in: Tensor,
    pub grad_kernels: Tensor,
    pub grad_bias: Tensor,
}

fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::dim(format!(
            "conv2d expects batch×C×H×W input, got {:?}",
            x.shape()
        ))),
    }
}

/// Expands `x` into the column matrix described in the module docs.
pub fn im2col(x: &Tensor, geometry: &ConvGeometry) -> Result<(Vec<f64>, (usize, usize))> {
    let [batch, channels, h, w] = dims4(x)?;
    let (oh, ow) = geometry.output_size(h, w)?;
    let k = geometry.kernel;
    let plane = oh * ow;
    let ncols = batch * plane;
    let mut cols = vec![0.0; channels * k * k * ncols];
    let data = x.data();
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..batch {
                    let img = &data[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * geometry.stride + ki) as isize - geometry.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[b * plane + oy * ow..b * plane + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * geometry.stride + kj) as isize - geometry.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((cols, (oh, ow)))
}

/// Scatter-adds a column matrix back onto a `batch×C×H×W` image tensor.
fn col2im(cols: &[f64], geometry: &ConvGeometry, input_shape: [usize; 4], out_hw: (usize, usize)) -> Vec<f64> {
    let [batch, channels, h, w] = input_shape;
    let (oh, ow) = out_hw;
    let k = geometry.kernel;
    let plane = oh * ow;
    let ncols = batch * plane;
    let mut out = vec![0.0; batch * channels * h * w];
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..batch {
                    let base = (b * channels + c) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * geometry.stride + ki) as isize - geometry.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geometry.stride + kj) as isize - geometry.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                out[base + iy as usize * w + ix as usize] += row[b * plane + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    geometry: &ConvGeometry,
) -> Result<(Tensor, ConvCache)> {
    let input_shape = dims4(x)?;
    let [batch, channels, _, _] = input_shape;
    if channels != geometry.in_channels
        || kernels.shape() != geometry.kernel_shape()
        || bias.shape() != [geometry.out_channels]
    {
        return Err(Error::dim(format!(
            "conv2d: input {:?}, kernels {:?}, bias {:?} disagree with {geometry:?}",
            x.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    let (columns, (oh, ow)) = im2col(x, geometry)?;
    let oc = geometry.out_channels;
    let plane = oh * ow;
    let ncols = batch * plane;
    let mut product = vec![0.0; oc * ncols];
    gemm(kernels.data(), &columns, oc, geometry.fan_in(), ncols, &mut product);

    let mut out = vec![0.0; batch * oc * plane];
    for o in 0..oc {
        let bo = bias.data()[o];
        for b in 0..batch {
            let src = &product[o * ncols + b * plane..o * ncols + (b + 1) * plane];
            let dst = &mut out[(b * oc + o) * plane..(b * oc + o + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    let cache = ConvCache {
        geometry: *geometry,
        input_shape,
        output_hw: (oh, ow),
        columns,
    };
    Ok((Tensor::new(vec![batch, oc, oh, ow], out)?, cache))
}

pub fn conv2d_backward(cache: &ConvCache, kernels: &Tensor, delta_out: &Tensor) -> Result<ConvGrads> {
    let geometry = &cache.geometry;
    let [batch, _, _, _] = cache.input_shape;
    let (oh, ow) = cache.output_hw;
    let oc = geometry.out_channels;
    let plane = oh * ow;
    let ncols = batch * plane;
    let fan_in = geometry.fan_in();
    delta_out.expect_shape(&[batch, oc, oh, ow])?;

    // delta as an OC × (B·OH·OW) matrix, matching the forward product.
    let mut delta = vec![0.0; oc * ncols];
    for b in 0..batch {
        for o in 0..oc {
            let src = &delta_out.data()[(b * oc + o) * plane..(b * oc + o + 1) * plane];
            delta[o * ncols + b * plane..o * ncols + (b + 1) * plane].copy_from_slice(src);
        }
    }

    let grad_bias: Vec<f64> = delta.chunks_exact(ncols).map(|row| row.iter().sum()).collect();

    let mut cols_t = vec![0.0; ncols * fan_in];
    transpose_into(&cache.columns, fan_in, ncols, &mut cols_t);
    let mut grad_k = vec![0.0; oc * fan_in];
    gemm(&delta, &cols_t, oc, ncols, fan_in, &mut grad_k);

    let mut k_t = vec![0.0; fan_in * oc];
    transpose_into(kernels.data(), oc, fan_in, &mut k_t);
    let mut dcols = vec![0.0; fan_in * ncols];
    gemm(&k_t, &delta, fan_in, oc, ncols, &mut dcols);
    let delta_in = col2im(&dcols, geometry, cache.input_shape, cache.output_hw);

    Ok(ConvGrads {
        delta_in: Tensor::new(cache.input_shape.to_vec(), delta_in)?,
        grad_kernels: Tensor::new(geometry.kernel_shape().to_vec(), grad_k)?,
        grad_bias: Tensor::new(vec![oc], grad_bias)?,
    })
}
