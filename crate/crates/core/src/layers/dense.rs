use crate::error::{Error, Result};
use crate::tensor::{gemm, transpose_into, Tensor};

/// `x · w + b` for `x: batch×in`, `w: in×out`, `b: out`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, fan_in) = x.dims2()?;
    let (w_in, fan_out) = w.dims2()?;
    if w_in != fan_in || b.shape() != [fan_out] {
        return Err(Error::dim(format!(
            "dense: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; batch * fan_out];
    gemm(x.data(), w.data(), batch, fan_in, fan_out, &mut out);
    for row in out.chunks_exact_mut(fan_out) {
        for (o, &bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    Tensor::new(vec![batch, fan_out], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub delta_in: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

/// Gradients of the affine map given the cached input `x` and the weights used
/// in the forward pass. `grad_b` sums `delta_out` over the batch.
pub fn dense_backward(x: &Tensor, w: &Tensor, delta_out: &Tensor) -> Result<DenseGrads> {
    let (batch, fan_in) = x.dims2()?;
    let (w_in, fan_out) = w.dims2()?;
    if w_in != fan_in || delta_out.shape() != [batch, fan_out] {
        return Err(Error::dim(format!(
            "dense backward: x {:?}, w {:?}, delta {:?}",
            x.shape(),
            w.shape(),
            delta_out.shape()
        )));
    }

    let mut x_t = vec![0.0; batch * fan_in];
    transpose_into(x.data(), batch, fan_in, &mut x_t);
    let mut grad_w = vec![0.0; fan_in * fan_out];
    gemm(&x_t, delta_out.data(), fan_in, batch, fan_out, &mut grad_w);

    let mut grad_b = vec![0.0; fan_out];
    for row in delta_out.data().chunks_exact(fan_out) {
        for (g, &d) in grad_b.iter_mut().zip(row) {
            *g += d;
        }
    }

    let mut w_t = vec![0.0; fan_in * fan_out];
    transpose_into(w.data(), fan_in, fan_out, &mut w_t);
    let mut delta_in = vec![0.0; batch * fan_in];
    gemm(delta_out.data(), &w_t, batch, fan_out, fan_in, &mut delta_in);

    Ok(DenseGrads {
        delta_in: Tensor::new(vec![batch, fan_in], delta_in)?,
        grad_w: Tensor::new(vec![fan_in, fan_out], grad_w)?,
        grad_b: Tensor::new(vec![fan_out], grad_b)?,
    })
}
