use super::reflect;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Materialize a reflect-padded copy of `input`, `p` pixels on each side.
pub(crate) fn pad_reflect(input: &Tensor, p: usize) -> Tensor {
    let (b, c, h, w) = input.shape();
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(b, c, ph, pw);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ph {
                let sy = reflect(y as isize - p as isize, h);
                let src = input.row(bi, ci, sy);
                let dst = out.row_mut(bi, ci, y);
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = src[reflect(x as isize - p as isize, w)];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect`]: scatter padded-plane gradients back onto the
/// original extents through the same reflection map.
pub(crate) fn unpad_accumulate(grad_padded: &Tensor, p: usize) -> Tensor {
    let (b, c, ph, pw) = grad_padded.shape();
    let (h, w) = (ph - 2 * p, pw - 2 * p);
    let mut out = Tensor::zeros(b, c, h, w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ph {
                let sy = reflect(y as isize - p as isize, h);
                let src = grad_padded.row(bi, ci, y);
                for x in 0..pw {
                    let sx = reflect(x as isize - p as isize, w);
                    *out.at_mut(bi, ci, sy, sx) += src[x];
                }
            }
        }
    }
    out
}

fn check_conv_args(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<(usize, usize)> {
    let (_, ic, h, w) = input.shape();
    let (oc, wic, kh, kw) = weight.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "conv2d kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if wic != ic {
        return Err(CoreError::shape(
            "conv2d weight channels",
            format!("{ic}"),
            format!("{wic}"),
        ));
    }
    if bias.shape() != (1, 1, 1, oc) {
        return Err(CoreError::shape(
            "conv2d bias",
            format!("(1,1,1,{oc})"),
            format!("{:?}", bias.shape()),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(CoreError::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    if h == 0 || w == 0 {
        return Err(CoreError::InvalidArgument("conv2d on empty input".into()));
    }
    Ok((oc, kh))
}

/// Same-size 2-D convolution with reflect padding, stride 1.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d_strided(input, weight, bias, 1)
}

/// Reflect-padded convolution with stride 1 or 2; output extent is
/// `ceil(n / stride)` per axis.
pub fn conv2d_strided(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (oc, k) = check_conv_args(input, weight, bias, stride)?;
    let (b, ic, h, w) = input.shape();
    let p = (k - 1) / 2;
    let padded = pad_reflect(input, p);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = Tensor::zeros(b, oc, oh, ow);
    let mut acc = vec![0.0f64; oh * ow];
    for bi in 0..b {
        for o in 0..oc {
            acc.fill(bias.data()[o]);
            for i in 0..ic {
                for ky in 0..k {
                    let wrow = weight.row(o, i, ky);
                    for oy in 0..oh {
                        let prow = padded.row(bi, i, oy * stride + ky);
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if stride == 1 {
                                let shifted = &prow[kx..kx + ow];
                                for (a, &v) in arow.iter_mut().zip(shifted) {
                                    *a += wv * v;
                                }
                            } else {
                                for (ox, a) in arow.iter_mut().enumerate() {
                                    *a += wv * prow[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
            out.plane_mut(bi, o).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Analytic gradients of [`conv2d_strided`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<Conv2dGrads> {
    let (oc, k) = {
        let (oc, _, kh, _) = weight.shape();
        (oc, kh)
    };
    let (b, ic, h, w) = input.shape();
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    if grad_out.shape() != (b, oc, oh, ow) {
        return Err(CoreError::shape(
            "conv2d_backward grad_out",
            format!("({b},{oc},{oh},{ow})"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let p = (k - 1) / 2;
    let padded = pad_reflect(input, p);
    let (ph, pw) = (h + 2 * p, w + 2 * p);

    let mut grad_bias = Tensor::zeros(1, 1, 1, oc);
    for o in 0..oc {
        let mut s = 0.0;
        for bi in 0..b {
            s += grad_out.plane(bi, o).iter().sum::<f64>();
        }
        grad_bias.data_mut()[o] = s;
    }

    let mut grad_weight = Tensor::zeros(oc, ic, k, k);
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for oy in 0..oh {
                            let prow = padded.row(bi, i, oy * stride + ky);
                            let grow = grad_out.row(bi, o, oy);
                            if stride == 1 {
                                s += grow
                                    .iter()
                                    .zip(&prow[kx..kx + ow])
                                    .map(|(&g, &v)| g * v)
                                    .sum::<f64>();
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    s += g * prow[ox * stride + kx];
                                }
                            }
                        }
                    }
                    *grad_weight.at_mut(o, i, ky, kx) = s;
                }
            }
        }
    }

    let mut grad_padded = Tensor::zeros(b, ic, ph, pw);
    for bi in 0..b {
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..k {
                    let wrow: Vec<f64> = weight.row(o, i, ky).to_vec();
                    for oy in 0..oh {
                        let grow: Vec<f64> = grad_out.row(bi, o, oy).to_vec();
                        let prow = grad_padded.row_mut(bi, i, oy * stride + ky);
                        for (kx, &wv) in wrow.iter().enumerate() {
                            for (ox, &g) in grow.iter().enumerate() {
                                prow[ox * stride + kx] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    let grad_input = unpad_accumulate(&grad_padded, p);

    Ok(Conv2dGrads { input: grad_input, weight: grad_weight, bias: grad_bias })
}
