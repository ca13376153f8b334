use super::conv::{pad_reflect, unpad_accumulate};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// 3x3 Gaussian weights for the given sigma, normalized to sum to one.
pub fn gaussian3x3_weights(sigma: f64) -> [[f64; 3]; 3] {
    let mut w = [[0.0; 3]; 3];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 1.0, dx as f64 - 1.0);
            *v = (-(fy * fy + fx * fx) * inv).exp();
            total += *v;
        }
    }
    for row in &mut w {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CoreError::InvalidArgument(format!("blur sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Depthwise 3x3 Gaussian blur with reflect padding.
pub fn gaussian_blur3x3(input: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    let w = gaussian3x3_weights(sigma);
    let (b, c, h, wd) = input.shape();
    let padded = pad_reflect(input, 1);
    let mut out = Tensor::zeros(b, c, h, wd);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let rows = [padded.row(bi, ci, y), padded.row(bi, ci, y + 1), padded.row(bi, ci, y + 2)];
                let dst = out.row_mut(bi, ci, y);
                for (x, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        let r = rows[dy];
                        acc += w[dy][0] * r[x] + w[dy][1] * r[x + 1] + w[dy][2] * r[x + 2];
                    }
                    *d = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gaussian_blur3x3`].
pub fn gaussian_blur3x3_backward(grad_out: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    let w = gaussian3x3_weights(sigma);
    let (b, c, h, wd) = grad_out.shape();
    let mut grad_padded = Tensor::zeros(b, c, h + 2, wd + 2);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let src: Vec<f64> = grad_out.row(bi, ci, y).to_vec();
                for dy in 0..3 {
                    let dst = grad_padded.row_mut(bi, ci, y + dy);
                    for (x, &g) in src.iter().enumerate() {
                        dst[x] += w[dy][0] * g;
                        dst[x + 1] += w[dy][1] * g;
                        dst[x + 2] += w[dy][2] * g;
                    }
                }
            }
        }
    }
    Ok(unpad_accumulate(&grad_padded, 1))
}
