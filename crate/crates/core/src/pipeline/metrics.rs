//! Image quality metrics for [0, 1]-ranged images.

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// PSNR is capped here: below this mean squared error the two images are
/// treated as identical.
const PSNR_MSE_FLOOR: f64 = 1e-10;
/// The cap applied when MSE falls under [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn require_same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, with peak value 1.
/// Returns [`PSNR_CAP_DB`] when the mean squared error is below 1e-10.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    require_same_shape("psnr", a, b)?;
    let n = a.data().len() as f64;
    let mse: f64 =
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all fully interior 11x11 windows of the
/// luminance planes (Gaussian-weighted statistics, sigma 1.5). RGB inputs are
/// reduced with BT.601 luma weights first. Extents must be at least 11.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    require_same_shape("ssim", a, b)?;
    let (_, _, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::InvalidArgument(format!(
            "ssim needs extents of at least {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la = Image::from_tensor(a)?.luminance();
    let lb = Image::from_tensor(b)?.luminance();
    let (xa, xb) = (la.plane(0, 0), lb.plane(0, 0));
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row_a = &xa[(y0 + wy) * w + x0..(y0 + wy) * w + x0 + SSIM_WINDOW];
                let row_b = &xb[(y0 + wy) * w + x0..(y0 + wy) * w + x0 + SSIM_WINDOW];
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let (va, vb) = (row_a[wx], row_b[wx]);
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
