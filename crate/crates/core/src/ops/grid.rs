use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Bilinear corner data for one sample position: indices, fractions, and
/// whether the raw coordinate was clamped (gradient w.r.t. the grid is zero
/// along a clamped axis).
#[inline]
fn corner(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let clamped = coord < 0.0 || coord > max;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, clamped)
}

/// Sample `input` at absolute pixel coordinates given by `grid`
/// (batch, 2, out_h, out_w) with channel 0 = x and channel 1 = y.
/// Out-of-range coordinates are clamped to the border.
pub fn grid_sample_bilinear(input: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.shape();
    let (gb, gc, oh, ow) = grid.shape();
    if gb != b || gc != 2 {
        return Err(CoreError::shape(
            "grid_sample grid",
            format!("({b},2,_,_)"),
            format!("{:?}", grid.shape()),
        ));
    }
    let mut out = Tensor::zeros(b, c, oh, ow);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (x0, x1, fx, _) = corner(grid.at(bi, 0, oy, ox), w);
                let (y0, y1, fy, _) = corner(grid.at(bi, 1, oy, ox), h);
                let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
                let (w10, w11) = (fy * (1.0 - fx), fy * fx);
                for ci in 0..c {
                    let v = w00 * input.at(bi, ci, y0, x0)
                        + w01 * input.at(bi, ci, y0, x1)
                        + w10 * input.at(bi, ci, y1, x0)
                        + w11 * input.at(bi, ci, y1, x1);
                    *out.at_mut(bi, ci, oy, ox) = v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GridSampleGrads {
    pub input: Tensor,
    pub grid: Tensor,
}

/// Gradients of [`grid_sample_bilinear`] w.r.t. both the sampled tensor and
/// the sampling coordinates.
pub fn grid_sample_bilinear_backward(
    input: &Tensor,
    grid: &Tensor,
    grad_out: &Tensor,
) -> Result<GridSampleGrads> {
    let (b, c, h, w) = input.shape();
    let (_, _, oh, ow) = grid.shape();
    if grad_out.shape() != (b, c, oh, ow) {
        return Err(CoreError::shape(
            "grid_sample_backward grad_out",
            format!("({b},{c},{oh},{ow})"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad_input = Tensor::zeros(b, c, h, w);
    let mut grad_grid = Tensor::zeros(b, 2, oh, ow);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (x0, x1, fx, cx) = corner(grid.at(bi, 0, oy, ox), w);
                let (y0, y1, fy, cy) = corner(grid.at(bi, 1, oy, ox), h);
                let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
                let (w10, w11) = (fy * (1.0 - fx), fy * fx);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ci in 0..c {
                    let g = grad_out.at(bi, ci, oy, ox);
                    *grad_input.at_mut(bi, ci, y0, x0) += w00 * g;
                    *grad_input.at_mut(bi, ci, y0, x1) += w01 * g;
                    *grad_input.at_mut(bi, ci, y1, x0) += w10 * g;
                    *grad_input.at_mut(bi, ci, y1, x1) += w11 * g;
                    let (v00, v01) = (input.at(bi, ci, y0, x0), input.at(bi, ci, y0, x1));
                    let (v10, v11) = (input.at(bi, ci, y1, x0), input.at(bi, ci, y1, x1));
                    gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                *grad_grid.at_mut(bi, 0, oy, ox) = if cx { 0.0 } else { gx };
                *grad_grid.at_mut(bi, 1, oy, ox) = if cy { 0.0 } else { gy };
            }
        }
    }
    Ok(GridSampleGrads { input: grad_input, grid: grad_grid })
}

fn bilinear_axis_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (i0, i1, f, _) = corner((o as f64 + 0.5) * scale - 0.5, n_in);
            (i0, i1, f)
        })
        .collect()
}

/// Separable bilinear resize to arbitrary extents, half-pixel centers,
/// border clamp.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidArgument("resize_bilinear to empty extent".into()));
    }
    let xplan = bilinear_axis_plan(w, out_w);
    let yplan = bilinear_axis_plan(h, out_h);
    let mut out = Tensor::zeros(b, c, out_h, out_w);
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in yplan.iter().enumerate() {
                let r0 = input.row(bi, ci, y0);
                let r1 = input.row(bi, ci, y1);
                let dst = out.row_mut(bi, ci, oy);
                for (ox, &(x0, x1, fx)) in xplan.iter().enumerate() {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    dst[ox] = top + fy * (bot - top);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (b, c, oh, ow) = grad_out.shape();
    let xplan = bilinear_axis_plan(in_w, ow);
    let yplan = bilinear_axis_plan(in_h, oh);
    let mut out = Tensor::zeros(b, c, in_h, in_w);
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in yplan.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xplan.iter().enumerate() {
                    let g = grad_out.at(bi, ci, oy, ox);
                    *out.at_mut(bi, ci, y0, x0) += (1.0 - fy) * (1.0 - fx) * g;
                    *out.at_mut(bi, ci, y0, x1) += (1.0 - fy) * fx * g;
                    *out.at_mut(bi, ci, y1, x0) += fy * (1.0 - fx) * g;
                    *out.at_mut(bi, ci, y1, x1) += fy * fx * g;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_grid(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(1, 2, h, w, |_, c, y, x| if c == 0 { x as f64 } else { y as f64 })
    }

    #[test]
    fn identity_grid_reproduces_input_exactly() {
        let input = Tensor::from_fn(1, 2, 5, 7, |_, c, y, x| (c * 100 + y * 7 + x) as f64 * 0.01);
        let out = grid_sample_bilinear(&input, &identity_grid(5, 7)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn half_pixel_shift_on_ramp_is_exact_in_interior() {
        let w = 9;
        let input = Tensor::from_fn(1, 1, 3, w, |_, _, _, x| x as f64);
        let mut grid = identity_grid(3, w);
        for i in 0..3 * w {
            grid.data_mut()[i] += 0.5;
        }
        let out = grid_sample_bilinear(&input, &grid).unwrap();
        for x in 0..w - 1 {
            assert!((out.at(0, 0, 1, x) - (x as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let input = Tensor::from_fn(1, 1, 4, 4, |_, _, y, x| (y * 4 + x) as f64);
        let grid = Tensor::from_fn(1, 2, 1, 2, |_, c, _, x| {
            match (c, x) {
                (0, 0) => -5.0,
                (1, 0) => 0.0,
                (0, 1) => 10.0,
                _ => 3.0,
            }
        });
        let out = grid_sample_bilinear(&input, &grid).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.at(0, 0, 0, 1), 15.0);
    }

    #[test]
    fn same_size_bilinear_resize_is_identity() {
        let input = Tensor::from_fn(1, 1, 6, 5, |_, _, y, x| (y * 5 + x) as f64);
        let out = resize_bilinear(&input, 6, 5).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn constant_survives_any_resize() {
        let input = Tensor::full(1, 1, 8, 8, 0.6);
        for (h, w) in [(4, 4), (16, 16), (5, 11)] {
            let out = resize_bilinear(&input, h, w).unwrap();
            for &v in out.data() {
                assert!((v - 0.6).abs() < 1e-12);
            }
        }
    }
}
