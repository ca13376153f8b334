use super::reflect;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Patch extraction geometry shared by unfold, fold, and the warp stage.
///
/// Grid position (gy, gx) owns a `k_eff` x `k_eff` patch whose slot (dy, dx)
/// reads coordinate `gy * stride + dy - offset` with `offset = (k_eff -
/// stride) / 2`, reflect-mapped into the extents. For `k_eff = 3, stride = 1`
/// this is the classic dense 3x3 unfold with one patch per pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchGeom {
    pub k_eff: usize,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchGeom {
    pub fn new(h: usize, w: usize, k_eff: usize, stride: usize) -> Result<Self> {
        if stride == 0 || k_eff == 0 || (k_eff - stride) % 2 != 0 || k_eff < stride {
            return Err(CoreError::InvalidArgument(format!(
                "invalid patch geometry: k_eff {k_eff}, stride {stride}"
            )));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "patch grid requires extents divisible by stride, got {h}x{w} at stride {stride}"
            )));
        }
        Ok(PatchGeom { k_eff, stride, grid_h: h / stride, grid_w: w / stride, h, w })
    }

    #[inline]
    pub fn offset(&self) -> isize {
        ((self.k_eff - self.stride) / 2) as isize
    }

    #[inline]
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn slot_y(&self, gy: usize, dy: usize) -> usize {
        reflect((gy * self.stride + dy) as isize - self.offset(), self.h)
    }

    #[inline]
    pub fn slot_x(&self, gx: usize, dx: usize) -> usize {
        reflect((gx * self.stride + dx) as isize - self.offset(), self.w)
    }

    /// Per-pixel contribution counts for fold averaging.
    pub fn counts(&self) -> Tensor {
        let mut counts = Tensor::zeros(1, 1, self.h, self.w);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for dy in 0..self.k_eff {
                    let y = self.slot_y(gy, dy);
                    for dx in 0..self.k_eff {
                        let x = self.slot_x(gx, dx);
                        *counts.at_mut(0, 0, y, x) += 1.0;
                    }
                }
            }
        }
        counts
    }
}

pub(crate) fn unfold_general(input: &Tensor, geom: &PatchGeom) -> Result<Tensor> {
    let (b, c, h, w) = input.shape();
    if b != 1 {
        return Err(CoreError::InvalidArgument("unfold expects batch 1".into()));
    }
    if h != geom.h || w != geom.w {
        return Err(CoreError::shape(
            "unfold input",
            format!("{}x{}", geom.h, geom.w),
            format!("{h}x{w}"),
        ));
    }
    let k = geom.k_eff;
    let cols = c * k * k;
    let mut out = Tensor::zeros(1, 1, geom.n_patches(), cols);
    for gy in 0..geom.grid_h {
        for gx in 0..geom.grid_w {
            let row = out.row_mut(0, 0, gy * geom.grid_w + gx);
            let mut j = 0;
            for ci in 0..c {
                for dy in 0..k {
                    let y = geom.slot_y(gy, dy);
                    for dx in 0..k {
                        row[j] = input.at(0, ci, y, geom.slot_x(gx, dx));
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`unfold_general`]: scatter-add patch values through the same
/// reflect map (no count normalization).
pub(crate) fn unfold_adjoint(patches: &Tensor, c: usize, geom: &PatchGeom) -> Result<Tensor> {
    let k = geom.k_eff;
    check_patch_shape(patches, c, geom)?;
    let mut out = Tensor::zeros(1, c, geom.h, geom.w);
    for gy in 0..geom.grid_h {
        for gx in 0..geom.grid_w {
            let row = patches.row(0, 0, gy * geom.grid_w + gx);
            let mut j = 0;
            for ci in 0..c {
                for dy in 0..k {
                    let y = geom.slot_y(gy, dy);
                    for dx in 0..k {
                        *out.at_mut(0, ci, y, geom.slot_x(gx, dx)) += row[j];
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_patch_shape(patches: &Tensor, c: usize, geom: &PatchGeom) -> Result<()> {
    let k = geom.k_eff;
    let expect = (1, 1, geom.n_patches(), c * k * k);
    if patches.shape() != expect {
        return Err(CoreError::shape(
            "fold patches",
            format!("{expect:?}"),
            format!("{:?}", patches.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn fold_general(patches: &Tensor, c: usize, geom: &PatchGeom) -> Result<Tensor> {
    let mut out = unfold_adjoint(patches, c, geom)?;
    let counts = geom.counts();
    for ci in 0..c {
        let plane = out.plane_mut(0, ci);
        for (v, &n) in plane.iter_mut().zip(counts.data()) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Gradient of [`fold_general`] w.r.t. the patch tensor: gather the output
/// gradient at each slot's coordinate, divided by that pixel's count.
pub(crate) fn fold_general_backward(grad_out: &Tensor, c: usize, geom: &PatchGeom) -> Result<Tensor> {
    let counts = geom.counts();
    let k = geom.k_eff;
    let mut grad_patches = Tensor::zeros(1, 1, geom.n_patches(), c * k * k);
    for gy in 0..geom.grid_h {
        for gx in 0..geom.grid_w {
            let row = grad_patches.row_mut(0, 0, gy * geom.grid_w + gx);
            let mut j = 0;
            for ci in 0..c {
                for dy in 0..k {
                    let y = geom.slot_y(gy, dy);
                    for dx in 0..k {
                        let x = geom.slot_x(gx, dx);
                        row[j] = grad_out.at(0, ci, y, x) / counts.at(0, 0, y, x);
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(grad_patches)
}

/// Dense overlapping patch extraction: one `k` x `k` patch per pixel
/// (stride 1, reflect boundary). Output rows are patches in row-major grid
/// order; columns are (channel, dy, dx) in row-major order.
pub fn unfold_patches(input: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!("unfold_patches requires odd k, got {k}")));
    }
    let (_, _, h, w) = input.shape();
    let geom = PatchGeom::new(h, w, k, 1)?;
    unfold_general(input, &geom)
}

/// Gradient of [`unfold_patches`] w.r.t. its input.
pub fn unfold_patches_backward(grad_patches: &Tensor, c: usize, h: usize, w: usize, k: usize) -> Result<Tensor> {
    let geom = PatchGeom::new(h, w, k, 1)?;
    unfold_adjoint(grad_patches, c, &geom)
}

/// Recompose a dense patch tensor into an image, averaging overlapping
/// contributions by per-pixel count. Inverse of [`unfold_patches`].
pub fn fold_patches(patches: &Tensor, c: usize, h: usize, w: usize, k: usize) -> Result<Tensor> {
    let geom = PatchGeom::new(h, w, k, 1)?;
    fold_general(patches, c, &geom)
}

/// Gradient of [`fold_patches`] w.r.t. the patch tensor.
pub fn fold_patches_backward(grad_out: &Tensor, k: usize) -> Result<Tensor> {
    let (_, c, h, w) = grad_out.shape();
    let geom = PatchGeom::new(h, w, k, 1)?;
    fold_general_backward(grad_out, c, &geom)
}
