//! Moving matched reference content onto the query grid.
//!
//! Two warping primitives share one patch geometry (`3s` x `3s` patches on a
//! stride-`s` grid, overlap-averaged): a hard copy that places each matched
//! source patch at its query position, and a refined variant that bilinearly
//! resamples each patch through a small per-position affine correction.

use crate::error::{CoreError, Result};
use crate::layers::{relu, relu_backward, ConvLayer, ConvLayerGrads};
use crate::matching::MatchResult;
use crate::ops::patches::{fold_general, fold_general_backward, PatchGeom};
use crate::ops::{grid_sample_bilinear, grid_sample_bilinear_backward};
use crate::tensor::Tensor;
use rand::Rng;

fn geoms(source: &Tensor, m: &MatchResult, level_scale: usize) -> Result<(PatchGeom, PatchGeom)> {
    let (b, _, sh, sw) = source.shape();
    if b != 1 {
        return Err(CoreError::InvalidArgument("warp expects batch 1".into()));
    }
    if level_scale == 0 {
        return Err(CoreError::InvalidArgument("level_scale must be positive".into()));
    }
    let expected = (m.source_grid.0 * level_scale, m.source_grid.1 * level_scale);
    if (sh, sw) != expected {
        return Err(CoreError::shape(
            "warp source extent",
            format!("{}x{}", expected.0, expected.1),
            format!("{sh}x{sw}"),
        ));
    }
    let k = 3 * level_scale;
    let tgeom = PatchGeom::new(m.query_grid.0 * level_scale, m.query_grid.1 * level_scale, k, level_scale)?;
    let sgeom = PatchGeom::new(sh, sw, k, level_scale)?;
    Ok((tgeom, sgeom))
}

/// Copy each query position's matched source patch onto the query grid,
/// averaging overlapping contributions. Output extent is the query grid
/// times `level_scale`. With an identity index map over equal grids this is
/// an exact identity.
pub fn warp_by_index(source: &Tensor, m: &MatchResult, level_scale: usize) -> Result<Tensor> {
    let (tgeom, sgeom) = geoms(source, m, level_scale)?;
    let c = source.c();
    let k = tgeom.k_eff;
    let mut patches = Tensor::zeros(1, 1, tgeom.n_patches(), c * k * k);
    for (qi, &src) in m.index_map.iter().enumerate() {
        let (py, px) = m.source_pos(src);
        let row = patches.row_mut(0, 0, qi);
        let mut j = 0;
        for ci in 0..c {
            for dy in 0..k {
                let y = sgeom.slot_y(py, dy);
                for dx in 0..k {
                    row[j] = source.at(0, ci, y, sgeom.slot_x(px, dx));
                    j += 1;
                }
            }
        }
    }
    fold_general(&patches, c, &tgeom)
}

/// Gradient of [`warp_by_index`] w.r.t. the source tensor (the index map is
/// a constant of the backward pass).
pub fn warp_by_index_backward(
    source: &Tensor,
    m: &MatchResult,
    level_scale: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (tgeom, sgeom) = geoms(source, m, level_scale)?;
    let c = source.c();
    let k = tgeom.k_eff;
    let grad_patches = fold_general_backward(grad_out, c, &tgeom)?;
    let (_, _, sh, sw) = source.shape();
    let mut grad_source = Tensor::zeros(1, c, sh, sw);
    for (qi, &src) in m.index_map.iter().enumerate() {
        let (py, px) = m.source_pos(src);
        let row = grad_patches.row(0, 0, qi);
        let mut j = 0;
        for ci in 0..c {
            for dy in 0..k {
                let y = sgeom.slot_y(py, dy);
                for dx in 0..k {
                    *grad_source.at_mut(0, ci, y, sgeom.slot_x(px, dx)) += row[j];
                    j += 1;
                }
            }
        }
    }
    Ok(grad_source)
}

/// Smooth clamp `b * tanh(x / b)`: identity-like near zero, saturating at
/// `±b`. Keeps predicted affine corrections inside a trusted range.
pub fn squash(x: f64, bound: f64) -> f64 {
    bound * (x / bound).tanh()
}

/// Derivative of [`squash`] w.r.t. `x`.
pub fn squash_deriv(x: f64, bound: f64) -> f64 {
    let t = (x / bound).tanh();
    1.0 - t * t
}

/// Saturation bounds for the six affine-correction channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineBounds {
    /// Bound for the four linear (scale/shear) entries.
    pub linear: f64,
    /// Bound for the two translation entries, in query-grid pixels.
    pub translation: f64,
}

impl Default for AffineBounds {
    fn default() -> Self {
        AffineBounds { linear: 0.5, translation: 2.0 }
    }
}

/// Channel order of the raw residual field: row-major 2x3 affine
/// `[a00, a01, tx, a10, a11, ty]`, all residuals from the identity.
pub const AFFINE_CHANNELS: usize = 6;

/// A per-query-position affine correction, stored as raw (pre-squash)
/// residuals from the identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub res: Tensor,
    pub bounds: AffineBounds,
}

impl AffineField {
    pub fn new(res: Tensor, bounds: AffineBounds) -> Result<Self> {
        if res.b() != 1 || res.c() != AFFINE_CHANNELS {
            return Err(CoreError::shape(
                "affine field",
                format!("(1, {AFFINE_CHANNELS}, _, _)"),
                format!("{:?}", res.shape()),
            ));
        }
        Ok(AffineField { res, bounds })
    }

    /// The exact identity correction over a query grid.
    pub fn identity(grid_h: usize, grid_w: usize) -> Self {
        AffineField { res: Tensor::zeros(1, AFFINE_CHANNELS, grid_h, grid_w), bounds: AffineBounds::default() }
    }

    /// Squashed affine parameters at one grid position, in channel order.
    pub fn params_at(&self, y: usize, x: usize) -> [f64; AFFINE_CHANNELS] {
        let b = |ch: usize| -> f64 {
            if ch == 2 || ch == 5 {
                self.bounds.translation
            } else {
                self.bounds.linear
            }
        };
        let mut out = [0.0; AFFINE_CHANNELS];
        for (ch, v) in out.iter_mut().enumerate() {
            *v = squash(self.res.at(0, ch, y, x), b(ch));
        }
        out
    }
}

fn check_field(field: &AffineField, m: &MatchResult) -> Result<()> {
    let (_, _, fh, fw) = field.res.shape();
    if (fh, fw) != m.query_grid {
        return Err(CoreError::shape(
            "affine field grid",
            format!("{}x{}", m.query_grid.0, m.query_grid.1),
            format!("{fh}x{fw}"),
        ));
    }
    Ok(())
}

/// Sampling coordinates for every patch slot: the hard-warp coordinate plus
/// the affine displacement `A_res * u + s * t`, where `u` is the slot offset
/// from the patch center. Shape (1, 2, N*k, k), channel 0 = x, channel 1 = y.
fn build_affine_grid(
    sgeom: &PatchGeom,
    m: &MatchResult,
    field: &AffineField,
    level_scale: usize,
) -> Tensor {
    let k = sgeom.k_eff;
    let n = m.index_map.len();
    let s = level_scale as f64;
    let center = (k as f64 - 1.0) / 2.0;
    let mut grid = Tensor::zeros(1, 2, n * k, k);
    for (qi, &src) in m.index_map.iter().enumerate() {
        let (py, px) = m.source_pos(src);
        let (qy, qx) = (qi / m.query_grid.1, qi % m.query_grid.1);
        let [a00, a01, tx, a10, a11, ty] = field.params_at(qy, qx);
        for dy in 0..k {
            let base_y = sgeom.slot_y(py, dy) as f64;
            let uy = dy as f64 - center;
            for dx in 0..k {
                let base_x = sgeom.slot_x(px, dx) as f64;
                let ux = dx as f64 - center;
                *grid.at_mut(0, 0, qi * k + dy, dx) = base_x + a00 * ux + a01 * uy + s * tx;
                *grid.at_mut(0, 1, qi * k + dy, dx) = base_y + a10 * ux + a11 * uy + s * ty;
            }
        }
    }
    grid
}

fn sampled_to_patches(sampled: &Tensor, n: usize, c: usize, k: usize) -> Tensor {
    let mut patches = Tensor::zeros(1, 1, n, c * k * k);
    for qi in 0..n {
        let row = patches.row_mut(0, 0, qi);
        let mut j = 0;
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    row[j] = sampled.at(0, ci, qi * k + dy, dx);
                    j += 1;
                }
            }
        }
    }
    patches
}

fn patches_to_sampled(patches: &Tensor, n: usize, c: usize, k: usize) -> Tensor {
    let mut sampled = Tensor::zeros(1, c, n * k, k);
    for qi in 0..n {
        let row = patches.row(0, 0, qi);
        let mut j = 0;
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    *sampled.at_mut(0, ci, qi * k + dy, dx) = row[j];
                    j += 1;
                }
            }
        }
    }
    sampled
}

/// [`warp_by_index`] refined by a per-position affine correction: each patch
/// is bilinearly resampled from the source at affinely displaced coordinates
/// before fold-averaging. A zero residual field reproduces the hard warp
/// exactly.
pub fn apply_patch_affine(
    source: &Tensor,
    m: &MatchResult,
    field: &AffineField,
    level_scale: usize,
) -> Result<Tensor> {
    let (tgeom, sgeom) = geoms(source, m, level_scale)?;
    check_field(field, m)?;
    let grid = build_affine_grid(&sgeom, m, field, level_scale);
    let sampled = grid_sample_bilinear(source, &grid)?;
    let patches = sampled_to_patches(&sampled, m.index_map.len(), source.c(), tgeom.k_eff);
    fold_general(&patches, source.c(), &tgeom)
}

/// Gradients of [`apply_patch_affine`].
pub struct PatchAffineGrads {
    pub source: Tensor,
    /// Gradient w.r.t. the raw (pre-squash) residual field.
    pub field_res: Tensor,
}

pub fn apply_patch_affine_backward(
    source: &Tensor,
    m: &MatchResult,
    field: &AffineField,
    level_scale: usize,
    grad_out: &Tensor,
) -> Result<PatchAffineGrads> {
    let (tgeom, sgeom) = geoms(source, m, level_scale)?;
    check_field(field, m)?;
    let c = source.c();
    let k = tgeom.k_eff;
    let n = m.index_map.len();
    let grid = build_affine_grid(&sgeom, m, field, level_scale);
    let grad_patches = fold_general_backward(grad_out, c, &tgeom)?;
    let grad_sampled = patches_to_sampled(&grad_patches, n, c, k);
    let grads = grid_sample_bilinear_backward(source, &grid, &grad_sampled)?;

    let s = level_scale as f64;
    let center = (k as f64 - 1.0) / 2.0;
    let (_, _, qh, qw) = field.res.shape();
    let mut grad_res = Tensor::zeros(1, AFFINE_CHANNELS, qh, qw);
    for qi in 0..n {
        let (qy, qx) = (qi / m.query_grid.1, qi % m.query_grid.1);
        let mut acc = [0.0f64; AFFINE_CHANNELS];
        for dy in 0..k {
            let uy = dy as f64 - center;
            for dx in 0..k {
                let ux = dx as f64 - center;
                let gx = grads.grid.at(0, 0, qi * k + dy, dx);
                let gy = grads.grid.at(0, 1, qi * k + dy, dx);
                acc[0] += gx * ux;
                acc[1] += gx * uy;
                acc[2] += gx * s;
                acc[3] += gy * ux;
                acc[4] += gy * uy;
                acc[5] += gy * s;
            }
        }
        for (ch, g) in acc.iter().enumerate() {
            let bound = if ch == 2 || ch == 5 { field.bounds.translation } else { field.bounds.linear };
            *grad_res.at_mut(0, ch, qy, qx) += g * squash_deriv(field.res.at(0, ch, qy, qx), bound);
        }
    }
    Ok(PatchAffineGrads { source: grads.input, field_res: grad_res })
}

/// Small convolutional head that predicts the affine correction field from
/// the upscaled input stacked with the hard-warped reference (6 channels).
/// Two stride-2 stages bring the output to the query grid; the last layer is
/// zero-initialized so an untrained head predicts the exact identity.
#[derive(Debug, Clone)]
pub struct AlignNet {
    pub layers: Vec<ConvLayer>,
    pub bounds: AffineBounds,
}

/// Intermediate activations of [`AlignNet::forward`], kept for the backward
/// pass.
pub struct AlignTape {
    inputs: Vec<Tensor>,
    relu_outs: Vec<Tensor>,
}

impl AlignNet {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            ConvLayer::init(hidden, 2 * 3, 3, 1, rng),
            ConvLayer::init(hidden, hidden, 3, 2, rng),
            ConvLayer::init(hidden, hidden, 3, 2, rng),
            ConvLayer::zeros(AFFINE_CHANNELS, hidden, 3, 1),
        ];
        AlignNet { layers, bounds: AffineBounds::default() }
    }

    /// Predict the raw residual field from a (1, 6, H, W) stack; the output
    /// grid is H/4 x W/4.
    pub fn forward(&self, input: &Tensor) -> Result<(AffineField, AlignTape)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut relu_outs = Vec::with_capacity(self.layers.len() - 1);
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(x.clone());
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = relu(&x);
                relu_outs.push(x.clone());
            }
        }
        let field = AffineField::new(x, self.bounds)?;
        Ok((field, AlignTape { inputs, relu_outs }))
    }

    /// Backpropagate a gradient w.r.t. the raw residual field; returns one
    /// gradient bundle per layer plus the gradient w.r.t. the input stack.
    pub fn backward(&self, tape: &AlignTape, grad_res: &Tensor) -> Result<(Vec<ConvLayerGrads>, Tensor)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_res.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                g = relu_backward(&tape.relu_outs[i], &g)?;
            }
            let (layer_grads, grad_in) = layer.backward(&tape.inputs[i], &g)?;
            grads.push(layer_grads);
            g = grad_in;
        }
        grads.reverse();
        Ok((grads, g))
    }
}

/// Outcome of directly optimizing an affine field against a target image.
#[derive(Debug, Clone, Copy)]
pub struct AffineOptimOutcome {
    pub initial_l2: f64,
    pub final_l2: f64,
    pub steps: usize,
}

/// Fit a residual field by gradient descent (diagonal Adam) so that the
/// affinely warped source approaches `target` in squared error. Exercises
/// the warp gradients end to end without any learned network.
pub fn optimize_patch_affine(
    source: &Tensor,
    target: &Tensor,
    m: &MatchResult,
    level_scale: usize,
    steps: usize,
    lr: f64,
) -> Result<(AffineField, AffineOptimOutcome)> {
    let mut field = AffineField::identity(m.query_grid.0, m.query_grid.1);
    let mut m1 = Tensor::zeros(1, AFFINE_CHANNELS, m.query_grid.0, m.query_grid.1);
    let mut m2 = m1.clone();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let l2 = |out: &Tensor| -> Result<f64> {
        Ok(out.sub(target)?.data().iter().map(|d| d * d).sum())
    };
    let initial_l2 = l2(&apply_patch_affine(source, m, &field, level_scale)?)?;
    let mut final_l2 = initial_l2;
    for step in 1..=steps {
        let out = apply_patch_affine(source, m, &field, level_scale)?;
        final_l2 = l2(&out)?;
        let grad_out = out.sub(target)?.scale(2.0);
        let grads = apply_patch_affine_backward(source, m, &field, level_scale, &grad_out)?;
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for i in 0..m1.numel() {
            let g = grads.field_res.data()[i];
            m1.data_mut()[i] = b1 * m1.data()[i] + (1.0 - b1) * g;
            m2.data_mut()[i] = b2 * m2.data()[i] + (1.0 - b2) * g * g;
            let mh = m1.data()[i] / bc1;
            let vh = m2.data()[i] / bc2;
            field.res.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok((field, AffineOptimOutcome { initial_l2, final_l2, steps }))
}
