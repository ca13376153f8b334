//! Central-difference verification of every differentiable building block,
//! plus the assembled model. Each check builds random instances, computes
//! analytic gradients, and probes random coordinates with a symmetric
//! finite-difference quotient.

use crate::error::Result;
use crate::fusion::{
    fuse_with_gate, fuse_with_gate_backward, hf_residual, hf_residual_backward, FusionMode,
    FusionSite, ImageFuse,
};
use crate::layers::{relu, relu_backward, sigmoid, sigmoid_backward, ConvLayer};
use crate::losses::{
    confidence_weighted_distance, contextual_distance, embed_features, embed_features_backward,
    fidelity_loss, l1_loss, reconstruction_loss, sra_loss, LossMode,
};
use crate::matching::{match_features, match_features_backward, MatchResult};
use crate::model::{
    backward, forward, init_params, LossSignal, ModelConfig, ModelParams, SearchMode, SearchSpec,
};
use crate::ops::{
    bicubic_resize, bicubic_resize_backward, gaussian_blur3x3, gaussian_blur3x3_backward,
    grid_sample_bilinear, grid_sample_bilinear_backward, resize_bilinear, resize_bilinear_backward,
    unfold_patches, unfold_patches_backward, ResizeFactor,
};
use crate::tensor::Tensor;
use crate::warp::{
    apply_patch_affine, apply_patch_affine_backward, squash, squash_deriv, warp_by_index,
    warp_by_index_backward, AffineBounds, AffineField, AlignNet, AFFINE_CHANNELS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for per-operation probes.
const OP_EPS: f64 = 1e-5;
/// The assembled model stacks several strongly curved nonlinearities, so the
/// truncation error of a 1e-5 step is no longer negligible there.
const MODEL_EPS: f64 = 1e-6;
/// Tolerance for primitive kernels.
const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for composite operations and the assembled model.
const COMPOSITE_TOL: f64 = 1e-3;
/// Random instances per check.
const INSTANCES: usize = 20;

/// Outcome of one check: the worst relative error seen across all instances
/// and probed coordinates.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }
}

/// Relative disagreement with a floor on the denominator so that two
/// near-zero gradients compare as equal.
pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn rand_signal(like: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let (b, c, h, w) = like.shape();
    Tensor::rand_uniform(b, c, h, w, -1.0, 1.0, rng)
}

fn pick(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k.min(len) {
        let i = rng.gen_range(0..len);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Two central-difference quotients at probe steps `eps` and `eps/2` must
/// agree this closely for the coordinate to count. Smooth points converge far
/// below this (truncation shrinks with the square of the step); a probe that
/// straddles a measure-zero crease -- a ReLU kink, a bilinear cell edge, a
/// nearest-neighbour flip -- shows a scale-dependent quotient and is skipped
/// rather than misread as a gradient bug. A wrong analytic gradient still
/// fails: its converged probes disagree with it at every coordinate.
const FD_CONSISTENCY: f64 = 1e-4;

fn central(base: &Tensor, i: usize, eps: f64, loss: &impl Fn(&Tensor) -> f64) -> f64 {
    let mut plus = base.clone();
    plus.data_mut()[i] += eps;
    let mut minus = base.clone();
    minus.data_mut()[i] -= eps;
    (loss(&plus) - loss(&minus)) / (2.0 * eps)
}

/// Probe `indices` of `base` with central differences of `loss` and return
/// the worst relative error against the analytic gradient, skipping probes
/// that fail the two-scale consistency check. If every probe sits on a
/// crease, the best-converged one still counts.
fn fd_worst(
    base: &Tensor,
    indices: &[usize],
    analytic: &Tensor,
    eps: f64,
    loss: impl Fn(&Tensor) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut fallback: Option<(f64, f64)> = None;
    let mut any_converged = false;
    for &i in indices {
        let fd1 = central(base, i, eps, &loss);
        let fd2 = central(base, i, eps / 2.0, &loss);
        let consistency = rel_err(fd1, fd2);
        let err = rel_err(fd2, analytic.data()[i]);
        if consistency <= FD_CONSISTENCY {
            any_converged = true;
            worst = worst.max(err);
        } else if fallback.map_or(true, |(c, _)| consistency < c) {
            fallback = Some((consistency, err));
        }
    }
    if !any_converged {
        if let Some((_, err)) = fallback {
            worst = worst.max(err);
        }
    }
    worst
}

fn with_weight(layer: &ConvLayer, w: &Tensor) -> ConvLayer {
    let mut l = layer.clone();
    l.weight = w.clone();
    l
}

fn with_bias(layer: &ConvLayer, b: &Tensor) -> ConvLayer {
    let mut l = layer.clone();
    l.bias = b.clone();
    l
}

fn conv_instance(rng: &mut ChaCha8Rng, stride: usize) -> f64 {
    let x = Tensor::rand_uniform(1, 3, 8, 10, -1.0, 1.0, rng);
    let mut layer = ConvLayer::init(4, 3, 3, stride, rng);
    for v in layer.bias.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let out = layer.forward(&x).expect("conv forward");
    let r = rand_signal(&out, rng);
    let (grads, gin) = layer.backward(&x, &r).expect("conv backward");
    let mut worst = fd_worst(&x, &pick(rng, x.numel(), 6), &gin, OP_EPS, |t| {
        weighted_sum(&layer.forward(t).expect("conv forward"), &r)
    });
    worst = worst.max(fd_worst(
        &layer.weight,
        &pick(rng, layer.weight.numel(), 6),
        &grads.weight,
        OP_EPS,
        |t| weighted_sum(&with_weight(&layer, t).forward(&x).expect("conv forward"), &r),
    ));
    worst.max(fd_worst(&layer.bias, &pick(rng, layer.bias.numel(), 2), &grads.bias, OP_EPS, |t| {
        weighted_sum(&with_bias(&layer, t).forward(&x).expect("conv forward"), &r)
    }))
}

fn bicubic_instance(rng: &mut ChaCha8Rng, factor: ResizeFactor) -> f64 {
    let x = Tensor::rand_uniform(1, 2, 8, 8, -1.0, 1.0, rng);
    let out = bicubic_resize(&x, factor).expect("resize");
    let r = rand_signal(&out, rng);
    let gin = bicubic_resize_backward(&r, factor, 8, 8).expect("resize backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&bicubic_resize(t, factor).expect("resize"), &r)
    })
}

fn bilinear_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor::rand_uniform(1, 2, 8, 6, -1.0, 1.0, rng);
    let out = resize_bilinear(&x, 5, 7).expect("bilinear");
    let r = rand_signal(&out, rng);
    let gin = resize_bilinear_backward(&r, 8, 6).expect("bilinear backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&resize_bilinear(t, 5, 7).expect("bilinear"), &r)
    })
}

fn blur_instance(rng: &mut ChaCha8Rng) -> f64 {
    let sigma = if rng.gen_bool(0.5) { 0.5 } else { 1.0 };
    let x = Tensor::rand_uniform(1, 3, 7, 7, -1.0, 1.0, rng);
    let out = gaussian_blur3x3(&x, sigma).expect("blur");
    let r = rand_signal(&out, rng);
    let gin = gaussian_blur3x3_backward(&r, sigma).expect("blur backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&gaussian_blur3x3(t, sigma).expect("blur"), &r)
    })
}

/// Grid coordinates that sit well inside a bilinear cell, so a +-eps probe
/// never crosses the piecewise boundary at integer coordinates.
fn off_kink_grid(h: usize, w: usize, gh: usize, gw: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(1, 2, gh, gw, |_, c, _, _| {
        let n = if c == 0 { w } else { h };
        rng.gen_range(0..n - 1) as f64 + rng.gen_range(0.25..0.75)
    })
}

fn grid_sample_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor::rand_uniform(1, 2, 7, 7, -1.0, 1.0, rng);
    let grid = off_kink_grid(7, 7, 5, 4, rng);
    let out = grid_sample_bilinear(&x, &grid).expect("grid sample");
    let r = rand_signal(&out, rng);
    let grads = grid_sample_bilinear_backward(&x, &grid, &r).expect("grid sample backward");
    let worst = fd_worst(&x, &pick(rng, x.numel(), 6), &grads.input, OP_EPS, |t| {
        weighted_sum(&grid_sample_bilinear(t, &grid).expect("grid sample"), &r)
    });
    worst.max(fd_worst(&grid, &pick(rng, grid.numel(), 6), &grads.grid, OP_EPS, |t| {
        weighted_sum(&grid_sample_bilinear(&x, t).expect("grid sample"), &r)
    }))
}

fn unfold_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor::rand_uniform(1, 3, 6, 5, -1.0, 1.0, rng);
    let out = unfold_patches(&x, 3).expect("unfold");
    let r = rand_signal(&out, rng);
    let gin = unfold_patches_backward(&r, 3, 6, 5, 3).expect("unfold backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&unfold_patches(t, 3).expect("unfold"), &r)
    })
}

fn fold_instance(rng: &mut ChaCha8Rng) -> f64 {
    use crate::ops::{fold_patches, fold_patches_backward};
    let patches = Tensor::rand_uniform(1, 1, 30, 2 * 9, -1.0, 1.0, rng);
    let out = fold_patches(&patches, 2, 6, 5, 3).expect("fold");
    let r = rand_signal(&out, rng);
    let gin = fold_patches_backward(&r, 3).expect("fold backward");
    fd_worst(&patches, &pick(rng, patches.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&fold_patches(t, 2, 6, 5, 3).expect("fold"), &r)
    })
}

/// Values bounded away from zero so relu probes never cross the kink.
fn off_zero(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(1, 2, 5, 5, |_, _, _, _| {
        let mag = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn relu_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = off_zero(rng);
    let out = relu(&x);
    let r = rand_signal(&out, rng);
    let gin = relu_backward(&out, &r).expect("relu backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| weighted_sum(&relu(t), &r))
}

fn sigmoid_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor::rand_uniform(1, 2, 5, 5, -2.0, 2.0, rng);
    let out = sigmoid(&x);
    let r = rand_signal(&out, rng);
    let gin = sigmoid_backward(&out, &r).expect("sigmoid backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| weighted_sum(&sigmoid(t), &r))
}

fn squash_instance(rng: &mut ChaCha8Rng) -> f64 {
    let bound = if rng.gen_bool(0.5) { 0.5 } else { 2.0 };
    let x = Tensor::rand_uniform(1, 1, 4, 8, -1.5, 1.5, rng);
    let r = rand_signal(&x, rng);
    let analytic = Tensor::from_fn(1, 1, 4, 8, |_, _, y, xx| {
        r.at(0, 0, y, xx) * squash_deriv(x.at(0, 0, y, xx), bound)
    });
    fd_worst(&x, &pick(rng, x.numel(), 8), &analytic, OP_EPS, |t| {
        weighted_sum(&t.map(|v| squash(v, bound)), &r)
    })
}

/// Cosine-distance matrix between per-position channel vectors, used both as
/// an independent recomputation and to verify selection margins.
fn cos_dist_rows(x: &Tensor) -> Vec<Vec<f64>> {
    let (_, c, h, w) = x.shape();
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            rows.push((0..c).map(|ci| x.at(0, ci, y, xx)).collect());
        }
    }
    rows
}

/// Worst argmin margin between the embedded positions of two images; loss
/// instances resample until this is comfortable, so nearest-feature
/// selections cannot flip under probe steps.
fn embedded_gap(layer: &ConvLayer, x: &Tensor, y: &Tensor) -> f64 {
    let ex = relu(&layer.forward(x).expect("conv"));
    let ey = relu(&layer.forward(y).expect("conv"));
    min_gap_to_best(&cos_dist_rows(&ex), &cos_dist_rows(&ey))
}

fn min_gap_to_best(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let mut min_gap = f64::INFINITY;
    for xv in xs {
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        for yv in ys {
            let dot: f64 = xv.iter().zip(yv).map(|(a, b)| a * b).sum();
            let nx: f64 = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = 1.0 - dot / (nx * ny).max(1e-8);
            if d < best {
                second = best;
                best = d;
            } else if d < second {
                second = d;
            }
        }
        min_gap = min_gap.min(second - best);
    }
    min_gap
}

fn matching_instance(rng: &mut ChaCha8Rng) -> f64 {
    // Resample until every query's best match has a clear margin; +-eps
    // probes must not flip any argmax.
    let (lr_feat, ref_feat, m) = loop {
        let lr_feat = Tensor::rand_uniform(1, 3, 6, 6, 0.0, 1.0, rng);
        let ref_feat = Tensor::rand_uniform(1, 3, 6, 6, 0.0, 1.0, rng);
        let q = unfold_patches(&lr_feat, 3).expect("unfold");
        let rfp = unfold_patches(&ref_feat, 3).expect("unfold");
        let s = crate::matching::cosine_similarity_matrix(&q, &rfp).expect("similarity");
        let (_, _, n, src) = s.shape();
        let mut ok = true;
        for i in 0..n {
            let row = s.row(0, 0, i);
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for j in 0..src {
                if row[j] > best {
                    second = best;
                    best = row[j];
                } else if row[j] > second {
                    second = row[j];
                }
            }
            if best - second < 1e-3 {
                ok = false;
                break;
            }
        }
        if ok {
            let m = match_features(&lr_feat, &ref_feat).expect("match");
            break (lr_feat, ref_feat, m);
        }
    };
    let d_conf: Vec<f64> = (0..m.confidence.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (dq, dr) = match_features_backward(&lr_feat, &ref_feat, &m, &d_conf).expect("match backward");
    let loss = |lr_t: &Tensor, ref_t: &Tensor| -> f64 {
        let mm = match_features(lr_t, ref_t).expect("match");
        mm.confidence.iter().zip(&d_conf).map(|(c, g)| c * g).sum()
    };
    let worst = fd_worst(&lr_feat, &pick(rng, lr_feat.numel(), 6), &dq, OP_EPS, |t| {
        loss(t, &ref_feat)
    });
    worst.max(fd_worst(&ref_feat, &pick(rng, ref_feat.numel(), 6), &dr, OP_EPS, |t| {
        loss(&lr_feat, t)
    }))
}

fn rand_match(rng: &mut ChaCha8Rng, qh: usize, qw: usize, sh: usize, sw: usize) -> MatchResult {
    MatchResult {
        index_map: (0..qh * qw).map(|_| rng.gen_range(0..sh * sw)).collect(),
        confidence: (0..qh * qw).map(|_| rng.gen_range(0.0..1.0)).collect(),
        query_grid: (qh, qw),
        source_grid: (sh, sw),
    }
}

fn warp_instance(rng: &mut ChaCha8Rng) -> f64 {
    let s = if rng.gen_bool(0.5) { 1 } else { 2 };
    let m = rand_match(rng, 3, 4, 3, 3);
    let source = Tensor::rand_uniform(1, 2, 3 * s, 3 * s, -1.0, 1.0, rng);
    let out = warp_by_index(&source, &m, s).expect("warp");
    let r = rand_signal(&out, rng);
    let gin = warp_by_index_backward(&source, &m, s, &r).expect("warp backward");
    fd_worst(&source, &pick(rng, source.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&warp_by_index(t, &m, s).expect("warp"), &r)
    })
}

fn patch_affine_instance(rng: &mut ChaCha8Rng) -> f64 {
    let s = if rng.gen_bool(0.5) { 1 } else { 2 };
    let m = rand_match(rng, 3, 3, 3, 3);
    let source = Tensor::rand_uniform(1, 2, 3 * s, 3 * s, -1.0, 1.0, rng);
    let res = Tensor::rand_uniform(1, AFFINE_CHANNELS, 3, 3, -0.35, 0.35, rng);
    let field = AffineField::new(res, AffineBounds::default()).expect("field");
    let out = apply_patch_affine(&source, &m, &field, s).expect("affine warp");
    let r = rand_signal(&out, rng);
    let grads = apply_patch_affine_backward(&source, &m, &field, s, &r).expect("affine backward");
    let worst = fd_worst(&source, &pick(rng, source.numel(), 6), &grads.source, OP_EPS, |t| {
        weighted_sum(&apply_patch_affine(t, &m, &field, s).expect("affine warp"), &r)
    });
    worst.max(fd_worst(
        &field.res,
        &pick(rng, field.res.numel(), 6),
        &grads.field_res,
        OP_EPS,
        |t| {
            let f = AffineField::new(t.clone(), field.bounds).expect("field");
            weighted_sum(&apply_patch_affine(&source, &m, &f, s).expect("affine warp"), &r)
        },
    ))
}

fn fuse_gate_instance(rng: &mut ChaCha8Rng) -> f64 {
    let base = Tensor::rand_uniform(1, 3, 5, 6, -1.0, 1.0, rng);
    let merged = Tensor::rand_uniform(1, 3, 5, 6, -1.0, 1.0, rng);
    let gate = Tensor::rand_uniform(1, 1, 5, 6, 0.05, 0.95, rng);
    let out = fuse_with_gate(&base, &merged, &gate).expect("fuse");
    let r = rand_signal(&out, rng);
    let (gb, gm, gg) = fuse_with_gate_backward(&merged, &gate, &r).expect("fuse backward");
    let mut worst = fd_worst(&base, &pick(rng, base.numel(), 5), &gb, OP_EPS, |t| {
        weighted_sum(&fuse_with_gate(t, &merged, &gate).expect("fuse"), &r)
    });
    worst = worst.max(fd_worst(&merged, &pick(rng, merged.numel(), 5), &gm, OP_EPS, |t| {
        weighted_sum(&fuse_with_gate(&base, t, &gate).expect("fuse"), &r)
    }));
    worst.max(fd_worst(&gate, &pick(rng, gate.numel(), 5), &gg, OP_EPS, |t| {
        weighted_sum(&fuse_with_gate(&base, &merged, t).expect("fuse"), &r)
    }))
}

fn pick_mode(rng: &mut ChaCha8Rng) -> FusionMode {
    match rng.gen_range(0..3) {
        0 => FusionMode::Adaptive,
        1 => FusionMode::Soft,
        _ => FusionMode::Sum,
    }
}

fn fusion_site_instance(rng: &mut ChaCha8Rng) -> f64 {
    let mode = pick_mode(rng);
    let site = FusionSite::init(4, 2, rng);
    let f_sr = Tensor::rand_uniform(1, 4, 6, 6, -1.0, 1.0, rng);
    let f_ref = Tensor::rand_uniform(1, 4, 6, 6, -1.0, 1.0, rng);
    let conf = Tensor::rand_uniform(1, 1, 6, 6, 0.05, 0.95, rng);
    let (out, tape) = site.forward(&f_sr, &f_ref, &conf, mode).expect("site forward");
    let r = rand_signal(&out, rng);
    let grads = site.backward(&tape, &r).expect("site backward");
    let run = |site: &FusionSite, f_sr: &Tensor, f_ref: &Tensor, conf: &Tensor| -> f64 {
        weighted_sum(&site.forward(f_sr, f_ref, conf, mode).expect("site forward").0, &r)
    };
    let mut worst = fd_worst(&f_sr, &pick(rng, f_sr.numel(), 5), &grads.f_sr, OP_EPS, |t| {
        run(&site, t, &f_ref, &conf)
    });
    worst = worst.max(fd_worst(&f_ref, &pick(rng, f_ref.numel(), 5), &grads.f_ref, OP_EPS, |t| {
        run(&site, &f_sr, t, &conf)
    }));
    worst = worst.max(fd_worst(&conf, &pick(rng, conf.numel(), 5), &grads.conf, OP_EPS, |t| {
        run(&site, &f_sr, &f_ref, t)
    }));
    if let Some(mg) = &grads.merge {
        worst = worst.max(fd_worst(
            &site.merge.weight,
            &pick(rng, site.merge.weight.numel(), 5),
            &mg.weight,
            OP_EPS,
            |t| {
                let mut s = site.clone();
                s.merge.weight = t.clone();
                run(&s, &f_sr, &f_ref, &conf)
            },
        ));
    }
    if let Some(gg) = &grads.gate {
        worst = worst.max(fd_worst(
            &site.gate.a.weight,
            &pick(rng, site.gate.a.weight.numel(), 4),
            &gg.a.weight,
            OP_EPS,
            |t| {
                let mut s = site.clone();
                s.gate.a.weight = t.clone();
                run(&s, &f_sr, &f_ref, &conf)
            },
        ));
        worst = worst.max(fd_worst(
            &site.gate.b.weight,
            &pick(rng, site.gate.b.weight.numel(), 4),
            &gg.b.weight,
            OP_EPS,
            |t| {
                let mut s = site.clone();
                s.gate.b.weight = t.clone();
                run(&s, &f_sr, &f_ref, &conf)
            },
        ));
    }
    worst
}

fn image_fuse_instance(rng: &mut ChaCha8Rng) -> f64 {
    let mode = pick_mode(rng);
    let fuse = ImageFuse::init(2, rng);
    let decoded = Tensor::rand_uniform(1, 3, 6, 6, -1.0, 1.0, rng);
    let hf = Tensor::rand_uniform(1, 3, 6, 6, -0.5, 0.5, rng);
    let conf = Tensor::rand_uniform(1, 1, 6, 6, 0.05, 0.95, rng);
    let (out, tape) = fuse.forward(&decoded, &hf, &conf, mode).expect("image fuse");
    let r = rand_signal(&out, rng);
    let grads = fuse.backward(&tape, &r).expect("image fuse backward");
    let run = |fuse: &ImageFuse, d: &Tensor, h: &Tensor, c: &Tensor| -> f64 {
        weighted_sum(&fuse.forward(d, h, c, mode).expect("image fuse").0, &r)
    };
    let mut worst = fd_worst(&decoded, &pick(rng, decoded.numel(), 5), &grads.decoded, OP_EPS, |t| {
        run(&fuse, t, &hf, &conf)
    });
    worst = worst.max(fd_worst(&hf, &pick(rng, hf.numel(), 5), &grads.hf_aligned, OP_EPS, |t| {
        run(&fuse, &decoded, t, &conf)
    }));
    worst = worst.max(fd_worst(&conf, &pick(rng, conf.numel(), 5), &grads.conf, OP_EPS, |t| {
        run(&fuse, &decoded, &hf, t)
    }));
    if let Some(gg) = &grads.gate {
        worst = worst.max(fd_worst(
            &fuse.gate.a.weight,
            &pick(rng, fuse.gate.a.weight.numel(), 4),
            &gg.a.weight,
            OP_EPS,
            |t| {
                let mut f = fuse.clone();
                f.gate.a.weight = t.clone();
                run(&f, &decoded, &hf, &conf)
            },
        ));
    }
    worst
}

fn hf_residual_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, rng);
    let out = hf_residual(&x).expect("hf");
    let r = rand_signal(&out, rng);
    let gin = hf_residual_backward(&r).expect("hf backward");
    fd_worst(&x, &pick(rng, x.numel(), 8), &gin, OP_EPS, |t| {
        weighted_sum(&hf_residual(t).expect("hf"), &r)
    })
}

fn align_net_instance(rng: &mut ChaCha8Rng) -> f64 {
    let mut net = AlignNet::init(4, rng);
    // The prediction head initializes to zero (identity field); randomize
    // every layer so gradients actually flow to all of them.
    for layer in &mut net.layers {
        for v in layer.weight.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in layer.bias.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let x = Tensor::rand_uniform(1, 6, 8, 8, -1.0, 1.0, rng);
    let (field, tape) = net.forward(&x).expect("align forward");
    let r = rand_signal(&field.res, rng);
    let (layer_grads, gin) = net.backward(&tape, &r).expect("align backward");
    let run = |net: &AlignNet, x: &Tensor| -> f64 {
        weighted_sum(&net.forward(x).expect("align forward").0.res, &r)
    };
    let mut worst =
        fd_worst(&x, &pick(rng, x.numel(), 5), &gin, OP_EPS, |t| run(&net, t));
    for (li, lg) in layer_grads.iter().enumerate() {
        worst = worst.max(fd_worst(
            &net.layers[li].weight,
            &pick(rng, net.layers[li].weight.numel(), 3),
            &lg.weight,
            OP_EPS,
            |t| {
                let mut n = net.clone();
                n.layers[li].weight = t.clone();
                run(&n, &x)
            },
        ));
    }
    worst
}

fn embed_instance(rng: &mut ChaCha8Rng) -> f64 {
    let layer = ConvLayer::init(4, 3, 3, 1, rng);
    let img = Tensor::rand_uniform(1, 3, 6, 6, 0.0, 1.0, rng);
    let (feat, tape) = embed_features(&layer, &img).expect("embed");
    let r = rand_signal(&feat, rng);
    let (grads, gin) = embed_features_backward(&layer, &tape, &r).expect("embed backward");
    let worst = fd_worst(&img, &pick(rng, img.numel(), 5), &gin, OP_EPS, |t| {
        weighted_sum(&embed_features(&layer, t).expect("embed").0, &r)
    });
    worst.max(fd_worst(
        &layer.weight,
        &pick(rng, layer.weight.numel(), 5),
        &grads.weight,
        OP_EPS,
        |t| weighted_sum(&embed_features(&with_weight(&layer, t), &img).expect("embed").0, &r),
    ))
}

fn l1_instance(rng: &mut ChaCha8Rng) -> f64 {
    let a = Tensor::rand_uniform(1, 2, 5, 5, 0.0, 1.0, rng);
    // Keep differences bounded away from zero: the mean-absolute loss has a
    // kink at exact ties.
    let b = Tensor::from_fn(1, 2, 5, 5, |_, c, y, x| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        a.at(0, c, y, x) + sign * rng.gen_range(0.05..0.5)
    });
    let (_, grad) = l1_loss(&a, &b).expect("l1");
    fd_worst(&a, &pick(rng, a.numel(), 8), &grad, OP_EPS, |t| {
        l1_loss(t, &b).expect("l1").0
    })
}

fn contextual_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = loop {
        let x = Tensor::rand_uniform(1, 3, 4, 4, 0.1, 1.0, rng);
        let y = Tensor::rand_uniform(1, 3, 4, 4, 0.1, 1.0, rng);
        if min_gap_to_best(&cos_dist_rows(&x), &cos_dist_rows(&y)) > 1e-3 {
            break (x, y);
        }
    };
    let (_, grads) = contextual_distance(&x, &y).expect("contextual");
    let worst = fd_worst(&x, &pick(rng, x.numel(), 6), &grads.x, OP_EPS, |t| {
        contextual_distance(t, &y).expect("contextual").0
    });
    worst.max(fd_worst(&y, &pick(rng, y.numel(), 6), &grads.y, OP_EPS, |t| {
        contextual_distance(&x, t).expect("contextual").0
    }))
}

fn weighted_distance_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (x, y) = loop {
        let x = Tensor::rand_uniform(1, 3, 4, 4, 0.1, 1.0, rng);
        let y = Tensor::rand_uniform(1, 3, 3, 3, 0.1, 1.0, rng);
        if min_gap_to_best(&cos_dist_rows(&x), &cos_dist_rows(&y)) > 1e-3 {
            break (x, y);
        }
    };
    let c: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..0.9)).collect();
    let wd = confidence_weighted_distance(&x, &y, &c).expect("weighted distance");
    let mut worst = fd_worst(&x, &pick(rng, x.numel(), 6), &wd.grad_x, OP_EPS, |t| {
        confidence_weighted_distance(t, &y, &c).expect("weighted distance").value
    });
    worst = worst.max(fd_worst(&y, &pick(rng, y.numel(), 6), &wd.grad_y, OP_EPS, |t| {
        confidence_weighted_distance(&x, t, &c).expect("weighted distance").value
    }));
    // Probe the confidence weights directly.
    let grad_c = &wd.grad_c;
    let c_fd = |i: usize, eps: f64| -> f64 {
        let mut plus = c.clone();
        plus[i] += eps;
        let mut minus = c.clone();
        minus[i] -= eps;
        (confidence_weighted_distance(&x, &y, &plus).expect("weighted distance").value
            - confidence_weighted_distance(&x, &y, &minus).expect("weighted distance").value)
            / (2.0 * eps)
    };
    for &i in &pick(rng, c.len(), 6) {
        let fd1 = c_fd(i, OP_EPS);
        let fd2 = c_fd(i, OP_EPS / 2.0);
        if rel_err(fd1, fd2) <= FD_CONSISTENCY {
            worst = worst.max(rel_err(fd2, grad_c[i]));
        }
    }
    worst
}

fn fidelity_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (layer, x, reference) = loop {
        let layer = ConvLayer::init(4, 3, 3, 1, rng);
        let x = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, rng);
        let reference = Tensor::rand_uniform(1, 3, 6, 6, 0.0, 1.0, rng);
        if embedded_gap(&layer, &x, &reference) > 1e-3 {
            break (layer, x, reference);
        }
    };
    // Confidences inside (0, 1): the clamp is linear there, so the
    // subgradient choice at the boundary never enters the probe.
    let conf = Tensor::rand_uniform(1, 1, 4, 4, 0.1, 0.9, rng);
    let fid = fidelity_loss(&x, &reference, &conf, &layer).expect("fidelity");
    let mut worst = fd_worst(&x, &pick(rng, x.numel(), 5), &fid.grad_x, OP_EPS, |t| {
        fidelity_loss(t, &reference, &conf, &layer).expect("fidelity").value
    });
    worst = worst.max(fd_worst(&conf, &pick(rng, conf.numel(), 5), &fid.grad_conf, OP_EPS, |t| {
        fidelity_loss(&x, &reference, t, &layer).expect("fidelity").value
    }));
    if let Some(embed) = &fid.embed {
        worst = worst.max(fd_worst(
            &layer.weight,
            &pick(rng, layer.weight.numel(), 5),
            &embed.weight,
            OP_EPS,
            |t| fidelity_loss(&x, &reference, &conf, &with_weight(&layer, t)).expect("fidelity").value,
        ));
    }
    worst
}

fn reconstruction_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (layer, sr, hr) = loop {
        let layer = ConvLayer::init(4, 3, 3, 1, rng);
        let sr = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, rng);
        let hr = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, rng);
        if embedded_gap(&layer, &sr, &hr) > 1e-3 {
            break (layer, sr, hr);
        }
    };
    let rec = reconstruction_loss(&sr, &hr, &layer, LossMode::Full).expect("reconstruction");
    let mut worst = fd_worst(&sr, &pick(rng, sr.numel(), 6), &rec.grad_sr, OP_EPS, |t| {
        reconstruction_loss(t, &hr, &layer, LossMode::Full).expect("reconstruction").value
    });
    if let Some(embed) = &rec.embed {
        worst = worst.max(fd_worst(
            &layer.weight,
            &pick(rng, layer.weight.numel(), 5),
            &embed.weight,
            OP_EPS,
            |t| {
                reconstruction_loss(&sr, &hr, &with_weight(&layer, t), LossMode::Full)
                    .expect("reconstruction")
                    .value
            },
        ));
    }
    worst
}

fn sra_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (layer, sr, tele) = loop {
        let layer = ConvLayer::init(4, 3, 3, 1, rng);
        let sr = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, rng);
        let tele = Tensor::rand_uniform(1, 3, 4, 4, 0.0, 1.0, rng);
        if embedded_gap(&layer, &sr, &tele) > 1e-3 {
            break (layer, sr, tele);
        }
    };
    let wide = Tensor::rand_uniform(1, 3, 4, 4, 0.0, 1.0, rng);
    let conf = Tensor::rand_uniform(1, 1, 4, 4, 0.1, 0.9, rng);
    let lambda = 0.7;
    let loss = sra_loss(&sr, &wide, &tele, &conf, lambda, &layer).expect("sra");
    let worst = fd_worst(&sr, &pick(rng, sr.numel(), 6), &loss.grad_sr, OP_EPS, |t| {
        sra_loss(t, &wide, &tele, &conf, lambda, &layer).expect("sra").value
    });
    worst.max(fd_worst(&conf, &pick(rng, conf.numel(), 5), &loss.grad_conf, OP_EPS, |t| {
        sra_loss(&sr, &wide, &tele, t, lambda, &layer).expect("sra").value
    }))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        match_channels: 4,
        pyramid_channels: [4, 6, 8],
        backbone_channels: 8,
        backbone_blocks: 1,
        decoder_channels: [6, 4],
        align_hidden: 4,
        gate_hidden: 2,
        search: SearchSpec { mode: SearchMode::Full, tile: 8, margin: 2 },
        ..Default::default()
    }
}

/// Shift all parameters off their initialization so the alignment head does
/// not sit exactly at the identity field, where patch sampling lands on the
/// bilinear interpolation kinks at integer coordinates.
fn nudge_params(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for (_, t) in params.named_tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
    }
}

fn model_loss(params: &ModelParams, cfg: &ModelConfig, lr: &Tensor, ref_img: &Tensor) -> f64 {
    let trace = forward(params, cfg, lr, ref_img).expect("forward");
    let rec = reconstruction_loss(&trace.sr, &trace.lr_up, &params.match_enc[0], LossMode::L1)
        .expect("reconstruction");
    let fid = fidelity_loss(&trace.sr, ref_img, &trace.conf_map, &params.match_enc[0])
        .expect("fidelity");
    rec.value + 0.1 * fid.value
}

fn model_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = tiny_model_config();
    let mut params = init_params(&cfg, rng.gen());
    nudge_params(&mut params, rng);
    let lr = Tensor::rand_uniform(1, 3, 16, 16, 0.1, 0.9, rng);
    let ref_img = Tensor::rand_uniform(1, 3, 16, 16, 0.1, 0.9, rng);

    let trace = forward(&params, &cfg, &lr, &ref_img).expect("forward");
    let rec = reconstruction_loss(&trace.sr, &trace.lr_up, &params.match_enc[0], LossMode::L1)
        .expect("reconstruction");
    let fid = fidelity_loss(&trace.sr, &ref_img, &trace.conf_map, &params.match_enc[0])
        .expect("fidelity");
    let mut signal = LossSignal { grad_sr: rec.grad_sr, grad_conf: None, embed: rec.embed };
    signal.grad_sr.add_assign(&fid.grad_x.scale(0.1)).expect("grad shapes agree");
    signal.grad_conf = Some(fid.grad_conf.scale(0.1));
    signal.embed = fid.embed.map(|e| crate::layers::ConvLayerGrads {
        weight: e.weight.scale(0.1),
        bias: e.bias.scale(0.1),
    });
    let grads = backward(&params, &trace, &signal).expect("backward");

    let named_grads = grads.named_tensors();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut attempts = 0usize;
    // Re-pick coordinates whose probes straddle a crease somewhere in the
    // network (see FD_CONSISTENCY); eight converged probes per instance.
    while checked < 8 && attempts < 40 {
        attempts += 1;
        let ti = rng.gen_range(0..named_grads.len());
        let (tname, gt) = &named_grads[ti];
        let ci = rng.gen_range(0..gt.numel());
        let analytic = gt.data()[ci];
        let probe = |delta: f64| -> f64 {
            let mut p = params.clone();
            for (n, t) in p.named_tensors_mut() {
                if &n == tname {
                    t.data_mut()[ci] += delta;
                }
            }
            model_loss(&p, &cfg, &lr, &ref_img)
        };
        let fd1 = (probe(MODEL_EPS) - probe(-MODEL_EPS)) / (2.0 * MODEL_EPS);
        let fd2 = (probe(MODEL_EPS / 2.0) - probe(-MODEL_EPS / 2.0)) / MODEL_EPS;
        if rel_err(fd1, fd2) > FD_CONSISTENCY {
            continue;
        }
        checked += 1;
        worst = worst.max(rel_err(fd2, analytic));
    }
    worst
}

struct Suite {
    name: &'static str,
    tolerance: f64,
    run: fn(&mut ChaCha8Rng) -> f64,
}

const SUITES: &[Suite] = &[
    Suite { name: "conv2d_stride1", tolerance: PRIMITIVE_TOL, run: |r| conv_instance(r, 1) },
    Suite { name: "conv2d_stride2", tolerance: PRIMITIVE_TOL, run: |r| conv_instance(r, 2) },
    Suite { name: "bicubic_up2", tolerance: PRIMITIVE_TOL, run: |r| bicubic_instance(r, ResizeFactor::Up2) },
    Suite { name: "bicubic_down2", tolerance: PRIMITIVE_TOL, run: |r| bicubic_instance(r, ResizeFactor::Down2) },
    Suite { name: "resize_bilinear", tolerance: PRIMITIVE_TOL, run: bilinear_instance },
    Suite { name: "gaussian_blur", tolerance: PRIMITIVE_TOL, run: blur_instance },
    Suite { name: "grid_sample", tolerance: PRIMITIVE_TOL, run: grid_sample_instance },
    Suite { name: "unfold_patches", tolerance: PRIMITIVE_TOL, run: unfold_instance },
    Suite { name: "fold_patches", tolerance: PRIMITIVE_TOL, run: fold_instance },
    Suite { name: "relu", tolerance: PRIMITIVE_TOL, run: relu_instance },
    Suite { name: "sigmoid", tolerance: PRIMITIVE_TOL, run: sigmoid_instance },
    Suite { name: "affine_squash", tolerance: PRIMITIVE_TOL, run: squash_instance },
    Suite { name: "match_confidence", tolerance: COMPOSITE_TOL, run: matching_instance },
    Suite { name: "warp_by_index", tolerance: PRIMITIVE_TOL, run: warp_instance },
    Suite { name: "patch_affine", tolerance: COMPOSITE_TOL, run: patch_affine_instance },
    Suite { name: "fuse_with_gate", tolerance: PRIMITIVE_TOL, run: fuse_gate_instance },
    Suite { name: "fusion_site", tolerance: COMPOSITE_TOL, run: fusion_site_instance },
    Suite { name: "image_fuse", tolerance: COMPOSITE_TOL, run: image_fuse_instance },
    Suite { name: "hf_residual", tolerance: PRIMITIVE_TOL, run: hf_residual_instance },
    Suite { name: "align_net", tolerance: COMPOSITE_TOL, run: align_net_instance },
    Suite { name: "embed_features", tolerance: PRIMITIVE_TOL, run: embed_instance },
    Suite { name: "l1_loss", tolerance: PRIMITIVE_TOL, run: l1_instance },
    Suite { name: "contextual_distance", tolerance: COMPOSITE_TOL, run: contextual_instance },
    Suite { name: "weighted_distance", tolerance: COMPOSITE_TOL, run: weighted_distance_instance },
    Suite { name: "fidelity_loss", tolerance: COMPOSITE_TOL, run: fidelity_instance },
    Suite { name: "reconstruction_loss", tolerance: COMPOSITE_TOL, run: reconstruction_instance },
    Suite { name: "sra_loss", tolerance: COMPOSITE_TOL, run: sra_instance },
    Suite { name: "model_end_to_end", tolerance: COMPOSITE_TOL, run: model_instance },
];

/// Names of all checks, in execution order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

/// Run one named check over its random instances.
pub fn run_one(name: &str, seed: u64) -> Result<CheckResult> {
    let suite = SUITES
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| crate::error::CoreError::InvalidArgument(format!("unknown check {name}")))?;
    Ok(run_suite(suite, seed))
}

fn run_suite(suite: &Suite, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(suite.name));
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        worst = worst.max((suite.run)(&mut rng));
    }
    CheckResult {
        name: suite.name,
        instances: INSTANCES,
        max_rel_err: worst,
        tolerance: suite.tolerance,
    }
}

fn fnv(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Run every check with instance streams derived from `seed`.
pub fn run_all(seed: u64) -> CheckReport {
    CheckReport { results: SUITES.iter().map(|s| run_suite(s, seed)).collect() }
}
