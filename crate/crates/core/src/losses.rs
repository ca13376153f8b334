//! Training objectives: blurred-L1 reconstruction with a contextual feature
//! term, confidence-weighted fidelity against the reference, and the
//! self-supervised adaptation objective used when no ground truth exists.

use crate::error::{CoreError, Result};
use crate::layers::{relu, relu_backward, ConvLayer, ConvLayerGrads};
use crate::ops::{
    bicubic_resize, bicubic_resize_backward, gaussian_blur3x3, gaussian_blur3x3_backward,
    resize_bilinear, resize_bilinear_backward, ResizeFactor,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Sigma of the anti-ringing blur applied before the L1 reconstruction term.
pub const REC_BLUR_SIGMA: f64 = 0.5;
/// Confidence mass below which the fidelity loss is defined as zero.
pub const FIDELITY_MASS_EPS: f64 = 1e-8;
/// Feature norms below this are treated as unmatched (distance 1, no grad).
const NORM_EPS: f64 = 1e-8;

/// Which reconstruction objective a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Plain mean absolute error against the target.
    L1,
    /// Blurred L1 plus the contextual feature term.
    Full,
}

/// Mean absolute error and its gradient w.r.t. the first argument (the
/// gradient w.r.t. the second is its negation).
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    a.check_same_shape(b, "l1_loss")?;
    let n = a.numel() as f64;
    let mut grad = Tensor::zeros(a.b(), a.c(), a.h(), a.w());
    let mut total = 0.0;
    for (g, (&x, &y)) in grad.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
        let d = x - y;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// Feature-vector view of a (1, C, H, W) map: H*W positions of C values.
fn position_vectors(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let (_, c, h, w) = t.shape();
    let n = h * w;
    let mut vecs = vec![0.0; n * c];
    for ci in 0..c {
        let plane = t.plane(0, ci);
        for (i, &v) in plane.iter().enumerate() {
            vecs[i * c + ci] = v;
        }
    }
    (n, c, vecs)
}

fn vec_norms(vecs: &[f64], n: usize, c: usize) -> Vec<f64> {
    (0..n)
        .map(|i| vecs[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

struct NearestDistances {
    /// Per x-position minimal cosine distance `1 - cos`.
    deltas: Vec<f64>,
    /// Index of the matched y position per x position.
    nearest: Vec<usize>,
}

fn nearest_cosine_distances(x: &Tensor, y: &Tensor) -> Result<NearestDistances> {
    if x.c() != y.c() {
        return Err(CoreError::shape("nearest_cosine_distances channels", format!("{}", x.c()), format!("{}", y.c())));
    }
    let (nx, c, xv) = position_vectors(x);
    let (ny, _, yv) = position_vectors(y);
    let xn = vec_norms(&xv, nx, c);
    let yn = vec_norms(&yv, ny, c);
    let mut deltas = Vec::with_capacity(nx);
    let mut nearest = Vec::with_capacity(nx);
    for i in 0..nx {
        let xi = &xv[i * c..(i + 1) * c];
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for j in 0..ny {
            let cos = if xn[i] < NORM_EPS || yn[j] < NORM_EPS {
                0.0
            } else {
                let dot: f64 = xi.iter().zip(&yv[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum();
                dot / (xn[i] * yn[j])
            };
            let d = 1.0 - cos;
            if d < best {
                best = d;
                best_j = j;
            }
        }
        deltas.push(best);
        nearest.push(best_j);
    }
    Ok(NearestDistances { deltas, nearest })
}

/// Backpropagate `sum_i weights[i] * delta_i` through the selected cosine
/// pairs (the argmin indices are constants of the backward pass).
fn nearest_cosine_backward(
    x: &Tensor,
    y: &Tensor,
    nearest: &[usize],
    weights: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (nx, c, xv) = position_vectors(x);
    let (ny, _, yv) = position_vectors(y);
    let xn = vec_norms(&xv, nx, c);
    let yn = vec_norms(&yv, ny, c);
    let mut dxv = vec![0.0; nx * c];
    let mut dyv = vec![0.0; ny * c];
    for i in 0..nx {
        let (j, w) = (nearest[i], weights[i]);
        if w == 0.0 || xn[i] < NORM_EPS || yn[j] < NORM_EPS {
            continue;
        }
        let xi = &xv[i * c..(i + 1) * c];
        let yj = &yv[j * c..(j + 1) * c];
        let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
        let inv = 1.0 / (xn[i] * yn[j]);
        let cos = dot * inv;
        // d(1 - cos)/dx = -(y/(|x||y|) - cos * x/|x|^2)
        for k in 0..c {
            dxv[i * c + k] -= w * (yj[k] * inv - cos * xi[k] / (xn[i] * xn[i]));
            dyv[j * c + k] -= w * (xi[k] * inv - cos * yj[k] / (yn[j] * yn[j]));
        }
    }
    let to_tensor = |v: &[f64], t: &Tensor| {
        Tensor::from_fn(1, t.c(), t.h(), t.w(), |_, ci, yy, xx| v[(yy * t.w() + xx) * t.c() + ci])
    };
    Ok((to_tensor(&dxv, x), to_tensor(&dyv, y)))
}

/// Gradients of [`contextual_distance`] w.r.t. both feature maps.
pub struct ContextualGrads {
    pub x: Tensor,
    pub y: Tensor,
}

/// Mean over x positions of the minimal cosine distance to any y position.
/// Zero iff every x feature has an exact directional twin somewhere in y,
/// regardless of spatial arrangement.
pub fn contextual_distance(x: &Tensor, y: &Tensor) -> Result<(f64, ContextualGrads)> {
    let nd = nearest_cosine_distances(x, y)?;
    let n = nd.deltas.len() as f64;
    let value = nd.deltas.iter().sum::<f64>() / n;
    let weights = vec![1.0 / n; nd.deltas.len()];
    let (dx, dy) = nearest_cosine_backward(x, y, &nd.nearest, &weights)?;
    Ok((value, ContextualGrads { x: dx, y: dy }))
}

/// Confidence-weighted mean of per-position nearest cosine distances:
/// `sum_i delta_i c_i / sum_i c_i`, defined as zero when the confidence mass
/// vanishes. Returns the value plus gradients w.r.t. the feature maps and
/// the (already clamped) confidence weights.
pub struct WeightedDistance {
    pub value: f64,
    pub grad_x: Tensor,
    pub grad_y: Tensor,
    pub grad_c: Vec<f64>,
}

pub fn confidence_weighted_distance(x: &Tensor, y: &Tensor, c: &[f64]) -> Result<WeightedDistance> {
    let nd = nearest_cosine_distances(x, y)?;
    if c.len() != nd.deltas.len() {
        return Err(CoreError::shape(
            "confidence_weighted_distance weights",
            format!("{}", nd.deltas.len()),
            format!("{}", c.len()),
        ));
    }
    let mass: f64 = c.iter().sum();
    if mass < FIDELITY_MASS_EPS {
        return Ok(WeightedDistance {
            value: 0.0,
            grad_x: Tensor::zeros(1, x.c(), x.h(), x.w()),
            grad_y: Tensor::zeros(1, y.c(), y.h(), y.w()),
            grad_c: vec![0.0; c.len()],
        });
    }
    let value = nd.deltas.iter().zip(c).map(|(d, w)| d * w).sum::<f64>() / mass;
    let weights: Vec<f64> = c.iter().map(|w| w / mass).collect();
    let (grad_x, grad_y) = nearest_cosine_backward(x, y, &nd.nearest, &weights)?;
    let grad_c: Vec<f64> = nd.deltas.iter().map(|d| (d - value) / mass).collect();
    Ok(WeightedDistance { value, grad_x, grad_y, grad_c })
}

/// First-stage feature embedding used by the contextual and fidelity terms:
/// one shared convolution plus relu.
pub struct EmbedTape {
    input: Tensor,
    out: Tensor,
}

pub fn embed_features(layer: &ConvLayer, img: &Tensor) -> Result<(Tensor, EmbedTape)> {
    let out = relu(&layer.forward(img)?);
    Ok((out.clone(), EmbedTape { input: img.clone(), out }))
}

pub fn embed_features_backward(
    layer: &ConvLayer,
    tape: &EmbedTape,
    grad_feat: &Tensor,
) -> Result<(ConvLayerGrads, Tensor)> {
    let g = relu_backward(&tape.out, grad_feat)?;
    layer.backward(&tape.input, &g)
}

fn add_layer_grads(acc: &mut Option<ConvLayerGrads>, g: ConvLayerGrads) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            a.weight.add_assign(&g.weight).expect("embed grad shapes agree");
            a.bias.add_assign(&g.bias).expect("embed grad shapes agree");
        }
    }
}

/// Value and gradients of the reconstruction objective.
pub struct RecLoss {
    pub value: f64,
    pub grad_sr: Tensor,
    /// Gradients for the shared embedding layer (both sides), when used.
    pub embed: Option<ConvLayerGrads>,
}

/// Reconstruction loss against ground truth. `L1` mode is the plain mean
/// absolute error. `Full` mode blurs both images (3x3 Gaussian) before the
/// L1 term and adds the contextual distance between embedded features; the
/// embedding layer receives gradients from both sides.
pub fn reconstruction_loss(
    sr: &Tensor,
    hr: &Tensor,
    embed_layer: &ConvLayer,
    mode: LossMode,
) -> Result<RecLoss> {
    match mode {
        LossMode::L1 => {
            let (value, grad_sr) = l1_loss(sr, hr)?;
            Ok(RecLoss { value, grad_sr, embed: None })
        }
        LossMode::Full => {
            let sr_blur = gaussian_blur3x3(sr, REC_BLUR_SIGMA)?;
            let hr_blur = gaussian_blur3x3(hr, REC_BLUR_SIGMA)?;
            let (l1v, l1g) = l1_loss(&sr_blur, &hr_blur)?;
            let mut grad_sr = gaussian_blur3x3_backward(&l1g, REC_BLUR_SIGMA)?;

            let (f_sr, tape_sr) = embed_features(embed_layer, sr)?;
            let (f_hr, tape_hr) = embed_features(embed_layer, hr)?;
            let (ctx, ctx_grads) = contextual_distance(&f_sr, &f_hr)?;
            let mut embed = None;
            let (g_sr_side, g_sr_input) = embed_features_backward(embed_layer, &tape_sr, &ctx_grads.x)?;
            add_layer_grads(&mut embed, g_sr_side);
            let (g_hr_side, _) = embed_features_backward(embed_layer, &tape_hr, &ctx_grads.y)?;
            add_layer_grads(&mut embed, g_hr_side);
            grad_sr.add_assign(&g_sr_input)?;

            Ok(RecLoss { value: l1v + ctx, grad_sr, embed })
        }
    }
}

/// Value and gradients of the fidelity objective.
pub struct FidelityLoss {
    pub value: f64,
    pub grad_x: Tensor,
    /// Gradient w.r.t. the raw confidence map at its own resolution.
    pub grad_conf: Tensor,
    pub embed: Option<ConvLayerGrads>,
}

/// Confidence-weighted feature fidelity of `x` against `reference`: embed
/// both, resize the match-confidence map to the embedded grid, clamp it to
/// [0, 1] and take the weighted nearest cosine distance. Vanishing
/// confidence mass yields exactly zero with zero gradients.
pub fn fidelity_loss(
    x: &Tensor,
    reference: &Tensor,
    conf: &Tensor,
    embed_layer: &ConvLayer,
) -> Result<FidelityLoss> {
    let (fx, tape_x) = embed_features(embed_layer, x)?;
    let (fr, tape_r) = embed_features(embed_layer, reference)?;
    let conf_rs = resize_bilinear(conf, fx.h(), fx.w())?;
    let clamped: Vec<f64> = conf_rs.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let wd = confidence_weighted_distance(&fx, &fr, &clamped)?;

    let mut embed = None;
    let (gx_layer, grad_x_input) = embed_features_backward(embed_layer, &tape_x, &wd.grad_x)?;
    add_layer_grads(&mut embed, gx_layer);
    let (gr_layer, _) = embed_features_backward(embed_layer, &tape_r, &wd.grad_y)?;
    add_layer_grads(&mut embed, gr_layer);

    let mut grad_conf_rs = Tensor::zeros(1, 1, conf_rs.h(), conf_rs.w());
    for ((g, &raw), &gc) in grad_conf_rs.data_mut().iter_mut().zip(conf_rs.data()).zip(&wd.grad_c) {
        *g = if raw > 0.0 && raw < 1.0 { gc } else { 0.0 };
    }
    let grad_conf = resize_bilinear_backward(&grad_conf_rs, conf.h(), conf.w())?;

    Ok(FidelityLoss { value: wd.value, grad_x: grad_x_input, grad_conf, embed })
}

/// Value and gradients of the self-supervised adaptation objective.
pub struct SraLoss {
    pub value: f64,
    /// The weighted fidelity term inside `value`, for logging.
    pub fidelity_term: f64,
    pub grad_sr: Tensor,
    pub grad_conf: Tensor,
    pub embed: Option<ConvLayerGrads>,
}

/// Adaptation objective without ground truth: the super-resolved output must
/// downsample back to the observed input, and stay feature-faithful to the
/// reference where the match is confident:
/// `|down2(sr) - wide|_1 + lambda * fidelity(sr, tele, conf)`.
pub fn sra_loss(
    sr: &Tensor,
    wide: &Tensor,
    tele: &Tensor,
    conf: &Tensor,
    lambda: f64,
    embed_layer: &ConvLayer,
) -> Result<SraLoss> {
    let down = bicubic_resize(sr, ResizeFactor::Down2)?;
    let (l1v, l1g) = l1_loss(&down, wide)?;
    let mut grad_sr = bicubic_resize_backward(&l1g, ResizeFactor::Down2, sr.h(), sr.w())?;

    let fid = fidelity_loss(sr, tele, conf, embed_layer)?;
    grad_sr.add_assign(&fid.grad_x.scale(lambda))?;
    let embed = fid.embed.map(|g| ConvLayerGrads { weight: g.weight.scale(lambda), bias: g.bias.scale(lambda) });
    Ok(SraLoss {
        value: l1v + lambda * fid.value,
        fidelity_term: lambda * fid.value,
        grad_sr,
        grad_conf: fid.grad_conf.scale(lambda),
        embed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_of_identical_tensors_is_zero_with_zero_grad() {
        let t = Tensor::full(1, 2, 3, 3, 0.7);
        let (v, g) = l1_loss(&t, &t).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.abs_max(), 0.0);
    }

    #[test]
    fn l1_hand_case() {
        let a = Tensor::new(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(1, 1, 1, 2, vec![0.0, 2.0]).unwrap();
        let (v, g) = l1_loss(&a, &b).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        assert_eq!(g.data(), &[0.5, -0.5]);
    }

    #[test]
    fn contextual_two_pixel_oracle() {
        // Single x feature (1, 0) against a lone y feature (1, 1):
        // cos = 1/sqrt(2), delta = 1 - 1/sqrt(2).
        let x = Tensor::new(1, 2, 1, 1, vec![1.0, 0.0]).unwrap();
        let y = Tensor::new(1, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        let (v, _) = contextual_distance(&x, &y).unwrap();
        assert!((v - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn contextual_is_zero_under_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(1, 3, 4, 4, 0.1, 1.0, &mut rng);
        // y holds the same feature vectors, spatially reversed.
        let y = Tensor::from_fn(1, 3, 4, 4, |_, c, yy, xx| x.at(0, c, 3 - yy, 3 - xx));
        let (v, grads) = contextual_distance(&x, &y).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(grads.x.abs_max() < 1e-9);
    }

    #[test]
    fn contextual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(1, 2, 3, 3, 0.2, 1.0, &mut rng);
        let y = Tensor::rand_uniform(1, 2, 2, 4, 0.2, 1.0, &mut rng);
        let (_, grads) = contextual_distance(&x, &y).unwrap();
        let eps = 1e-6;
        for &i in &[0usize, 7, 15] {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (contextual_distance(&p, &y).unwrap().0 - contextual_distance(&m, &y).unwrap().0) / (2.0 * eps);
            assert!((fd - grads.x.data()[i]).abs() < 1e-6, "x grad {i}");
        }
        for &i in &[0usize, 9] {
            let mut p = y.clone();
            p.data_mut()[i] += eps;
            let mut m = y.clone();
            m.data_mut()[i] -= eps;
            let fd = (contextual_distance(&x, &p).unwrap().0 - contextual_distance(&x, &m).unwrap().0) / (2.0 * eps);
            assert!((fd - grads.y.data()[i]).abs() < 1e-6, "y grad {i}");
        }
    }

    #[test]
    fn weighted_distance_selects_the_weighted_position() {
        // Two x positions; confidence [1, 0] must reduce the loss to the
        // first position's delta alone.
        let x = Tensor::new(1, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = Tensor::new(1, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        let wd = confidence_weighted_distance(&x, &y, &[1.0, 0.0]).unwrap();
        assert!((wd.value - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn vanishing_confidence_mass_gives_zero_loss_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(1, 2, 3, 3, 0.1, 1.0, &mut rng);
        let y = Tensor::rand_uniform(1, 2, 3, 3, 0.1, 1.0, &mut rng);
        let wd = confidence_weighted_distance(&x, &y, &vec![0.0; 9]).unwrap();
        assert_eq!(wd.value, 0.0);
        assert_eq!(wd.grad_x.abs_max(), 0.0);
        assert!(wd.grad_c.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weighted_distance_confidence_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(1, 2, 2, 3, 0.1, 1.0, &mut rng);
        let y = Tensor::rand_uniform(1, 2, 2, 2, 0.1, 1.0, &mut rng);
        let c: Vec<f64> = (0..6).map(|i| 0.2 + 0.1 * i as f64).collect();
        let wd = confidence_weighted_distance(&x, &y, &c).unwrap();
        let eps = 1e-6;
        for i in 0..c.len() {
            let mut p = c.clone();
            p[i] += eps;
            let mut m = c.clone();
            m[i] -= eps;
            let fd = (confidence_weighted_distance(&x, &y, &p).unwrap().value
                - confidence_weighted_distance(&x, &y, &m).unwrap().value)
                / (2.0 * eps);
            assert!((fd - wd.grad_c[i]).abs() < 1e-7, "c grad {i}");
        }
    }

    #[test]
    fn reconstruction_of_identical_images_is_zero_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, &mut rng);
        let embed = ConvLayer::init(8, 3, 3, 1, &mut rng);
        for mode in [LossMode::L1, LossMode::Full] {
            let rec = reconstruction_loss(&img, &img, &embed, mode).unwrap();
            assert!(rec.value.abs() < 1e-10, "{mode:?}: {}", rec.value);
            assert!(rec.grad_sr.abs_max() < 1e-9, "{mode:?}");
        }
    }

    #[test]
    fn full_mode_penalizes_blur_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sharp = Tensor::from_fn(1, 3, 8, 8, |_, _, y, x| ((x + y) % 2) as f64);
        let flat = Tensor::full(1, 3, 8, 8, 0.5);
        let embed = ConvLayer::init(8, 3, 3, 1, &mut rng);
        let rec = reconstruction_loss(&flat, &sharp, &embed, LossMode::Full).unwrap();
        assert!(rec.value > 0.05);
        assert!(rec.embed.is_some());
    }

    #[test]
    fn sra_consistent_pair_has_zero_data_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sr = Tensor::rand_uniform(1, 3, 16, 16, 0.2, 0.8, &mut rng);
        let wide = bicubic_resize(&sr, ResizeFactor::Down2).unwrap();
        let tele = Tensor::rand_uniform(1, 3, 8, 8, 0.2, 0.8, &mut rng);
        let conf = Tensor::full(1, 1, 8, 8, 0.5);
        let embed = ConvLayer::init(8, 3, 3, 1, &mut rng);
        let loss = sra_loss(&sr, &wide, &tele, &conf, 0.1, &embed).unwrap();
        assert!((loss.value - loss.fidelity_term).abs() < 1e-12);
        assert!(loss.fidelity_term >= 0.0);
    }

    #[test]
    fn fidelity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::rand_uniform(1, 3, 6, 6, 0.1, 0.9, &mut rng);
        let r = Tensor::rand_uniform(1, 3, 4, 4, 0.1, 0.9, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 3, 3, 0.2, 0.9, &mut rng);
        let embed = ConvLayer::init(4, 3, 3, 1, &mut rng);
        let fid = fidelity_loss(&x, &r, &conf, &embed).unwrap();
        let eps = 1e-6;
        for &i in &[0usize, 30, 80] {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (fidelity_loss(&p, &r, &conf, &embed).unwrap().value
                - fidelity_loss(&m, &r, &conf, &embed).unwrap().value)
                / (2.0 * eps);
            assert!((fd - fid.grad_x.data()[i]).abs() < 1e-6, "x grad {i}");
        }
        for &i in &[0usize, 4, 8] {
            let mut p = conf.clone();
            p.data_mut()[i] += eps;
            let mut m = conf.clone();
            m.data_mut()[i] -= eps;
            let fd = (fidelity_loss(&x, &r, &p, &embed).unwrap().value
                - fidelity_loss(&x, &r, &m, &embed).unwrap().value)
                / (2.0 * eps);
            assert!((fd - fid.grad_conf.data()[i]).abs() < 1e-6, "conf grad {i}");
        }
        // Embedding weight gradient, both sides contributing.
        let w_grad = fid.embed.as_ref().unwrap();
        for &i in &[0usize, 17, 50] {
            let mut lp = embed.clone();
            lp.weight.data_mut()[i] += eps;
            let mut lm = embed.clone();
            lm.weight.data_mut()[i] -= eps;
            let fd = (fidelity_loss(&x, &r, &conf, &lp).unwrap().value
                - fidelity_loss(&x, &r, &conf, &lm).unwrap().value)
                / (2.0 * eps);
            assert!((fd - w_grad.weight.data()[i]).abs() < 1e-6, "embed weight grad {i}");
        }
    }
}
