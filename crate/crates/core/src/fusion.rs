//! Confidence-gated fusion of super-resolution features with warped
//! reference features, in feature space and in image space.
//!
//! The shared combine rule is `out = gate (x) merged + base`, where the gate
//! is a single-channel map broadcast over channels. Three modes choose how
//! the gate is produced: a learned sigmoid head over the match confidence
//! (`adaptive`), the raw confidence itself (`soft`), or no gating at all
//! (`sum`, which also skips the merge layer and adds the reference features
//! directly).

use crate::error::{CoreError, Result};
use crate::layers::{relu, relu_backward, sigmoid, sigmoid_backward, ConvLayer, ConvLayerGrads};
use crate::ops::{bicubic_resize, bicubic_resize_backward, ResizeFactor};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How reference content is blended in at each fusion point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Learned sigmoid gate over the match confidence.
    Adaptive,
    /// Raw confidence used directly as the gate.
    Soft,
    /// Plain addition of the reference branch, no gate, no merge layer.
    Sum,
}

fn check_gate_shapes(base: &Tensor, merged: &Tensor, gate: &Tensor) -> Result<()> {
    base.check_same_shape(merged, "fuse_with_gate features")?;
    let (gb, gc, gh, gw) = gate.shape();
    if gb != 1 || gc != 1 || (gh, gw) != (base.h(), base.w()) {
        return Err(CoreError::shape(
            "fuse_with_gate gate",
            format!("(1, 1, {}, {})", base.h(), base.w()),
            format!("{:?}", gate.shape()),
        ));
    }
    Ok(())
}

/// The shared combine rule: `base + gate (x) merged` with the single-channel
/// gate broadcast over channels. Every fusion mode funnels through here, so
/// properties of the rule (an all-ones gate adds `merged` verbatim, an
/// all-zeros gate returns `base` untouched) hold for all of them.
pub fn fuse_with_gate(base: &Tensor, merged: &Tensor, gate: &Tensor) -> Result<Tensor> {
    check_gate_shapes(base, merged, gate)?;
    let mut out = base.clone();
    let (_, c, _, _) = base.shape();
    for ci in 0..c {
        let m = merged.plane(0, ci);
        let g = gate.plane(0, 0);
        for ((o, &mv), &gv) in out.plane_mut(0, ci).iter_mut().zip(m).zip(g) {
            *o += gv * mv;
        }
    }
    Ok(out)
}

/// Gradients of [`fuse_with_gate`] w.r.t. `(base, merged, gate)`.
pub fn fuse_with_gate_backward(
    merged: &Tensor,
    gate: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_gate_shapes(grad_out, merged, gate)?;
    let grad_base = grad_out.clone();
    let (_, c, h, w) = merged.shape();
    let mut grad_merged = Tensor::zeros(1, c, h, w);
    let mut grad_gate = Tensor::zeros(1, 1, h, w);
    for ci in 0..c {
        let m = merged.plane(0, ci);
        let g = gate.plane(0, 0);
        let go = grad_out.plane(0, ci);
        let gm = grad_merged.plane_mut(0, ci);
        for i in 0..h * w {
            gm[i] = g[i] * go[i];
        }
        let gg = grad_gate.plane_mut(0, 0);
        for i in 0..h * w {
            gg[i] += m[i] * go[i];
        }
    }
    Ok((grad_base, grad_merged, grad_gate))
}

/// Two-layer sigmoid head turning a confidence map into a gate map in (0, 1).
#[derive(Debug, Clone)]
pub struct ConfGate {
    pub a: ConvLayer,
    pub b: ConvLayer,
}

pub struct ConfGateTape {
    input: Tensor,
    hidden: Tensor,
    out: Tensor,
}

pub struct ConfGateGrads {
    pub a: ConvLayerGrads,
    pub b: ConvLayerGrads,
}

impl ConfGate {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        ConfGate { a: ConvLayer::init(hidden, 1, 3, 1, rng), b: ConvLayer::init(1, hidden, 3, 1, rng) }
    }

    pub fn forward(&self, conf: &Tensor) -> Result<(Tensor, ConfGateTape)> {
        let hidden = relu(&self.a.forward(conf)?);
        let out = sigmoid(&self.b.forward(&hidden)?);
        Ok((out.clone(), ConfGateTape { input: conf.clone(), hidden, out }))
    }

    /// Returns the layer gradients and the gradient w.r.t. the confidence map.
    pub fn backward(&self, tape: &ConfGateTape, grad_gate: &Tensor) -> Result<(ConfGateGrads, Tensor)> {
        let g = sigmoid_backward(&tape.out, grad_gate)?;
        let (gb, g) = self.b.backward(&tape.hidden, &g)?;
        let g = relu_backward(&tape.hidden, &g)?;
        let (ga, grad_conf) = self.a.backward(&tape.input, &g)?;
        Ok((ConfGateGrads { a: ga, b: gb }, grad_conf))
    }
}

/// One feature-space fusion point: a merge convolution over the stacked
/// branches and a learned confidence gate.
#[derive(Debug, Clone)]
pub struct FusionSite {
    pub gate: ConfGate,
    pub merge: ConvLayer,
}

pub struct FusionSiteTape {
    mode: FusionMode,
    concat: Option<Tensor>,
    merged: Option<Tensor>,
    gate_map: Option<Tensor>,
    gate_tape: Option<ConfGateTape>,
    channels: usize,
}

impl FusionSiteTape {
    /// The gate map actually applied (present for adaptive and soft modes).
    pub fn gate_map(&self) -> Option<&Tensor> {
        self.gate_map.as_ref()
    }
}

pub struct FusionSiteGrads {
    pub f_sr: Tensor,
    pub f_ref: Tensor,
    pub conf: Tensor,
    pub gate: Option<ConfGateGrads>,
    pub merge: Option<ConvLayerGrads>,
}

impl FusionSite {
    pub fn init(channels: usize, gate_hidden: usize, rng: &mut impl Rng) -> Self {
        FusionSite {
            gate: ConfGate::init(gate_hidden, rng),
            merge: ConvLayer::init(channels, 2 * channels, 3, 1, rng),
        }
    }

    pub fn forward(
        &self,
        f_sr: &Tensor,
        f_ref: &Tensor,
        conf: &Tensor,
        mode: FusionMode,
    ) -> Result<(Tensor, FusionSiteTape)> {
        f_sr.check_same_shape(f_ref, "fusion site branches")?;
        let channels = f_sr.c();
        match mode {
            FusionMode::Sum => {
                let out = f_sr.add(f_ref)?;
                Ok((
                    out,
                    FusionSiteTape {
                        mode,
                        concat: None,
                        merged: None,
                        gate_map: None,
                        gate_tape: None,
                        channels,
                    },
                ))
            }
            FusionMode::Soft | FusionMode::Adaptive => {
                let concat = Tensor::concat_channels(&[f_sr, f_ref])?;
                let merged = self.merge.forward(&concat)?;
                let (gate_map, gate_tape) = match mode {
                    FusionMode::Adaptive => {
                        let (g, t) = self.gate.forward(conf)?;
                        (g, Some(t))
                    }
                    _ => (conf.clone(), None),
                };
                let out = fuse_with_gate(f_sr, &merged, &gate_map)?;
                Ok((
                    out,
                    FusionSiteTape {
                        mode,
                        concat: Some(concat),
                        merged: Some(merged),
                        gate_map: Some(gate_map),
                        gate_tape,
                        channels,
                    },
                ))
            }
        }
    }

    pub fn backward(&self, tape: &FusionSiteTape, grad_out: &Tensor) -> Result<FusionSiteGrads> {
        match tape.mode {
            FusionMode::Sum => Ok(FusionSiteGrads {
                f_sr: grad_out.clone(),
                f_ref: grad_out.clone(),
                conf: Tensor::zeros(1, 1, grad_out.h(), grad_out.w()),
                gate: None,
                merge: None,
            }),
            FusionMode::Soft | FusionMode::Adaptive => {
                let merged = tape.merged.as_ref().expect("gated tape has merged");
                let gate_map = tape.gate_map.as_ref().expect("gated tape has gate map");
                let concat = tape.concat.as_ref().expect("gated tape has concat");
                let (grad_base, grad_merged, grad_gate) =
                    fuse_with_gate_backward(merged, gate_map, grad_out)?;
                let (merge_grads, grad_concat) = self.merge.backward(concat, &grad_merged)?;
                let parts = grad_concat.split_channels(&[tape.channels, tape.channels])?;
                let mut grad_f_sr = grad_base;
                grad_f_sr.add_assign(&parts[0])?;
                let grad_f_ref = parts[1].clone();
                let (gate_grads, grad_conf) = match tape.mode {
                    FusionMode::Adaptive => {
                        let (g, c) =
                            self.gate.backward(tape.gate_tape.as_ref().expect("adaptive tape"), &grad_gate)?;
                        (Some(g), c)
                    }
                    _ => (None, grad_gate),
                };
                Ok(FusionSiteGrads {
                    f_sr: grad_f_sr,
                    f_ref: grad_f_ref,
                    conf: grad_conf,
                    gate: gate_grads,
                    merge: Some(merge_grads),
                })
            }
        }
    }
}

/// High-frequency residual of an image: the part removed by a round trip
/// through bicubic half-resolution.
pub fn hf_residual(img: &Tensor) -> Result<Tensor> {
    let down = bicubic_resize(img, ResizeFactor::Down2)?;
    let up = bicubic_resize(&down, ResizeFactor::Up2)?;
    img.sub(&up)
}

/// Gradient of [`hf_residual`] w.r.t. the image.
pub fn hf_residual_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = grad_out.shape();
    let up_t = bicubic_resize_backward(grad_out, ResizeFactor::Up2, h / 2, w / 2)?;
    let down_t = bicubic_resize_backward(&up_t, ResizeFactor::Down2, h, w)?;
    grad_out.sub(&down_t)
}

/// Image-space fusion: gate the aligned high-frequency reference residual
/// onto the decoded image.
#[derive(Debug, Clone)]
pub struct ImageFuse {
    pub gate: ConfGate,
}

pub struct ImageFuseTape {
    mode: FusionMode,
    hf_aligned: Tensor,
    gate_map: Option<Tensor>,
    gate_tape: Option<ConfGateTape>,
}

impl ImageFuseTape {
    pub fn gate_map(&self) -> Option<&Tensor> {
        self.gate_map.as_ref()
    }
}

pub struct ImageFuseGrads {
    pub decoded: Tensor,
    pub hf_aligned: Tensor,
    pub conf: Tensor,
    pub gate: Option<ConfGateGrads>,
}

impl ImageFuse {
    pub fn init(gate_hidden: usize, rng: &mut impl Rng) -> Self {
        ImageFuse { gate: ConfGate::init(gate_hidden, rng) }
    }

    pub fn forward(
        &self,
        decoded: &Tensor,
        hf_aligned: &Tensor,
        conf: &Tensor,
        mode: FusionMode,
    ) -> Result<(Tensor, ImageFuseTape)> {
        decoded.check_same_shape(hf_aligned, "image fuse branches")?;
        match mode {
            FusionMode::Sum => {
                let out = decoded.add(hf_aligned)?;
                Ok((out, ImageFuseTape { mode, hf_aligned: hf_aligned.clone(), gate_map: None, gate_tape: None }))
            }
            FusionMode::Soft | FusionMode::Adaptive => {
                let (gate_map, gate_tape) = match mode {
                    FusionMode::Adaptive => {
                        let (g, t) = self.gate.forward(conf)?;
                        (g, Some(t))
                    }
                    _ => (conf.clone(), None),
                };
                let out = fuse_with_gate(decoded, hf_aligned, &gate_map)?;
                Ok((
                    out,
                    ImageFuseTape { mode, hf_aligned: hf_aligned.clone(), gate_map: Some(gate_map), gate_tape },
                ))
            }
        }
    }

    pub fn backward(&self, tape: &ImageFuseTape, grad_out: &Tensor) -> Result<ImageFuseGrads> {
        match tape.mode {
            FusionMode::Sum => Ok(ImageFuseGrads {
                decoded: grad_out.clone(),
                hf_aligned: grad_out.clone(),
                conf: Tensor::zeros(1, 1, grad_out.h(), grad_out.w()),
                gate: None,
            }),
            FusionMode::Soft | FusionMode::Adaptive => {
                let gate_map = tape.gate_map.as_ref().expect("gated tape has gate map");
                let (grad_decoded, grad_hf, grad_gate) =
                    fuse_with_gate_backward(&tape.hf_aligned, gate_map, grad_out)?;
                let (gate_grads, grad_conf) = match tape.mode {
                    FusionMode::Adaptive => {
                        let (g, c) =
                            self.gate.backward(tape.gate_tape.as_ref().expect("adaptive tape"), &grad_gate)?;
                        (Some(g), c)
                    }
                    _ => (None, grad_gate),
                };
                Ok(ImageFuseGrads { decoded: grad_decoded, hf_aligned: grad_hf, conf: grad_conf, gate: gate_grads })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_gate_adds_merged_and_zero_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::rand_uniform(1, 4, 5, 6, -1.0, 1.0, &mut rng);
        let merged = Tensor::rand_uniform(1, 4, 5, 6, -1.0, 1.0, &mut rng);
        let ones = Tensor::full(1, 1, 5, 6, 1.0);
        let zeros = Tensor::zeros(1, 1, 5, 6);
        let sum = fuse_with_gate(&base, &merged, &ones).unwrap();
        let expect = base.add(&merged).unwrap();
        assert!(sum.sub(&expect).unwrap().abs_max() == 0.0);
        let id = fuse_with_gate(&base, &merged, &zeros).unwrap();
        assert!(id.sub(&base).unwrap().abs_max() == 0.0);
    }

    #[test]
    fn learned_gate_stays_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gate = ConfGate::init(8, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 7, 7, -1.0, 1.0, &mut rng);
        let (map, _) = gate.forward(&conf).unwrap();
        for &v in map.data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid gate produced {v}");
        }
    }

    #[test]
    fn sum_mode_is_plain_addition_and_validates_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let site = FusionSite::init(4, 8, &mut rng);
        let a = Tensor::rand_uniform(1, 4, 6, 6, -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(1, 4, 6, 6, -1.0, 1.0, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 6, 6, 0.0, 1.0, &mut rng);
        let (out, _) = site.forward(&a, &b, &conf, FusionMode::Sum).unwrap();
        assert!(out.sub(&a.add(&b).unwrap()).unwrap().abs_max() == 0.0);
        let bad = Tensor::zeros(1, 3, 6, 6);
        assert!(site.forward(&a, &bad, &conf, FusionMode::Sum).is_err());
    }

    fn fd_check_site(mode: FusionMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let site = FusionSite::init(3, 4, &mut rng);
        let f_sr = Tensor::rand_uniform(1, 3, 5, 5, -1.0, 1.0, &mut rng);
        let f_ref = Tensor::rand_uniform(1, 3, 5, 5, -1.0, 1.0, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 5, 5, -0.2, 1.0, &mut rng);
        let wsum = Tensor::rand_uniform(1, 3, 5, 5, -1.0, 1.0, &mut rng);
        let loss = |sr: &Tensor, rf: &Tensor, cf: &Tensor| -> f64 {
            let (out, _) = site.forward(sr, rf, cf, mode).unwrap();
            out.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = site.forward(&f_sr, &f_ref, &conf, mode).unwrap();
        let grads = site.backward(&tape, &wsum).unwrap();
        let eps = 1e-6;
        for &i in &[0usize, 17, 63] {
            let mut p = f_sr.clone();
            p.data_mut()[i] += eps;
            let mut m = f_sr.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p, &f_ref, &conf) - loss(&m, &f_ref, &conf)) / (2.0 * eps);
            assert!((fd - grads.f_sr.data()[i]).abs() < 1e-6, "{mode:?} f_sr {i}");
            let mut p = f_ref.clone();
            p.data_mut()[i] += eps;
            let mut m = f_ref.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&f_sr, &p, &conf) - loss(&f_sr, &m, &conf)) / (2.0 * eps);
            assert!((fd - grads.f_ref.data()[i]).abs() < 1e-6, "{mode:?} f_ref {i}");
        }
        for &i in &[0usize, 12, 24] {
            let mut p = conf.clone();
            p.data_mut()[i] += eps;
            let mut m = conf.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&f_sr, &f_ref, &p) - loss(&f_sr, &f_ref, &m)) / (2.0 * eps);
            assert!((fd - grads.conf.data()[i]).abs() < 1e-6, "{mode:?} conf {i}");
        }
    }

    #[test]
    fn site_gradients_match_finite_differences_in_every_mode() {
        fd_check_site(FusionMode::Adaptive);
        fd_check_site(FusionMode::Soft);
        fd_check_site(FusionMode::Sum);
    }

    #[test]
    fn constant_images_carry_no_high_frequency_residual() {
        let img = Tensor::full(1, 3, 16, 16, 0.42);
        let hf = hf_residual(&img).unwrap();
        assert!(hf.abs_max() < 1e-12);
    }

    #[test]
    fn checkerboard_carries_high_frequency_residual() {
        let img = Tensor::from_fn(1, 1, 16, 16, |_, _, y, x| ((x + y) % 2) as f64);
        let hf = hf_residual(&img).unwrap();
        assert!(hf.abs_max() > 0.1);
    }

    #[test]
    fn hf_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(1, 2, 12, 8, -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(1, 2, 12, 8, -1.0, 1.0, &mut rng);
        let hx = hf_residual(&x).unwrap();
        let hty = hf_residual_backward(&y).unwrap();
        let lhs: f64 = hx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(hty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn image_fuse_sum_mode_adds_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fuse = ImageFuse::init(8, &mut rng);
        let decoded = Tensor::rand_uniform(1, 3, 8, 8, 0.0, 1.0, &mut rng);
        let hf = Tensor::rand_uniform(1, 3, 8, 8, -0.2, 0.2, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 8, 8, 0.0, 1.0, &mut rng);
        let (out, _) = fuse.forward(&decoded, &hf, &conf, FusionMode::Sum).unwrap();
        assert!(out.sub(&decoded.add(&hf).unwrap()).unwrap().abs_max() == 0.0);
    }

    #[test]
    fn image_fuse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fuse = ImageFuse::init(4, &mut rng);
        let decoded = Tensor::rand_uniform(1, 3, 6, 6, 0.0, 1.0, &mut rng);
        let hf = Tensor::rand_uniform(1, 3, 6, 6, -0.3, 0.3, &mut rng);
        let conf = Tensor::rand_uniform(1, 1, 6, 6, 0.0, 1.0, &mut rng);
        let wsum = Tensor::rand_uniform(1, 3, 6, 6, -1.0, 1.0, &mut rng);
        let loss = |d: &Tensor, h: &Tensor, c: &Tensor| -> f64 {
            let (out, _) = fuse.forward(d, h, c, FusionMode::Adaptive).unwrap();
            out.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = fuse.forward(&decoded, &hf, &conf, FusionMode::Adaptive).unwrap();
        let grads = fuse.backward(&tape, &wsum).unwrap();
        let eps = 1e-6;
        for &i in &[3usize, 50] {
            let mut p = decoded.clone();
            p.data_mut()[i] += eps;
            let mut m = decoded.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p, &hf, &conf) - loss(&m, &hf, &conf)) / (2.0 * eps);
            assert!((fd - grads.decoded.data()[i]).abs() < 1e-6);
            let mut p = hf.clone();
            p.data_mut()[i] += eps;
            let mut m = hf.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&decoded, &p, &conf) - loss(&decoded, &m, &conf)) / (2.0 * eps);
            assert!((fd - grads.hf_aligned.data()[i]).abs() < 1e-6);
        }
        for &i in &[5usize, 20] {
            let mut p = conf.clone();
            p.data_mut()[i] += eps;
            let mut m = conf.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&decoded, &hf, &p) - loss(&decoded, &hf, &m)) / (2.0 * eps);
            assert!((fd - grads.conf.data()[i]).abs() < 1e-6);
        }
    }
}
