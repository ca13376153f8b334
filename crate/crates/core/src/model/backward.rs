use crate::error::Result;
use crate::layers::{relu_backward, ConvLayer, ConvLayerGrads};
use crate::matching::match_features_backward;
use crate::model::forward::ForwardTrace;
use crate::model::params::ModelParams;
use crate::ops::{bicubic_resize_backward, resize_bilinear_backward, ResizeFactor};
use crate::tensor::Tensor;
use crate::warp::apply_patch_affine_backward;

/// Loss gradients entering the model backward pass.
pub struct LossSignal {
    /// Gradient w.r.t. the super-resolved output.
    pub grad_sr: Tensor,
    /// Gradient w.r.t. the raw confidence map (query-grid resolution), from
    /// objectives that weight by match confidence.
    pub grad_conf: Option<Tensor>,
    /// Gradients for the shared embedding layer (`match_enc.0`) produced by
    /// feature-space loss terms.
    pub embed: Option<ConvLayerGrads>,
}

impl LossSignal {
    pub fn from_grad_sr(grad_sr: Tensor) -> Self {
        LossSignal { grad_sr, grad_conf: None, embed: None }
    }
}

fn accum(dst: &mut ConvLayer, src: &ConvLayerGrads) {
    dst.weight.add_assign(&src.weight).expect("grad shapes agree");
    dst.bias.add_assign(&src.bias).expect("grad shapes agree");
}

/// Propagate loss gradients through the recorded forward pass; returns
/// parameter gradients in a [`ModelParams`]-shaped container. Gradients
/// w.r.t. the input images are not materialized (both are leaves), and the
/// discrete match indices are treated as constants.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, signal: &LossSignal) -> Result<ModelParams> {
    let mut g = params.zeros_like();
    let m = &trace.match_result;
    let (qh, qw) = m.query_grid;
    let mut g_conf_map = Tensor::zeros(1, 1, qh, qw);
    if let Some(gc) = &signal.grad_conf {
        g_conf_map.add_assign(gc)?;
    }

    // Image-space fusion.
    let ifg = params.image_fuse.backward(&trace.image_tape, &signal.grad_sr)?;
    if let Some(gg) = &ifg.gate {
        accum(&mut g.image_fuse.gate.a, &gg.a);
        accum(&mut g.image_fuse.gate.b, &gg.b);
    }
    g_conf_map.add_assign(&resize_bilinear_backward(&ifg.conf, qh, qw)?)?;
    // High-frequency branch: only the affine field holds parameters
    // upstream (the reference image is a leaf).
    let hf_grads = apply_patch_affine_backward(&trace.hf, m, &trace.field, 4, &ifg.hf_aligned)?;
    let mut g_field = hf_grads.field_res;

    // Decoder second stage (through the global-skip split).
    let g_decoded = ifg.decoded;
    let (go, g_u2) = params.dec_out.backward(&trace.u2_out, &g_decoded)?;
    accum(&mut g.dec_out, &go);
    let g_u2 = relu_backward(&trace.u2_out, &g_u2)?;
    let (gu2, g_up2) = params.dec_u2.backward(&trace.up2, &g_u2)?;
    accum(&mut g.dec_u2, &gu2);
    let g_d2 = bicubic_resize_backward(&g_up2, ResizeFactor::Up2, trace.d2_out.h(), trace.d2_out.w())?;
    let g_d2 = relu_backward(&trace.d2_out, &g_d2)?;
    let (gd2, g_fused2) = params.dec_d2.backward(&trace.fused2, &g_d2)?;
    accum(&mut g.dec_d2, &gd2);

    // Input-resolution fusion.
    let f2 = params.fuse2.backward(&trace.fuse2_tape, &g_fused2)?;
    if let Some(gg) = &f2.gate {
        accum(&mut g.fuse2.gate.a, &gg.a);
        accum(&mut g.fuse2.gate.b, &gg.b);
    }
    if let Some(mg) = &f2.merge {
        accum(&mut g.fuse2.merge, mg);
    }
    g_conf_map.add_assign(&resize_bilinear_backward(&f2.conf, qh, qw)?)?;
    let al2 = apply_patch_affine_backward(&trace.pyramid[1], m, &trace.field, 2, &f2.f_ref)?;
    g_field.add_assign(&al2.field_res)?;
    let mut g_p1 = al2.source;

    // Decoder first stage.
    let g_u1 = relu_backward(&trace.u1_out, &f2.f_sr)?;
    let (gu1, g_up1) = params.dec_u1.backward(&trace.up1, &g_u1)?;
    accum(&mut g.dec_u1, &gu1);
    let g_d1 = bicubic_resize_backward(&g_up1, ResizeFactor::Up2, trace.d1_out.h(), trace.d1_out.w())?;
    let g_d1 = relu_backward(&trace.d1_out, &g_d1)?;
    let (gd1, g_fused1) = params.dec_d1.backward(&trace.fused1, &g_d1)?;
    accum(&mut g.dec_d1, &gd1);

    // Backbone-resolution fusion.
    let f1 = params.fuse1.backward(&trace.fuse1_tape, &g_fused1)?;
    if let Some(gg) = &f1.gate {
        accum(&mut g.fuse1.gate.a, &gg.a);
        accum(&mut g.fuse1.gate.b, &gg.b);
    }
    if let Some(mg) = &f1.merge {
        accum(&mut g.fuse1.merge, mg);
    }
    g_conf_map.add_assign(&resize_bilinear_backward(&f1.conf, qh, qw)?)?;
    let al1 = apply_patch_affine_backward(&trace.pyramid[2], m, &trace.field, 1, &f1.f_ref)?;
    g_field.add_assign(&al1.field_res)?;
    let g_p2 = al1.source;

    // Backbone residual blocks, then the entry convolution.
    let mut g_x = f1.f_sr;
    for (i, block) in params.blocks.iter().enumerate().rev() {
        let input = if i == 0 { &trace.entry_out } else { &trace.block_outs[i - 1] };
        let mid = &trace.block_mids[i];
        let (gc2, g_mid) = block.c2.backward(mid, &g_x)?;
        accum(&mut g.blocks[i].c2, &gc2);
        let g_mid = relu_backward(mid, &g_mid)?;
        let (gc1, g_in) = block.c1.backward(input, &g_mid)?;
        accum(&mut g.blocks[i].c1, &gc1);
        g_x.add_assign(&g_in)?;
    }
    let g_entry = relu_backward(&trace.entry_out, &g_x)?;
    let (ge, _) = params.backbone_entry.backward(&trace.lr, &g_entry)?;
    accum(&mut g.backbone_entry, &ge);

    // Alignment head; the input-stack gradient ends at leaves (the upscaled
    // input and the parameter-free hard warp of the reference).
    let (align_grads, _) = params.align.backward(&trace.align_tape, &g_field)?;
    for (dst, src) in g.align.layers.iter_mut().zip(&align_grads) {
        accum(dst, src);
    }

    // Reference pyramid.
    let g_p2 = relu_backward(&trace.pyramid[2], &g_p2)?;
    let (gp2, g_p1_coarse) = params.pyramid[2].backward(&trace.pyramid[1], &g_p2)?;
    accum(&mut g.pyramid[2], &gp2);
    g_p1.add_assign(&g_p1_coarse)?;
    let g_p1 = relu_backward(&trace.pyramid[1], &g_p1)?;
    let (gp1, g_p0) = params.pyramid[1].backward(&trace.pyramid[0], &g_p1)?;
    accum(&mut g.pyramid[1], &gp1);
    let g_p0 = relu_backward(&trace.pyramid[0], &g_p0)?;
    let (gp0, _) = params.pyramid[0].backward(&trace.ref_img, &g_p0)?;
    accum(&mut g.pyramid[0], &gp0);

    // Match confidence into the shared encoder, both sides.
    let (g_q3, g_r3) = match_features_backward(&trace.q_feats[2], &trace.r_feats[2], m, g_conf_map.data())?;
    for (feats, g_top, base_input) in [
        (&trace.q_feats, g_q3, &trace.lr_up),
        (&trace.r_feats, g_r3, &trace.ref_img),
    ] {
        let g3 = relu_backward(&feats[2], &g_top)?;
        let (gm2, g2) = params.match_enc[2].backward(&feats[1], &g3)?;
        accum(&mut g.match_enc[2], &gm2);
        let g2 = relu_backward(&feats[1], &g2)?;
        let (gm1, g1) = params.match_enc[1].backward(&feats[0], &g2)?;
        accum(&mut g.match_enc[1], &gm1);
        let g1 = relu_backward(&feats[0], &g1)?;
        let (gm0, _) = params.match_enc[0].backward(base_input, &g1)?;
        accum(&mut g.match_enc[0], &gm0);
    }

    // Loss-side embedding gradients share the first encoder stage.
    if let Some(e) = &signal.embed {
        accum(&mut g.match_enc[0], e);
    }

    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::forward::forward;
    use crate::model::params::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            match_channels: 4,
            pyramid_channels: [4, 6, 8],
            backbone_channels: 8,
            backbone_blocks: 1,
            decoder_channels: [6, 4],
            align_hidden: 4,
            gate_hidden: 2,
            ..ModelConfig::default()
        }
    }

    /// Nudge every parameter away from special points (the zero-initialized
    /// alignment head samples exactly at bilinear kinks otherwise).
    fn nudge(params: &mut ModelParams, rng: &mut impl Rng) {
        for (_, t) in params.named_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.02..0.02);
            }
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        nudge(&mut params, &mut rng);
        let lr = Tensor::rand_uniform(1, 3, 16, 16, 0.05, 0.95, &mut rng);
        let ref_img = Tensor::rand_uniform(1, 3, 16, 16, 0.05, 0.95, &mut rng);
        let wsum = Tensor::rand_uniform(1, 3, 32, 32, -1.0, 1.0, &mut rng);

        let loss = |p: &ModelParams| -> f64 {
            let t = forward(p, &cfg, &lr, &ref_img).unwrap();
            t.sr.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };

        let trace = forward(&params, &cfg, &lr, &ref_img).unwrap();
        let grads = backward(&params, &trace, &LossSignal::from_grad_sr(wsum.clone())).unwrap();

        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let flat_grads: Vec<Vec<f64>> =
            grads.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        // Small step: the composed loss has strong curvature along some
        // weight directions, so larger steps leave visible truncation error.
        let eps = 1e-6;
        // Sample a few entries from components across the whole model.
        let picks = [
            ("match_enc.0.weight", 5),
            ("match_enc.2.weight", 17),
            ("pyramid.1.weight", 40),
            ("align.0.weight", 3),
            ("align.3.weight", 20),
            ("backbone_entry.weight", 8),
            ("blocks.0.c1.weight", 100),
            ("fuse1.merge.weight", 60),
            ("fuse1.gate.a.weight", 2),
            ("dec_u1.weight", 33),
            ("dec_out.weight", 12),
            ("image_fuse.gate.b.weight", 7),
            ("dec_d2.bias", 1),
        ];
        for (name, idx) in picks {
            let slot = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
            let analytic = flat_grads[slot][idx];
            let mut plus = params.clone();
            plus.named_tensors_mut()[slot].1.data_mut()[idx] += eps;
            let mut minus = params.clone();
            minus.named_tensors_mut()[slot].1.data_mut()[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{idx}]: fd {fd} vs analytic {analytic} (rel {rel})");
        }
    }

    #[test]
    fn confidence_and_embedding_signals_reach_the_encoder() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        nudge(&mut params, &mut rng);
        let lr = Tensor::rand_uniform(1, 3, 16, 16, 0.05, 0.95, &mut rng);
        let ref_img = Tensor::rand_uniform(1, 3, 16, 16, 0.05, 0.95, &mut rng);
        let trace = forward(&params, &cfg, &lr, &ref_img).unwrap();
        let (qh, qw) = trace.match_result.query_grid;
        let signal = LossSignal {
            grad_sr: Tensor::zeros(1, 3, 32, 32),
            grad_conf: Some(Tensor::full(1, 1, qh, qw, 0.3)),
            embed: None,
        };
        let grads = backward(&params, &trace, &signal).unwrap();
        assert!(grads.match_enc[0].weight.abs_max() > 0.0);
        assert!(grads.match_enc[2].weight.abs_max() > 0.0);
        // Everything downstream of the confidence map stays untouched.
        assert_eq!(grads.dec_out.weight.abs_max(), 0.0);
    }
}
