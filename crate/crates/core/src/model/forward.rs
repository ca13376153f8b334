use crate::error::{CoreError, Result};
use crate::fusion::{hf_residual, FusionSiteTape, ImageFuseTape};
use crate::layers::{relu, ConvLayer};
use crate::matching::{match_features, tiled_match, MatchResult};
use crate::model::config::{ModelConfig, SearchMode};
use crate::model::params::ModelParams;
use crate::ops::{bicubic_resize, resize_bilinear, ResizeFactor};
use crate::tensor::Tensor;
use crate::warp::{apply_patch_affine, warp_by_index, AffineField, AlignTape};

/// Smallest accepted spatial extent for either input.
pub const MIN_EXTENT: usize = 16;

fn check_inputs(lr: &Tensor, ref_img: &Tensor) -> Result<()> {
    let (lb, lc, lh, lw) = lr.shape();
    let (rb, rc, rh, rw) = ref_img.shape();
    if lb != 1 || rb != 1 || lc != 3 || rc != 3 {
        return Err(CoreError::shape(
            "model inputs",
            "(1, 3, _, _) each",
            format!("lr {:?}, ref {:?}", lr.shape(), ref_img.shape()),
        ));
    }
    if lh < MIN_EXTENT || lw < MIN_EXTENT || lh % 2 != 0 || lw % 2 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "input extents must be even and >= {MIN_EXTENT}, got {lh}x{lw}"
        )));
    }
    if rh < MIN_EXTENT || rw < MIN_EXTENT || rh % 4 != 0 || rw % 4 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "reference extents must be divisible by 4 and >= {MIN_EXTENT}, got {rh}x{rw}"
        )));
    }
    Ok(())
}

pub(crate) fn encode3(layers: &[ConvLayer; 3], input: &Tensor) -> Result<[Tensor; 3]> {
    let f1 = relu(&layers[0].forward(input)?);
    let f2 = relu(&layers[1].forward(&f1)?);
    let f3 = relu(&layers[2].forward(&f2)?);
    Ok([f1, f2, f3])
}

/// Every intermediate of one forward pass, retained for the backward pass
/// and for inspection (debug dumps, gate statistics).
pub struct ForwardTrace {
    pub lr: Tensor,
    pub ref_img: Tensor,
    pub lr_up: Tensor,
    /// Matching-encoder activations of the upscaled input, fine to coarse.
    pub q_feats: [Tensor; 3],
    /// Matching-encoder activations of the reference, fine to coarse.
    pub r_feats: [Tensor; 3],
    pub match_result: MatchResult,
    /// Raw match confidences over the query grid, as a (1,1,gh,gw) map.
    pub conf_map: Tensor,
    /// Reference pyramid activations, fine to coarse.
    pub pyramid: [Tensor; 3],
    /// Reference image hard-warped to the output grid.
    pub ref_matched: Tensor,
    pub align_tape: AlignTape,
    pub field: AffineField,
    pub entry_out: Tensor,
    /// Per residual block: the mid activation `relu(c1(x))`.
    pub block_mids: Vec<Tensor>,
    /// Per residual block: the block output.
    pub block_outs: Vec<Tensor>,
    pub conf1: Tensor,
    pub ref_al1: Tensor,
    pub fuse1_tape: FusionSiteTape,
    pub fused1: Tensor,
    pub d1_out: Tensor,
    pub up1: Tensor,
    pub u1_out: Tensor,
    pub conf2: Tensor,
    pub ref_al2: Tensor,
    pub fuse2_tape: FusionSiteTape,
    pub fused2: Tensor,
    pub d2_out: Tensor,
    pub up2: Tensor,
    pub u2_out: Tensor,
    /// Decoder output before the global bicubic skip.
    pub pre_skip: Tensor,
    pub decoded: Tensor,
    pub hf: Tensor,
    pub hf_al: Tensor,
    pub conf3: Tensor,
    pub image_tape: ImageFuseTape,
    /// The super-resolved output at twice the input extent.
    pub sr: Tensor,
}

impl ForwardTrace {
    /// Gate maps actually applied this pass (empty in summation mode).
    pub fn gate_maps(&self) -> Vec<&Tensor> {
        [self.fuse1_tape.gate_map(), self.fuse2_tape.gate_map(), self.image_tape.gate_map()]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Mean of all applied gate values, if any gates were applied.
    pub fn mean_gate_activation(&self) -> Option<f64> {
        let maps = self.gate_maps();
        let n: usize = maps.iter().map(|m| m.numel()).sum();
        if n == 0 {
            return None;
        }
        Some(maps.iter().map(|m| m.sum()).sum::<f64>() / n as f64)
    }
}

/// Run the full pipeline: match the upscaled input against the reference,
/// hard-warp the reference for alignment prediction, refine per-level warps
/// with the predicted affine field, fuse reference features into the
/// backbone and decoder, and gate the reference's high-frequency residual
/// onto the decoded image.
pub fn forward(params: &ModelParams, config: &ModelConfig, lr: &Tensor, ref_img: &Tensor) -> Result<ForwardTrace> {
    check_inputs(lr, ref_img)?;
    let lr_up = bicubic_resize(lr, ResizeFactor::Up2)?;

    // Patch matching on the shared encoder's coarse features.
    let q_feats = encode3(&params.match_enc, &lr_up)?;
    let r_feats = encode3(&params.match_enc, ref_img)?;
    let match_result = match config.search.mode {
        SearchMode::Full => match_features(&q_feats[2], &r_feats[2])?,
        SearchMode::Tiled => {
            tiled_match(&q_feats[2], &r_feats[2], config.search.tile, config.search.margin)?
        }
    };
    let conf_map = match_result.confidence_tensor();

    // Reference pyramid and the hard-warped reference image.
    let pyramid = encode3(&params.pyramid, ref_img)?;
    let ref_matched = warp_by_index(ref_img, &match_result, 4)?;

    // Alignment prediction from the stacked input and matched reference.
    let align_in = Tensor::concat_channels(&[&lr_up, &ref_matched])?;
    let (field, align_tape) = params.align.forward(&align_in)?;

    // Backbone at half input resolution.
    let entry_out = relu(&params.backbone_entry.forward(lr)?);
    let mut block_mids = Vec::with_capacity(params.blocks.len());
    let mut block_outs = Vec::with_capacity(params.blocks.len());
    let mut x = entry_out.clone();
    for block in &params.blocks {
        let mid = relu(&block.c1.forward(&x)?);
        let out = x.add(&block.c2.forward(&mid)?)?;
        block_mids.push(mid);
        block_outs.push(out.clone());
        x = out;
    }

    // Fusion at backbone resolution with coarse pyramid features.
    let ref_al1 = apply_patch_affine(&pyramid[2], &match_result, &field, 1)?;
    let conf1 = resize_bilinear(&conf_map, x.h(), x.w())?;
    let (fused1, fuse1_tape) = params.fuse1.forward(&x, &ref_al1, &conf1, config.fusion)?;

    // First decoder stage up to input resolution.
    let d1_out = relu(&params.dec_d1.forward(&fused1)?);
    let up1 = bicubic_resize(&d1_out, ResizeFactor::Up2)?;
    let u1_out = relu(&params.dec_u1.forward(&up1)?);

    // Fusion at input resolution with middle pyramid features.
    let ref_al2 = apply_patch_affine(&pyramid[1], &match_result, &field, 2)?;
    let conf2 = resize_bilinear(&conf_map, u1_out.h(), u1_out.w())?;
    let (fused2, fuse2_tape) = params.fuse2.forward(&u1_out, &ref_al2, &conf2, config.fusion)?;

    // Second decoder stage up to output resolution, plus the global skip.
    let d2_out = relu(&params.dec_d2.forward(&fused2)?);
    let up2 = bicubic_resize(&d2_out, ResizeFactor::Up2)?;
    let u2_out = relu(&params.dec_u2.forward(&up2)?);
    let pre_skip = params.dec_out.forward(&u2_out)?;
    let decoded = pre_skip.add(&lr_up)?;

    // Image-space fusion of the reference's high-frequency residual.
    let hf = hf_residual(ref_img)?;
    let hf_al = apply_patch_affine(&hf, &match_result, &field, 4)?;
    let conf3 = resize_bilinear(&conf_map, decoded.h(), decoded.w())?;
    let (sr, image_tape) = params.image_fuse.forward(&decoded, &hf_al, &conf3, config.fusion)?;

    Ok(ForwardTrace {
        lr: lr.clone(),
        ref_img: ref_img.clone(),
        lr_up,
        q_feats,
        r_feats,
        match_result,
        conf_map,
        pyramid,
        ref_matched,
        align_tape,
        field,
        entry_out,
        block_mids,
        block_outs,
        conf1,
        ref_al1,
        fuse1_tape,
        fused1,
        d1_out,
        up1,
        u1_out,
        conf2,
        ref_al2,
        fuse2_tape,
        fused2,
        d2_out,
        up2,
        u2_out,
        pre_skip,
        decoded,
        hf,
        hf_al,
        conf3,
        image_tape,
        sr,
    })
}
