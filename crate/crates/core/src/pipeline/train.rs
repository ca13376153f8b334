//! Training, self-supervised adaptation and evaluation loops.

use crate::error::{CoreError, Result};
use crate::fusion::FusionMode;
use crate::layers::ConvLayerGrads;
use crate::losses::{fidelity_loss, reconstruction_loss, sra_loss, LossMode};
use crate::model::{
    backward, forward, init_params, LossSignal, ModelConfig, ModelParams, SearchSpec,
};
use crate::ops::{bicubic_resize, ResizeFactor};
use crate::pipeline::metrics::{psnr, ssim};
use crate::pipeline::optim::{Adam, AdamConfig};
use crate::pipeline::synth::SynthPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything a training or adaptation run needs besides the data itself.
/// Deserializes from JSON with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the confidence-weighted feature fidelity term.
    pub w_fid: f64,
    /// Weight of the fidelity term inside the adaptation objective.
    pub lambda: f64,
    /// Target-image extent of synthesized datasets.
    pub extent: usize,
    /// Number of synthesized pairs.
    pub n_pairs: usize,
    pub loss_mode: LossMode,
    pub fusion: FusionMode,
    pub search: SearchSpec,
    /// Evaluate every this many steps (0 = only after the final step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            w_fid: 0.1,
            lambda: 0.1,
            extent: 64,
            n_pairs: 64,
            loss_mode: LossMode::Full,
            fusion: FusionMode::Adaptive,
            search: SearchSpec::default(),
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// The model this run trains: default widths, this run's fusion and
    /// search settings.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { fusion: self.fusion, search: self.search, ..Default::default() }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
}

/// One logged step. The loss columns are the batch means; the fidelity
/// column is the weighted contribution to the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_fid: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<TrainLogRow>,
    pub final_eval: EvalSummary,
    /// Plain bicubic upscaling on the same evaluation pairs.
    pub baseline: EvalSummary,
}

/// Separates the batch-sampling stream from the init stream of the same seed.
const BATCH_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn scaled_embed(embed: Option<ConvLayerGrads>, s: f64) -> Option<ConvLayerGrads> {
    embed.map(|e| ConvLayerGrads { weight: e.weight.scale(s), bias: e.bias.scale(s) })
}

fn merge_embed(
    base: Option<ConvLayerGrads>,
    extra: Option<ConvLayerGrads>,
) -> Result<Option<ConvLayerGrads>> {
    match (base, extra) {
        (Some(mut a), Some(b)) => {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
            Ok(Some(a))
        }
        (a, b) => Ok(a.or(b)),
    }
}

/// Train from scratch on synthesized pairs. `on_row` fires after every step,
/// with evaluation numbers filled in on evaluation steps.
pub fn train(
    cfg: &TrainConfig,
    train_pairs: &[SynthPair],
    eval_pairs: &[SynthPair],
    mut on_row: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() || eval_pairs.is_empty() {
        return Err(CoreError::InvalidArgument("training and eval sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(CoreError::InvalidArgument("steps and batch_size must be positive".into()));
    }
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mut params = init_params(&model_cfg, cfg.seed);
    let mut opt = Adam::new(cfg.adam(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut final_eval = None;

    for step in 1..=cfg.steps {
        let mut grads = params.zeros_like();
        let (mut total_acc, mut rec_acc, mut fid_acc) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let pair = &train_pairs[rng.gen_range(0..train_pairs.len())];
            let trace = forward(&params, &model_cfg, &pair.lr, &pair.ref_img)?;
            let rec = reconstruction_loss(&trace.sr, &pair.hr, &params.match_enc[0], cfg.loss_mode)?;
            let mut signal =
                LossSignal { grad_sr: rec.grad_sr, grad_conf: None, embed: rec.embed };
            let mut sample_total = rec.value;
            if cfg.w_fid != 0.0 {
                let fid =
                    fidelity_loss(&trace.sr, &pair.ref_img, &trace.conf_map, &params.match_enc[0])?;
                sample_total += cfg.w_fid * fid.value;
                fid_acc += cfg.w_fid * fid.value;
                signal.grad_sr.add_assign(&fid.grad_x.scale(cfg.w_fid))?;
                signal.grad_conf = Some(fid.grad_conf.scale(cfg.w_fid));
                signal.embed = merge_embed(signal.embed, scaled_embed(fid.embed, cfg.w_fid))?;
            }
            total_acc += sample_total;
            rec_acc += rec.value;
            grads.add_assign(&backward(&params, &trace, &signal)?);
        }
        let bs = cfg.batch_size as f64;
        grads.scale_assign(1.0 / bs);
        let loss_total = total_acc / bs;
        if !loss_total.is_finite() {
            return Err(CoreError::NonFiniteLoss { step, value: loss_total });
        }
        opt.step(&mut params, &grads)?;

        let eval_now = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let (eval_psnr, eval_ssim) = if eval_now {
            let ev = evaluate(&params, &model_cfg, eval_pairs)?;
            final_eval = Some(ev);
            (Some(ev.psnr), Some(ev.ssim))
        } else {
            (None, None)
        };
        let row = TrainLogRow {
            step,
            loss_total,
            loss_rec: rec_acc / bs,
            loss_fid: fid_acc / bs,
            eval_psnr,
            eval_ssim,
        };
        on_row(&row);
        history.push(row);
    }

    let final_eval = final_eval.expect("the final step always evaluates");
    let baseline = bicubic_baseline(eval_pairs)?;
    Ok(TrainOutcome { params, history, final_eval, baseline })
}

/// Mean PSNR/SSIM of the model's clamped output against the targets.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    pairs: &[SynthPair],
) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidArgument("evaluation set must be non-empty".into()));
    }
    let (mut p_acc, mut s_acc) = (0.0, 0.0);
    for pair in pairs {
        let trace = forward(params, config, &pair.lr, &pair.ref_img)?;
        let sr = trace.sr.map(|v| v.clamp(0.0, 1.0));
        p_acc += psnr(&sr, &pair.hr)?;
        s_acc += ssim(&sr, &pair.hr)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalSummary { psnr: p_acc / n, ssim: s_acc / n })
}

/// Mean PSNR/SSIM of plain bicubic upscaling on the same pairs.
pub fn bicubic_baseline(pairs: &[SynthPair]) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidArgument("evaluation set must be non-empty".into()));
    }
    let (mut p_acc, mut s_acc) = (0.0, 0.0);
    for pair in pairs {
        let up = bicubic_resize(&pair.lr, ResizeFactor::Up2)?.map(|v| v.clamp(0.0, 1.0));
        p_acc += psnr(&up, &pair.hr)?;
        s_acc += ssim(&up, &pair.hr)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalSummary { psnr: p_acc / n, ssim: s_acc / n })
}

/// Mean applied gate activation over a dataset, when the fusion mode gates.
pub fn mean_gate_activation(
    params: &ModelParams,
    config: &ModelConfig,
    pairs: &[SynthPair],
) -> Result<Option<f64>> {
    let (mut acc, mut n) = (0.0, 0usize);
    for pair in pairs {
        let trace = forward(params, config, &pair.lr, &pair.ref_img)?;
        if let Some(g) = trace.mean_gate_activation() {
            acc += g;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(acc / n as f64) })
}

pub struct AdaptOutcome {
    pub params: ModelParams,
    /// Mean adaptation loss over the dataset before any update.
    pub loss_before: f64,
    /// Same measurement after the final update.
    pub loss_after: f64,
}

fn mean_adapt_loss(
    params: &ModelParams,
    config: &ModelConfig,
    lambda: f64,
    pairs: &[SynthPair],
) -> Result<f64> {
    let mut acc = 0.0;
    for pair in pairs {
        let trace = forward(params, config, &pair.lr, &pair.ref_img)?;
        let loss = sra_loss(
            &trace.sr,
            &pair.lr,
            &pair.ref_img,
            &trace.conf_map,
            lambda,
            &params.match_enc[0],
        )?;
        acc += loss.value;
    }
    Ok(acc / pairs.len() as f64)
}

/// Adapt trained parameters to a new domain without ground truth: the output
/// must downsample back to the observed input and stay feature-faithful to
/// the reference. Targets in `pairs` are never read.
pub fn adapt_sra(
    params: ModelParams,
    cfg: &TrainConfig,
    pairs: &[SynthPair],
    mut on_step: impl FnMut(usize, f64),
) -> Result<AdaptOutcome> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidArgument("adaptation set must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(CoreError::InvalidArgument("steps and batch_size must be positive".into()));
    }
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mut params = params;
    let loss_before = mean_adapt_loss(&params, &model_cfg, cfg.lambda, pairs)?;
    let mut opt = Adam::new(cfg.adam(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);

    for step in 1..=cfg.steps {
        let mut grads = params.zeros_like();
        let mut total_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let trace = forward(&params, &model_cfg, &pair.lr, &pair.ref_img)?;
            let loss = sra_loss(
                &trace.sr,
                &pair.lr,
                &pair.ref_img,
                &trace.conf_map,
                cfg.lambda,
                &params.match_enc[0],
            )?;
            total_acc += loss.value;
            let signal = LossSignal {
                grad_sr: loss.grad_sr,
                grad_conf: Some(loss.grad_conf),
                embed: loss.embed,
            };
            grads.add_assign(&backward(&params, &trace, &signal)?);
        }
        let bs = cfg.batch_size as f64;
        grads.scale_assign(1.0 / bs);
        let loss_total = total_acc / bs;
        if !loss_total.is_finite() {
            return Err(CoreError::NonFiniteLoss { step, value: loss_total });
        }
        opt.step(&mut params, &grads)?;
        on_step(step, loss_total);
    }

    let loss_after = mean_adapt_loss(&params, &model_cfg, cfg.lambda, pairs)?;
    Ok(AdaptOutcome { params, loss_before, loss_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::synth_dataset;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            steps: 12,
            extent: 32,
            n_pairs: 4,
            loss_mode: LossMode::L1,
            eval_every: 0,
            search: SearchSpec { mode: crate::model::SearchMode::Full, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_survive_a_json_round_trip() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7, "lr": 0.01}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.lr, 0.01);
        assert_eq!(partial.seed, 42);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn a_short_run_descends_and_logs_every_step() {
        // Train on a single pair so every step measures the same sample and
        // the logged loss is directly comparable across steps.
        let cfg = TrainConfig { steps: 30, lr: 3e-3, ..quick_cfg() };
        let pairs = synth_dataset(cfg.seed, 1, cfg.extent).unwrap();
        let mut rows = Vec::new();
        let out = train(&cfg, &pairs, &pairs, |r| rows.push(*r)).unwrap();
        assert_eq!(rows.len(), cfg.steps);
        assert_eq!(out.history.len(), cfg.steps);
        let first = rows.first().unwrap().loss_total;
        let last = rows.last().unwrap().loss_total;
        assert!(last < first, "loss should descend: {first} -> {last}");
        assert!(rows.last().unwrap().eval_psnr.is_some(), "final step always evaluates");
        assert!(rows[0].eval_psnr.is_none(), "eval_every 0 skips intermediate evals");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = TrainConfig { steps: 4, ..quick_cfg() };
        let pairs = synth_dataset(cfg.seed, cfg.n_pairs, cfg.extent).unwrap();
        let a = train(&cfg, &pairs, &pairs[..1], |_| {}).unwrap();
        let b = train(&cfg, &pairs, &pairs[..1], |_| {}).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = train(&TrainConfig { seed: 43, ..cfg }, &pairs, &pairs[..1], |_| {}).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn adaptation_reduces_its_own_objective() {
        let cfg = TrainConfig { steps: 10, lr: 2e-3, ..quick_cfg() };
        let pairs = synth_dataset(3, 4, 32).unwrap();
        let params = init_params(&cfg.model_config(), 0);
        let out = adapt_sra(params, &cfg, &pairs, |_, _| {}).unwrap();
        assert!(
            out.loss_after < out.loss_before,
            "adaptation objective should drop: {} -> {}",
            out.loss_before,
            out.loss_after
        );
    }

    #[test]
    fn fidelity_weight_contributes_to_the_total() {
        let cfg = TrainConfig { steps: 1, ..quick_cfg() };
        let pairs = synth_dataset(1, 2, 32).unwrap();
        let mut with_fid = None;
        train(&cfg, &pairs, &pairs[..1], |r| with_fid = Some(*r)).unwrap();
        let row = with_fid.unwrap();
        assert!(row.loss_fid > 0.0);
        assert!((row.loss_total - row.loss_rec - row.loss_fid).abs() < 1e-12);
    }
}
