//! End-to-end acceptance gates. Each gate prints exactly one PASS/FAIL line
//! with its key numbers; the test fails if any gate fails. Wall-time budgets
//! assume the single-threaded test configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refsr_core::gradcheck;
use refsr_core::matching::{brute_force_match, match_features, tiled_match, MatchResult};
use refsr_core::model::{
    forward, init_params, save_checkpoint, ModelConfig, SearchMode, SearchSpec,
};
use refsr_core::ops::{
    bicubic_resize, fold_patches, gaussian_blur3x3, grid_sample_bilinear, resize_bilinear,
    unfold_patches, ResizeFactor,
};
use refsr_core::pipeline::{
    adapt_sra, evaluate, mean_gate_activation, psnr, ssim, synth_dataset, synth_dataset_shifted,
    train, TrainConfig, PSNR_CAP_DB,
};
use refsr_core::losses::LossMode;
use refsr_core::fusion::FusionMode;
use refsr_core::warp::{optimize_patch_affine, AffineField};
use refsr_core::{Image, Tensor};
use std::time::Instant;

struct Gate {
    name: &'static str,
    passed: bool,
}

/// Run one gate under a wall-time budget and print its single verdict line.
fn gate(
    results: &mut Vec<Gate>,
    name: &'static str,
    budget_secs: f64,
    run: impl FnOnce() -> Result<String, String>,
) {
    let started = Instant::now();
    let outcome = run();
    let elapsed = started.elapsed().as_secs_f64();
    let on_time = elapsed < budget_secs;
    let (passed, detail) = match outcome {
        Ok(d) if on_time => (true, d),
        Ok(d) => (false, format!("{d}; over {budget_secs:.0}s budget")),
        Err(d) => (false, d),
    };
    println!("{} {name}: {detail} [{elapsed:.1}s]", if passed { "PASS" } else { "FAIL" });
    results.push(Gate { name, passed });
}

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(1, c, h, w, lo, hi, rng)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

fn gate_gradients() -> Result<String, String> {
    let report = gradcheck::run_all(1);
    let worst = report
        .results
        .iter()
        .max_by(|a, b| {
            (a.max_rel_err / a.tolerance).partial_cmp(&(b.max_rel_err / b.tolerance)).unwrap()
        })
        .expect("non-empty report");
    let summary = format!(
        "{} checks, worst {} at rel err {:.2e} (tol {:.0e})",
        report.results.len(),
        worst.name,
        worst.max_rel_err,
        worst.tolerance
    );
    if report.all_passed() {
        Ok(summary)
    } else {
        let names: Vec<_> = report.failures().iter().map(|r| r.name).collect();
        Err(format!("{summary}; failing: {names:?}"))
    }
}

// ---------------------------------------------------------------------------
// 2. Matching oracle

fn gate_matching_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instances = 100;
    for i in 0..instances {
        let c = rng.gen_range(2..6);
        let (qh, qw) = (rng.gen_range(4..11), rng.gen_range(4..11));
        let (rh, rw) = (rng.gen_range(4..11), rng.gen_range(4..11));
        let q = rand_tensor(&mut rng, c, qh, qw, -1.0, 1.0);
        let r = rand_tensor(&mut rng, c, rh, rw, -1.0, 1.0);

        let fast = match_features(&q, &r).map_err(|e| e.to_string())?;
        let slow = brute_force_match(&q, &r).map_err(|e| e.to_string())?;
        if fast.index_map != slow.index_map {
            return Err(format!("instance {i}: index maps diverge from the brute-force oracle"));
        }
        let dconf = fast
            .confidence
            .iter()
            .zip(&slow.confidence)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dconf > 1e-6 {
            return Err(format!("instance {i}: confidence diverges by {dconf:.2e}"));
        }

        // A margin covering the whole source grid makes tiled search exhaustive.
        let full_margin = rh.max(rw);
        let tiled = tiled_match(&q, &r, rng.gen_range(2..6), full_margin)
            .map_err(|e| e.to_string())?;
        if tiled.index_map != fast.index_map || tiled.confidence != fast.confidence {
            return Err(format!("instance {i}: full-margin tiled match differs from exhaustive"));
        }
    }
    Ok(format!("{instances} instances, indices exact, confidences within 1e-6"))
}

// ---------------------------------------------------------------------------
// 3. Identity / degeneracy suite

fn identity_match(gh: usize, gw: usize) -> MatchResult {
    MatchResult {
        index_map: (0..gh * gw).collect(),
        confidence: vec![1.0; gh * gw],
        query_grid: (gh, gw),
        source_grid: (gh, gw),
    }
}

fn gate_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Self-match identity.
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, 4, 7, 9, -1.0, 1.0);
        let m = match_features(&x, &x).map_err(|e| e.to_string())?;
        if !m.index_map.iter().enumerate().all(|(qi, &s)| s == qi) {
            return Err("self-match is not the identity index map".into());
        }
        if m.confidence.iter().any(|c| (c - 1.0).abs() > 1e-5) {
            return Err("self-match confidence strays from 1".into());
        }
    }

    // Identity affine pass-through.
    for &s in &[1usize, 2, 4] {
        let g = 5;
        let x = rand_tensor(&mut rng, 3, g * s, g * s, -1.0, 1.0);
        let out = refsr_core::warp::apply_patch_affine(
            &x,
            &identity_match(g, g),
            &AffineField::identity(g, g),
            s,
        )
        .map_err(|e| e.to_string())?;
        if max_abs_diff(&x, &out) > 1e-6 {
            return Err(format!("identity warp at scale {s} moves the image"));
        }
    }

    // Closed-gate pipeline reduction: with every fusion gate saturated shut
    // the output ignores the reference entirely. The bias sits deep enough in
    // sigmoid's underflow range that the gate is exactly 0.0, not merely tiny,
    // so the reference stream cannot perturb even the lowest-order bits.
    let config = ModelConfig { search: SearchSpec { mode: SearchMode::Full, tile: 32, margin: 8 }, ..Default::default() };
    let mut params = init_params(&config, 33);
    for bias in [
        &mut params.fuse1.gate.b.bias,
        &mut params.fuse2.gate.b.bias,
        &mut params.image_fuse.gate.b.bias,
    ] {
        *bias = bias.map(|_| -1.0e6);
    }
    let lr = rand_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let ref_a = rand_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let ref_b = rand_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let tr_a = forward(&params, &config, &lr, &ref_a).map_err(|e| e.to_string())?;
    let tr_b = forward(&params, &config, &lr, &ref_b).map_err(|e| e.to_string())?;
    if max_abs_diff(&tr_a.sr, &tr_a.decoded) > 1e-12 {
        return Err("closed gates do not reduce the output to the decoder path".into());
    }
    if tr_a.sr.data() != tr_b.sr.data() {
        return Err("closed-gate output still depends on the reference".into());
    }

    // Fold inverts unfold.
    for &k in &[1usize, 3, 5] {
        let x = rand_tensor(&mut rng, 3, 10, 8, -1.0, 1.0);
        let back = fold_patches(&unfold_patches(&x, k).map_err(|e| e.to_string())?, 3, 10, 8, k)
            .map_err(|e| e.to_string())?;
        if max_abs_diff(&x, &back) > 1e-6 {
            return Err(format!("fold/unfold round trip fails at k={k}"));
        }
    }

    // Constant preservation of every resampler and blur.
    let flat = Tensor::full(1, 3, 12, 12, 0.6180339887);
    let outputs = [
        bicubic_resize(&flat, ResizeFactor::Up2),
        bicubic_resize(&flat, ResizeFactor::Down2),
        resize_bilinear(&flat, 7, 9),
        gaussian_blur3x3(&flat, 0.5),
        gaussian_blur3x3(&flat, 1.0),
    ];
    for out in outputs {
        let out = out.map_err(|e| e.to_string())?;
        if out.data().iter().any(|v| (v - 0.6180339887).abs() > 1e-12) {
            return Err("a resampler fails to preserve constants".into());
        }
    }

    Ok("self-match, identity warp, closed gates, fold/unfold, constants all hold".into())
}

// ---------------------------------------------------------------------------
// 4. Alignment recoverability

fn gate_alignment() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let extent = 16usize;
    let pairs = 50usize;
    let mut wins = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        // Smooth multi-sinusoid source, so the bilinear L2 landscape has a
        // usable basin around the true warp.
        let mut src = Tensor::zeros(1, 3, extent, extent);
        for _ in 0..4 {
            let fx = rng.gen_range(-1.0..1.0) / 6.0;
            let fy = rng.gen_range(-1.0..1.0) / 6.0;
            let ph = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] =
                [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)];
            for ci in 0..3 {
                for y in 0..extent {
                    for x in 0..extent {
                        *src.at_mut(0, ci, y, x) += amp[ci]
                            * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
                    }
                }
            }
        }
        // A known global affine misalignment, sized so the per-patch
        // correction stays inside the squash bounds at every position.
        let theta: f64 = rng.gen_range(-3.0f64..3.0).to_radians();
        let scale = rng.gen_range(0.975..1.025);
        let (tx, ty) = (rng.gen_range(-0.75..0.75), rng.gen_range(-0.75..0.75));
        let c = (extent as f64 - 1.0) / 2.0;
        let grid = Tensor::from_fn(1, 2, extent, extent, |_, ch, y, x| {
            let (ux, uy) = (x as f64 - c, y as f64 - c);
            let gx = scale * (theta.cos() * ux - theta.sin() * uy) + c + tx;
            let gy = scale * (theta.sin() * ux + theta.cos() * uy) + c + ty;
            if ch == 0 {
                gx
            } else {
                gy
            }
        });
        let target = grid_sample_bilinear(&src, &grid).map_err(|e| e.to_string())?;
        let m = identity_match(extent, extent);
        let (_, out) =
            optimize_patch_affine(&src, &target, &m, 1, 60, 0.05).map_err(|e| e.to_string())?;
        let ratio = out.final_l2 / out.initial_l2.max(1e-30);
        worst = worst.max(ratio);
        if ratio <= 0.5 {
            wins += 1;
        }
    }
    let needed = (pairs * 9).div_ceil(10);
    if wins >= needed {
        Ok(format!("{wins}/{pairs} pairs halve their L2 (worst ratio {worst:.3})"))
    } else {
        Err(format!("only {wins}/{pairs} pairs halve their L2 (need {needed})"))
    }
}

// ---------------------------------------------------------------------------
// 5. Desk-scale training

/// Pinned margin the desk-scale run must beat. Calibrated once against the
/// bicubic oracle on this configuration: the run reaches 24.199 dB against a
/// 23.820 dB baseline (+0.379 dB) in ~16 minutes single-threaded. A collapse
/// onto the bicubic skip — the failure mode this gate exists to catch —
/// scores +0.0 dB. The margin's ceiling under this data generator's
/// perturbation model (random affine up to +-10 degrees plus channel gains)
/// is set by how precisely the learned per-patch alignment can be predicted
/// at this training scale: with an unperturbed reference the same pipeline
/// exceeds the baseline by over 40 dB.
const DESK_SCALE_MARGIN_DB: f64 = 0.30;

/// Training shape for the desk-scale run, fixed by the calibration run.
fn desk_scale_config() -> TrainConfig {
    TrainConfig {
        seed: 42,
        steps: 2000,
        batch_size: 1,
        lr: 3e-4,
        w_fid: 0.0,
        loss_mode: LossMode::L1,
        fusion: FusionMode::Adaptive,
        search: SearchSpec { mode: SearchMode::Full, tile: 32, margin: 8 },
        extent: 64,
        n_pairs: 64,
        eval_every: 0,
        ..Default::default()
    }
}

fn gate_training() -> Result<String, String> {
    let cfg = desk_scale_config();
    let train_pairs =
        synth_dataset(cfg.seed, cfg.n_pairs, cfg.extent).map_err(|e| e.to_string())?;
    let eval_pairs = synth_dataset(cfg.seed + 1000, 8, cfg.extent).map_err(|e| e.to_string())?;
    let outcome = train(&cfg, &train_pairs, &eval_pairs, |_| {}).map_err(|e| e.to_string())?;
    let margin = outcome.final_eval.psnr - outcome.baseline.psnr;
    let summary = format!(
        "eval {:.3} dB vs bicubic {:.3} dB (margin {margin:+.3}, pinned {DESK_SCALE_MARGIN_DB:+.2})",
        outcome.final_eval.psnr, outcome.baseline.psnr
    );
    if margin >= DESK_SCALE_MARGIN_DB {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------------------
// 6. Ablation directions

/// Shared shape for the ablation runs: small extents, short budget.
fn ablation_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        steps: 300,
        batch_size: 1,
        lr: 3e-4,
        w_fid: 0.0,
        loss_mode: LossMode::L1,
        fusion: FusionMode::Adaptive,
        search: SearchSpec { mode: SearchMode::Full, tile: 32, margin: 8 },
        extent: 32,
        n_pairs: 16,
        eval_every: 0,
        ..Default::default()
    }
}

fn gate_ablations() -> Result<String, String> {
    // (a) adaptive vs summation fusion, three seeds, majority.
    let mut adaptive_wins = 0usize;
    for seed in [1u64, 2, 3] {
        let tp = synth_dataset(seed, 16, 32).map_err(|e| e.to_string())?;
        let ep = synth_dataset(seed + 1000, 6, 32).map_err(|e| e.to_string())?;
        let mut psnrs = [0.0f64; 2];
        for (slot, fusion) in [FusionMode::Adaptive, FusionMode::Sum].into_iter().enumerate() {
            let cfg = TrainConfig { fusion, ..ablation_config(seed) };
            let out = train(&cfg, &tp, &ep, |_| {}).map_err(|e| e.to_string())?;
            psnrs[slot] = out.final_eval.psnr;
        }
        if psnrs[0] >= psnrs[1] {
            adaptive_wins += 1;
        }
    }

    // (b) the fidelity term keeps the reference pathway awake: strictly
    // higher mean gate activation than without it.
    let seed = 7u64;
    let tp = synth_dataset(seed, 16, 32).map_err(|e| e.to_string())?;
    let ep = synth_dataset(seed + 1000, 6, 32).map_err(|e| e.to_string())?;
    let mut activations = [0.0f64; 2];
    for (slot, w_fid) in [0.0f64, 0.1].into_iter().enumerate() {
        let cfg = TrainConfig { w_fid, seed, ..ablation_config(seed) };
        let out = train(&cfg, &tp, &ep, |_| {}).map_err(|e| e.to_string())?;
        activations[slot] = mean_gate_activation(&out.params, &cfg.model_config(), &tp)
            .map_err(|e| e.to_string())?
            .ok_or("gated fusion reported no gate activity")?;
    }
    let fid_awake = activations[1] > activations[0];

    // (c) self-supervised adaptation on a shifted domain, three seeds.
    let base_cfg = ablation_config(11);
    let base_tp = synth_dataset(base_cfg.seed, 16, 32).map_err(|e| e.to_string())?;
    let base_ep = synth_dataset(base_cfg.seed + 1000, 6, 32).map_err(|e| e.to_string())?;
    let base = train(&base_cfg, &base_tp, &base_ep, |_| {}).map_err(|e| e.to_string())?;
    let mcfg = base_cfg.model_config();
    let mut adapt_wins = 0usize;
    for seed in [21u64, 22, 23] {
        let shifted = synth_dataset_shifted(seed, 8, 32).map_err(|e| e.to_string())?;
        let before = evaluate(&base.params, &mcfg, &shifted).map_err(|e| e.to_string())?;
        let acfg = TrainConfig { seed, steps: 100, lr: 2e-4, ..base_cfg.clone() };
        let adapted = adapt_sra(base.params.clone(), &acfg, &shifted, |_, _| {})
            .map_err(|e| e.to_string())?;
        let after = evaluate(&adapted.params, &mcfg, &shifted).map_err(|e| e.to_string())?;
        if after.psnr > before.psnr {
            adapt_wins += 1;
        }
    }

    let summary = format!(
        "adaptive>=sum {adaptive_wins}/3, gate {:.4}->{:.4} with fidelity, adaptation {adapt_wins}/3",
        activations[0], activations[1]
    );
    if adaptive_wins >= 2 && fid_awake && adapt_wins >= 2 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------------------
// 7. Metric correctness

fn gate_metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, 3, 16, 16, 0.0, 0.9);
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b).map_err(|e| e.to_string())?;
    if (p - 20.0).abs() > 0.01 {
        return Err(format!("uniform 0.1 difference gives {p:.4} dB, want 20.00 +- 0.01"));
    }

    // Naive per-pixel recomputation oracle for PSNR.
    let x = rand_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let y = rand_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        / x.data().len() as f64;
    let naive = (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB);
    let fast = psnr(&x, &y).map_err(|e| e.to_string())?;
    if (naive - fast).abs() > 1e-9 {
        return Err(format!("psnr differs from naive recomputation by {:.2e}", (naive - fast).abs()));
    }

    let s_self = ssim(&x, &x).map_err(|e| e.to_string())?;
    if s_self != 1.0 {
        return Err(format!("ssim(x,x) = {s_self}, want exactly 1"));
    }
    let s = ssim(&x, &y).map_err(|e| e.to_string())?;
    let s_naive = naive_ssim(&x, &y);
    if (s - s_naive).abs() > 1e-9 {
        return Err(format!("ssim differs from naive recomputation by {:.2e}", (s - s_naive).abs()));
    }
    Ok(format!("psnr 20.00 dB exact, ssim(x,x)=1, oracles agree (ssim {s:.4})"))
}

/// Independent SSIM recomputation: explicit window loops on the luminance
/// plane, valid positions only.
fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let lum = |t: &Tensor| -> Vec<f64> {
        let (h, w) = (t.h(), t.w());
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = 0.299 * t.at(0, 0, y, x)
                    + 0.587 * t.at(0, 1, y, x)
                    + 0.114 * t.at(0, 2, y, x);
            }
        }
        out
    };
    let (h, w) = (a.h(), a.w());
    let la = lum(a);
    let lb = lum(b);

    let mut win = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (uy, ux) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(uy * uy + ux * ux) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }

    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - 11) {
        for x0 in 0..=(w - 11) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    ma += win[dy][dx] * la[(y0 + dy) * w + x0 + dx];
                    mb += win[dy][dx] * lb[(y0 + dy) * w + x0 + dx];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let da = la[(y0 + dy) * w + x0 + dx] - ma;
                    let db = lb[(y0 + dy) * w + x0 + dx] - mb;
                    va += win[dy][dx] * da * da;
                    vb += win[dy][dx] * db * db;
                    cov += win[dy][dx] * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

// ---------------------------------------------------------------------------
// 8. Determinism

fn gate_determinism() -> Result<String, String> {
    let cfg = TrainConfig {
        steps: 10,
        extent: 32,
        n_pairs: 4,
        loss_mode: LossMode::L1,
        eval_every: 0,
        search: SearchSpec { mode: SearchMode::Full, tile: 32, margin: 8 },
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checkpoints = Vec::new();
    let mut pngs = Vec::new();
    for run in 0..2 {
        let tp = synth_dataset(cfg.seed, cfg.n_pairs, cfg.extent).map_err(|e| e.to_string())?;
        let ep = synth_dataset(cfg.seed + 1000, 2, cfg.extent).map_err(|e| e.to_string())?;
        let out = train(&cfg, &tp, &ep, |_| {}).map_err(|e| e.to_string())?;
        let ckpt_path = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&ckpt_path, &out.params, &cfg.model_config(), cfg.seed)
            .map_err(|e| e.to_string())?;
        checkpoints.push(std::fs::read(&ckpt_path).map_err(|e| e.to_string())?);

        let trace = forward(&out.params, &cfg.model_config(), &tp[0].lr, &tp[0].ref_img)
            .map_err(|e| e.to_string())?;
        let png_path = dir.path().join(format!("run{run}.png"));
        Image::from_tensor(&trace.sr.map(|v| v.clamp(0.0, 1.0)))
            .map_err(|e| e.to_string())?
            .save_png(&png_path)
            .map_err(|e| e.to_string())?;
        pngs.push(std::fs::read(&png_path).map_err(|e| e.to_string())?);
    }
    if checkpoints[0] != checkpoints[1] {
        return Err("checkpoints differ between identical runs".into());
    }
    if pngs[0] != pngs[1] {
        return Err("rendered outputs differ between identical runs".into());
    }
    Ok(format!(
        "checkpoints ({} bytes) and outputs byte-identical across reruns",
        checkpoints[0].len()
    ))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results = Vec::new();
    gate(&mut results, "gradient suite", 300.0, gate_gradients);
    gate(&mut results, "matching oracle", 120.0, gate_matching_oracle);
    gate(&mut results, "identity suite", 120.0, gate_identities);
    gate(&mut results, "alignment recoverability", 180.0, gate_alignment);
    gate(&mut results, "desk-scale training", 1800.0, gate_training);
    gate(&mut results, "ablation directions", 1800.0, gate_ablations);
    gate(&mut results, "metric correctness", 120.0, gate_metrics);
    gate(&mut results, "determinism", 600.0, gate_determinism);

    let failed: Vec<&str> = results.iter().filter(|g| !g.passed).map(|g| g.name).collect();
    assert!(failed.is_empty(), "acceptance gates failed: {failed:?}");
}
