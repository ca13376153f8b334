//! Randomized structural invariants of the image kernels, the matcher, the
//! warp stage, the losses and the metrics.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refsr_core::losses::{
    contextual_distance, fidelity_loss, l1_loss, reconstruction_loss, LossMode,
};
use refsr_core::matching::{cosine_similarity_matrix, match_features, MatchResult};
use refsr_core::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig};
use refsr_core::ops::{
    bicubic_resize, fold_patches, gaussian_blur3x3, grid_sample_bilinear, resize_bilinear,
    unfold_patches, ResizeFactor,
};
use refsr_core::pipeline::{psnr, ssim, PSNR_CAP_DB};
use refsr_core::warp::{apply_patch_affine, squash, warp_by_index, AffineField};
use refsr_core::layers::ConvLayer;
use refsr_core::Tensor;

fn tensor(seed: u64, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(1, c, h, w, lo, hi, &mut rng)
}

/// A self-referential match: every query position points at itself.
fn identity_match(gh: usize, gw: usize) -> MatchResult {
    MatchResult {
        index_map: (0..gh * gw).collect(),
        confidence: vec![1.0; gh * gw],
        query_grid: (gh, gw),
        source_grid: (gh, gw),
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // --- image kernels ---------------------------------------------------

    #[test]
    fn fold_inverts_unfold(seed in 0u64..1000, c in 1usize..4, h in 5usize..14, w in 5usize..14, k in prop::sample::select(vec![1usize, 3, 5])) {
        let x = tensor(seed, c, h, w, -1.0, 1.0);
        let patches = unfold_patches(&x, k).unwrap();
        let back = fold_patches(&patches, c, h, w, k).unwrap();
        prop_assert!(max_abs_diff(&x, &back) < 1e-6);
    }

    #[test]
    fn constants_survive_resampling_and_blur(seed in 0u64..1000, v in 0.0f64..1.0, h in 4usize..10, w in 4usize..10) {
        let _ = seed;
        let x = Tensor::full(1, 3, 2 * h, 2 * w, v);
        for result in [
            bicubic_resize(&x, ResizeFactor::Up2).unwrap(),
            bicubic_resize(&x, ResizeFactor::Down2).unwrap(),
            gaussian_blur3x3(&x, 0.5).unwrap(),
            gaussian_blur3x3(&x, 1.0).unwrap(),
            resize_bilinear(&x, h + 3, w + 5).unwrap(),
        ] {
            for &o in result.data() {
                prop_assert!((o - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_grid_sampling_is_exact(seed in 0u64..1000, c in 1usize..4, h in 3usize..10, w in 3usize..10) {
        let x = tensor(seed, c, h, w, -1.0, 1.0);
        let grid = Tensor::from_fn(1, 2, h, w, |_, ch, y, xx| {
            if ch == 0 { xx as f64 } else { y as f64 }
        });
        let out = grid_sample_bilinear(&x, &grid).unwrap();
        prop_assert_eq!(x.data(), out.data());
    }

    // --- matching ---------------------------------------------------------

    #[test]
    fn matching_a_map_against_itself_is_the_identity(seed in 0u64..1000, c in 2usize..6, h in 4usize..9, w in 4usize..9) {
        let x = tensor(seed, c, h, w, -1.0, 1.0);
        let m = match_features(&x, &x).unwrap();
        for (qi, &src) in m.index_map.iter().enumerate() {
            prop_assert_eq!(src, qi);
        }
        for &conf in &m.confidence {
            prop_assert!((conf - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_rows_ignore_positive_patch_scaling(seed in 0u64..1000, n in 2usize..8, d in 2usize..10) {
        let q = tensor(seed, 1, n, d, -1.0, 1.0);
        let r = tensor(seed.wrapping_add(1), 1, n + 2, d, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let scales = Tensor::rand_uniform(1, 1, n + 2, 1, 0.1, 5.0, &mut rng);
        let scaled = Tensor::from_fn(1, 1, n + 2, d, |_, _, row, col| {
            r.at(0, 0, row, col) * scales.at(0, 0, row, 0)
        });
        let s0 = cosine_similarity_matrix(&q, &r).unwrap();
        let s1 = cosine_similarity_matrix(&q, &scaled).unwrap();
        prop_assert!(max_abs_diff(&s0, &s1) < 1e-5);
    }

    // --- warping ----------------------------------------------------------

    #[test]
    fn identity_match_and_field_pass_the_source_through(seed in 0u64..1000, c in 1usize..4, g in 3usize..7, s in prop::sample::select(vec![1usize, 2])) {
        let x = tensor(seed, c, g * s, g * s, -1.0, 1.0);
        let m = identity_match(g, g);
        let hard = warp_by_index(&x, &m, s).unwrap();
        prop_assert!(max_abs_diff(&x, &hard) < 1e-6);
        let refined = apply_patch_affine(&x, &m, &AffineField::identity(g, g), s).unwrap();
        prop_assert!(max_abs_diff(&x, &refined) < 1e-6);
    }

    #[test]
    fn zero_residual_refinement_equals_the_hard_warp(seed in 0u64..1000, c in 1usize..4, g in 3usize..7, s in prop::sample::select(vec![1usize, 2])) {
        let x = tensor(seed, c, g * s, g * s, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let random = match_features(
            &Tensor::rand_uniform(1, 3, g, g, -1.0, 1.0, &mut rng),
            &Tensor::rand_uniform(1, 3, g, g, -1.0, 1.0, &mut rng),
        ).unwrap();
        let hard = warp_by_index(&x, &random, s).unwrap();
        let refined = apply_patch_affine(&x, &random, &AffineField::identity(g, g), s).unwrap();
        prop_assert_eq!(hard.data(), refined.data());
    }

    #[test]
    fn squash_respects_its_bound(x in -50.0f64..50.0, bound in prop::sample::select(vec![0.5f64, 1.0, 2.0])) {
        let y = squash(x, bound);
        prop_assert!(y.abs() <= bound);
        prop_assert_eq!(y.signum(), if x == 0.0 { y.signum() } else { x.signum() });
        // Near zero the squash is the identity to first order.
        let small = squash(1e-9, bound);
        prop_assert!((small - 1e-9).abs() < 1e-12);
    }

    // --- losses -----------------------------------------------------------

    #[test]
    fn losses_vanish_on_identical_inputs(seed in 0u64..1000, c in 1usize..4, h in 6usize..10) {
        let x = tensor(seed, c, h, h, 0.1, 0.9);
        let (l1, _) = l1_loss(&x, &x).unwrap();
        prop_assert_eq!(l1, 0.0);

        let feats = tensor(seed.wrapping_add(1), 4, h, h, 0.1, 1.0);
        let (ctx, _) = contextual_distance(&feats, &feats).unwrap();
        prop_assert!(ctx.abs() < 1e-12);

        // Positive weights on positive input keep every embedded feature
        // vector away from zero, where cosine distance is undefined.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut embed = ConvLayer::init(6, c, 3, 1, &mut rng);
        embed.weight = embed.weight.map(f64::abs);
        let rgb = tensor(seed.wrapping_add(3), c, h, h, 0.1, 0.9);
        let rec = reconstruction_loss(&rgb, &rgb, &embed, LossMode::Full).unwrap();
        prop_assert!(rec.value.abs() < 1e-12);
    }

    #[test]
    fn fidelity_ignores_uniform_confidence_scaling(seed in 0u64..1000, scale in 0.2f64..2.0) {
        let x = tensor(seed, 3, 8, 8, 0.0, 1.0);
        let r = tensor(seed.wrapping_add(1), 3, 8, 8, 0.0, 1.0);
        // Keep the scaled confidences inside the [0, 1] clamp window.
        let conf = tensor(seed.wrapping_add(2), 1, 4, 4, 0.05, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let embed = ConvLayer::init(6, 3, 3, 1, &mut rng);
        let a = fidelity_loss(&x, &r, &conf, &embed).unwrap();
        let b = fidelity_loss(&x, &r, &conf.scale(scale), &embed).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn contextual_mean_ignores_spatial_order_of_the_target(seed in 0u64..1000, c in 2usize..5, h in 3usize..6) {
        let x = tensor(seed, c, h, h, -1.0, 1.0);
        let y = tensor(seed.wrapping_add(1), c, h, h, -1.0, 1.0);
        // Transpose the target spatially: a fixed permutation of positions.
        let yt = Tensor::from_fn(1, c, h, h, |_, ci, yy, xx| y.at(0, ci, xx, yy));
        let (a, _) = contextual_distance(&x, &y).unwrap();
        let (b, _) = contextual_distance(&x, &yt).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    // --- metrics ----------------------------------------------------------

    #[test]
    fn psnr_is_symmetric_and_capped(seed in 0u64..1000, h in 12usize..20) {
        let a = tensor(seed, 3, h, h, 0.0, 1.0);
        let b = tensor(seed.wrapping_add(1), 3, h, h, 0.0, 1.0);
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_self(seed in 0u64..1000, h in 11usize..18) {
        let a = tensor(seed, 3, h, h, 0.0, 1.0);
        let b = tensor(seed.wrapping_add(1), 3, h, h, 0.0, 1.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    // Checkpoint round trips run a full parameter init, so fewer cases.
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoint_round_trips_bytes_and_values(seed in 0u64..1000) {
        let config = ModelConfig::default();
        let params = init_params(&config, seed);
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.ckpt");
        let path_b = dir.path().join("b.ckpt");
        save_checkpoint(&path_a, &params, &config, seed).unwrap();
        let loaded = load_checkpoint(&path_a).unwrap();
        prop_assert_eq!(loaded.seed, seed);
        prop_assert_eq!(&loaded.config, &config);
        save_checkpoint(&path_b, &loaded.params, &loaded.config, loaded.seed).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        prop_assert_eq!(bytes_a, bytes_b);
    }
}
