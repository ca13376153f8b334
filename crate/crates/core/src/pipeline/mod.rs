//! End-to-end workflows: synthetic paired datasets, quality metrics, the
//! optimizer, and the training/adaptation/evaluation loops.

pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use metrics::{psnr, ssim, PSNR_CAP_DB};
pub use optim::{Adam, AdamConfig};
pub use synth::{
    extract_ref_crop, load_dataset, save_dataset, synth_dataset, synth_dataset_shifted, PairMeta,
    SynthPair,
};
pub use train::{
    adapt_sra, bicubic_baseline, evaluate, mean_gate_activation, train, AdaptOutcome, EvalSummary,
    TrainConfig, TrainLogRow, TrainOutcome,
};
