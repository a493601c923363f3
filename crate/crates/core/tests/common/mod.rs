#![allow(dead_code)]

use eclf_core::heads::HeadsConfig;
use eclf_core::synthleaf::{generate_dataset, Dataset, DatasetSpec, Preset};
use eclf_core::vae::{Mode, TrainingConfig};

/// A small synthetic dataset for quick training runs.
pub fn tiny_data(preset: Preset, seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec {
        preset,
        train_per_class: 24,
        val_per_class: 8,
        test_per_class: 8,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

/// A short schedule that still passes through every training phase.
pub fn tiny_config(mode: Mode, seed: u64) -> (TrainingConfig, HeadsConfig) {
    let cfg = TrainingConfig {
        mode,
        iterations: 40,
        pretrain_iterations: Some(5),
        warmup_start: Some(10),
        warmup_end: Some(20),
        batch_size: 16,
        eval_interval: 10,
        checkpoint_interval: 20,
        log_interval: 5,
        seed,
        ..TrainingConfig::default()
    };
    (cfg, HeadsConfig::default())
}
