//! Miniature version of the controlled conditioning-strategy comparison:
//! train once with the pathology mask fixed as the condition and once with
//! random connected masks, then measure sample diversity on a held-out case.
//!
//! With enough iterations the fixed strategy memorizes the condition-to-image
//! mapping and its repeated samples collapse; random masks keep the mapping
//! ambiguous, so cosine drops and KL rises. This demo uses a shortened run,
//! so expect the direction, not the magnitudes.

use powdr::cli::run_strategy;
use powdr::config::FullConfig;
use powdr::phantom::{generate_all, PhantomSpec};
use powdr::trainer::ConditioningMode;

fn main() {
    let spec = PhantomSpec {
        dims: (16, 16, 16),
        n_cases: 6,
        lesion_volume_range: (10, 40),
        texture_amplitude: 0.1,
        seed: 11,
    };
    let dataset = generate_all(&spec).unwrap();
    let held_out = dataset.last().unwrap().clone();
    let train_set = &dataset[..dataset.len() - 1];
    let volumes: Vec<u64> = train_set
        .iter()
        .map(|ex| ex.pathology_mask.count_true() as u64)
        .collect();

    let mut cfg = FullConfig::desk_default();
    cfg.train.iterations = 600;
    cfg.t_max = 80;

    for mode in [ConditioningMode::FixedPathology, ConditioningMode::RandomConnected] {
        cfg.train.conditioning_mode = mode;
        let report = run_strategy(&cfg, train_set, &held_out, &volumes, 6, 0).unwrap();
        println!(
            "{:<16} cosine {:.5} +/- {:.5}   KL {:.5}",
            mode.as_str(),
            report.mean_pairwise_cosine,
            report.std_pairwise_cosine,
            report.mean_pairwise_kl
        );
    }
}
