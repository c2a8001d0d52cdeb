//! Warm-up on the default corpus.

use dg_core::data::{generate_corpus, GeneratorConfig};
use dg_core::featurizers::ModelParams;
use dg_core::training::{train_warmup, TrainConfig};

#[test]
fn warmup_lowers_the_loss_at_the_median_over_five_seeds() {
    let corpus = generate_corpus(&GeneratorConfig::default(), 0, 1).unwrap();
    let mut drops: Vec<f64> = (0..5u64)
        .map(|seed| {
            let cfg = TrainConfig { seed, ..Default::default() };
            let init = ModelParams::init(&cfg.model, seed).unwrap();
            let (_, log) = train_warmup(init, &corpus.train, &cfg).unwrap();
            assert_eq!(log.len() as u64, cfg.warmup_steps);
            log[0].total - log[log.len() - 1].total
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] >= 0.0, "loss drops over warm-up: {drops:?}");
}
