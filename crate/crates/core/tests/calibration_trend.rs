mod common;

use maskprop::calibration::{derive_kpa, learn_likelihoods, pooled_high_below, DEFAULT_BINS};
use maskprop::hac::{cluster_dataset, DEFAULT_MASK_CAP};
use maskprop::synth::{generate, Scenario};

#[test]
fn high_quality_becomes_likelier_with_score() {
    let scenario = Scenario { classes: 3, ..Scenario::default() };
    let masks = generate(&scenario, 1500, 21).unwrap();
    let trees = cluster_dataset(&masks, 1.0, DEFAULT_MASK_CAP).unwrap();
    let table = learn_likelihoods(&trees.trees, &masks, 0.75, 0.85, DEFAULT_BINS).unwrap();
    let (mid, p): (Vec<f64>, Vec<f64>) = table
        .bins
        .iter()
        .filter(|b| b.support >= 10)
        .map(|b| ((b.lower + b.upper) / 2.0, b.p_high.unwrap()))
        .unzip();
    assert!(mid.len() >= 5);
    let rho = common::spearman(&mid, &p);
    assert!(rho > 0.5, "spearman {rho}");

    let k_pa = derive_kpa(&table, 0.01);
    assert!(k_pa > 0.0);
    assert!(pooled_high_below(&table, k_pa).unwrap_or(0.0) <= 0.01);
}
