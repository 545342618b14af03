//! Independent oracles for the evaluation protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weedshift::data::DomainDataset;
use weedshift::eval::{
    dummy_prior_simulate, evaluate_per_subdomain, f1_precision_recall, select_model_epoch, sigma_epochs,
    ConfusionCounts,
};
use weedshift::nn::{build_model, ModelConfig};
use weedshift::Result;

/// Counts by filtering the tile list once per cell; label-2 tiles ignored.
pub fn brute_force(predicted: &[u8], truth: &[u8]) -> [u64; 4] {
    let pairs: Vec<(u8, u8)> = predicted.iter().copied().zip(truth.iter().copied()).collect();
    let count = |p: u8, t: u8| pairs.iter().filter(|&&(a, b)| a == p && b == t).count() as u64;
    [count(1, 1), count(1, 0), count(0, 1), count(0, 0)]
}

fn scores_match(c: &ConfusionCounts, [tp, fp, fn_, _]: [u64; 4]) -> bool {
    let s = f1_precision_recall(c);
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (s.precision - p).abs() <= 1e-12 && (s.recall - r).abs() <= 1e-12 && (s.f1 - f1).abs() <= 1e-12
}

/// Randomized fixtures scored through `evaluate_per_subdomain` with a real
/// model and through a per-tile loop over single-row predictions. Returns
/// the number of flights whose counts or scores disagree.
pub fn evaluation_mismatches(fixtures: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for f in 0..fixtures {
        let dim = rng.random_range(2..6);
        let model = build_model(&ModelConfig {
            input_dim: dim,
            hidden: vec![8],
            feature_dim: 4,
            seed: seed + f as u64,
            ..ModelConfig::default()
        })?;
        let flights = rng.random_range(1..5);
        let mut sets = Vec::new();
        for k in 0..flights {
            let n = rng.random_range(0..60);
            let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
            sets.push(DomainDataset::new(format!("flight{k}"), dim, features, labels)?);
        }
        let report = evaluate_per_subdomain(&model, &sets)?;
        for d in &sets {
            let predicted: Vec<u8> = (0..d.len())
                .map(|i| {
                    let p = model.predict_proba(d.row(i), 1).unwrap();
                    u8::from(p[1] > p[0])
                })
                .collect();
            let oracle = brute_force(&predicted, &d.labels);
            let got = &report.per_subdomain[&d.domain_id];
            let c = got.counts;
            if [c.tp, c.fp, c.fn_, c.tn] != oracle || !scores_match(&c, oracle) || got.excluded != (oracle[0] + oracle[2] == 0) {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Random prediction and label vectors (labels 0, 1 or 2) through
/// `ConfusionCounts`; returns the number of disagreeing fixtures.
pub fn count_mismatches(fixtures: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..fixtures)
        .filter(|_| {
            let n = rng.random_range(0..300);
            let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let predicted: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let c = ConfusionCounts::from_predictions(&predicted, &truth);
            let oracle = brute_force(&predicted, &truth);
            [c.tp, c.fp, c.fn_, c.tn] != oracle || !scores_match(&c, oracle)
        })
        .count()
}

/// Histories whose selected epoch is inside the warm-up or is not the
/// earliest post-warm-up maximum.
pub fn selection_violations(trials: usize, warmup: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let len = rng.random_range(warmup + 1..warmup + 40);
            // Coarse values so that ties happen.
            let h: Vec<f64> = (0..len).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
            let chosen = select_model_epoch(&h, warmup).unwrap();
            let best = h[warmup..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let earliest = (warmup..len).find(|&i| h[i] == best).unwrap() + 1;
            chosen <= warmup || chosen != earliest
        })
        .count()
}

/// Largest deviation of `sigma_epochs` from a one-pass E[x²] − E[x]²
/// computation over the trailing window.
pub fn sigma_worst_error(trials: usize, window: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let len = rng.random_range(window..window + 30);
            let h: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            let tail = &h[len - window..];
            let n = tail.len() as f64;
            let (s, s2) = tail.iter().fold((0.0, 0.0), |(a, b), x| (a + x, b + x * x));
            let direct = (s2 / n - (s / n) * (s / n)).max(0.0).sqrt();
            (sigma_epochs(&h, window).unwrap() - direct).abs()
        })
        .fold(0.0, f64::max)
}

/// Empirical F1 of the prior-π dummy classifier on `tiles` tiles of which
/// a fraction π is positive.
pub fn dummy_prior_empirical(prior: f64, tiles: usize, seed: u64) -> f64 {
    let positives = (prior * tiles as f64).round() as usize;
    let truth: Vec<u8> = (0..tiles).map(|i| u8::from(i < positives)).collect();
    dummy_prior_simulate(prior, &truth, &mut ChaCha8Rng::seed_from_u64(seed))
}
