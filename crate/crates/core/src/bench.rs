//! One training run on a synthetic benchmark, scored on its target.

use std::collections::BTreeMap;

use crate::adapt::{head_layout, train, AdaptationConfig, Monitor, Strategy};
use crate::error::Result;
use crate::nn::{build_model, ModelConfig};
use crate::synth::{bayes_reference, generate, split_validation, BenchmarkSpec};

#[derive(Clone, Debug)]
pub struct BenchmarkSettings {
    pub epochs: usize,
    pub warmup: usize,
    pub lambda: f64,
    pub val_fraction: f64,
    pub window: usize,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup: 5,
            lambda: 0.5,
            val_fraction: 0.2,
            window: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub selected_epoch: usize,
    /// Pooled source-validation F1 at the selected epoch.
    pub val_f1: f64,
    /// Median target F1 at the selected epoch.
    pub target_f1: f64,
    /// Ground-truth rule F1 per domain of the same corpus.
    pub reference: BTreeMap<String, f64>,
}

/// Generates the corpus for `seed`, splits each source into train and val,
/// and trains `strategy` with the model and data both seeded by `seed`.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    seed: u64,
    strategy: Strategy,
    settings: &BenchmarkSettings,
) -> Result<BenchmarkRun> {
    let corpus = generate(spec, seed)?;
    let mut train_sets = Vec::with_capacity(corpus.sources.len());
    let mut val_sets = Vec::with_capacity(corpus.sources.len());
    for s in &corpus.sources {
        let (t, v) = split_validation(s, settings.val_fraction, seed)?;
        train_sets.push(t);
        val_sets.push(v);
    }
    let mut model = build_model(&ModelConfig {
        input_dim: corpus.target.dim,
        heads: head_layout(strategy, train_sets.len()),
        seed,
        ..ModelConfig::default()
    })?;
    let config = AdaptationConfig {
        strategy,
        lambda: settings.lambda,
        epochs: settings.epochs,
        warmup: settings.warmup,
        seed,
        ..AdaptationConfig::default()
    };
    let target = [corpus.target.clone()];
    let monitor = Monitor {
        validation: &val_sets,
        target: &target,
    };
    let outcome = train(&mut model, &train_sets, &target, &monitor, &config, settings.window)?;
    let selected = &outcome.history[outcome.selected_epoch - 1];
    Ok(BenchmarkRun {
        strategy,
        seed,
        selected_epoch: outcome.selected_epoch,
        val_f1: selected.val_f1,
        target_f1: outcome.report.median_f1().unwrap_or(0.0),
        reference: bayes_reference(spec, &corpus)?,
    })
}
