//! LoRA contract probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weedshift::adapt::{train, AdaptationConfig, Monitor, Strategy};
use weedshift::nn::{build_model, Adaptation, Block, ModelBundle, ModelConfig, ParamGroup};
use weedshift::synth::{default_benchmark, generate, split_validation};
use weedshift::tape::Tape;
use weedshift::Result;

pub const RANKS: [usize; 3] = [8, 16, 32];

pub fn lora_config(rank: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden: vec![48],
        feature_dim: 40,
        unfreeze: 0,
        adaptation: Adaptation::Lora { rank, alpha: None },
        seed,
        ..ModelConfig::default()
    }
}

/// The same model with every adapter replaced by its frozen base layer.
pub fn strip_adapters(model: &ModelBundle) -> ModelBundle {
    let mut base = model.clone();
    for b in &mut base.extractor.blocks {
        if let Block::Lora(a) = b {
            *b = Block::Dense(a.base.clone());
        }
    }
    base
}

pub fn logits(model: &ModelBundle, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Nothing);
    let input = tape.input(vec![rows, model.input_dim()], x.to_vec())?;
    let out = model.forward(&mut tape, &vars, input, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(tape.value(out).to_vec())
}

/// Largest |logit_lora − logit_base| over random batches, at init.
pub fn identity_deviation(rank: usize, seeds: std::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let model = build_model(&lora_config(rank, seed))?;
        let base = strip_adapters(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let rows = 32;
        let x: Vec<f64> = (0..rows * model.input_dim()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = logits(&model, &x, rows)?;
        let b = logits(&base, &x, rows)?;
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// Per adapted layer: (trainable parameters, R·(d_in + d_out), base trainable?).
pub fn layer_counts(model: &ModelBundle) -> Vec<(usize, usize, bool)> {
    model
        .extractor
        .blocks
        .iter()
        .filter_map(|b| match b {
            Block::Lora(a) => {
                let trainable = [&a.down, &a.up, &a.base.weight, &a.base.bias]
                    .iter()
                    .filter(|t| t.requires_grad())
                    .map(|t| t.numel())
                    .sum();
                let r = a.rank();
                Some((trainable, r * (a.base.d_in() + a.base.d_out()), a.base.trainable()))
            }
            Block::Dense(_) => None,
        })
        .collect()
}

pub struct FrozenRun {
    pub base_unchanged: bool,
    pub adapters_moved: bool,
}

/// Trains a LoRA model for a few epochs and compares the base layers with
/// their initial values.
pub fn frozen_base_run(rank: usize, seed: u64) -> Result<FrozenRun> {
    let mut spec = default_benchmark();
    for s in spec.sources.iter_mut().chain(std::iter::once(&mut spec.target)) {
        s.n_samples = 400;
    }
    let corpus = generate(&spec, seed)?;
    let (mut train_sets, mut val) = (Vec::new(), Vec::new());
    for s in &corpus.sources {
        let (t, v) = split_validation(s, 0.2, seed)?;
        train_sets.push(t);
        val.push(v);
    }
    let target = vec![corpus.target];
    let mut model = build_model(&ModelConfig {
        input_dim: target[0].dim,
        ..lora_config(rank, seed)
    })?;
    let initial = model.clone();
    let config = AdaptationConfig {
        strategy: Strategy::Vanilla,
        epochs: 4,
        warmup: 1,
        seed,
        ..AdaptationConfig::default()
    };
    let monitor = Monitor {
        validation: &val,
        target: &target,
    };
    train(&mut model, &train_sets, &target, &monitor, &config, 3)?;
    let base_unchanged = strip_adapters(&model).group_bitwise_eq(&strip_adapters(&initial), ParamGroup::Extractor)
        && model
            .extractor
            .blocks
            .iter()
            .zip(&initial.extractor.blocks)
            .all(|(a, b)| match (a, b) {
                (Block::Lora(a), Block::Lora(b)) => {
                    a.base.weight.bitwise_eq(&b.base.weight) && a.base.bias.bitwise_eq(&b.base.bias)
                }
                _ => false,
            });
    let adapters_moved = !model.group_bitwise_eq(&initial, ParamGroup::Extractor);
    Ok(FrozenRun {
        base_unchanged,
        adapters_moved,
    })
}
