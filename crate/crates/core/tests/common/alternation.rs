//! Probes of the three-step alternation on the default synthetic benchmark.

use weedshift::adapt::{
    m3sda_step1, m3sda_step2, m3sda_step2_terms, m3sda_step3, m3sda_step3_terms,
    train_m3sda_beta_observed, AdaptationConfig, Monitor, Strategy,
};
use weedshift::data::{derived_rng, BatchStream, DomainBatch};
use weedshift::nn::{build_model, HeadLayout, ModelConfig, ParamGroup};
use weedshift::optim::{Optimizer, OptimizerKind};
use weedshift::synth::{default_benchmark, generate, split_validation};
use weedshift::Result;

/// Step-1 iterations run before a one-step probe, so the heads already fit
/// the sources (about four epochs of the default benchmark).
pub const WARM_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, Default)]
pub struct Monotonicity {
    pub runs: usize,
    pub step2_up: usize,
    pub step3_down: usize,
}

impl Monotonicity {
    pub fn step2_rate(&self) -> f64 {
        self.step2_up as f64 / self.runs as f64
    }

    pub fn step3_rate(&self) -> f64 {
        self.step3_down as f64 / self.runs as f64
    }
}

/// One step 2 and one step 3 per initialization, each on a fixed batch.
/// The discrepancy is the pair discrepancy the step itself optimizes,
/// read before and after the update with the same dropout masks.
pub fn one_step_monotonicity(
    seeds: std::ops::Range<u64>,
    kind: OptimizerKind,
    lr: f64,
    warm: usize,
) -> Result<Monotonicity> {
    let corpus = generate(&default_benchmark(), 0)?;
    let mut out = Monotonicity::default();
    for seed in seeds {
        let mut model = build_model(&ModelConfig {
            seed,
            heads: HeadLayout::Pairs(corpus.sources.len()),
            ..ModelConfig::default()
        })?;
        let cfg = AdaptationConfig {
            strategy: Strategy::M3sdaBeta,
            lr,
            optimizer: kind,
            seed,
            ..AdaptationConfig::default()
        };
        let mut streams = corpus
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| BatchStream::labelled(s, cfg.batch_size, derived_rng(seed, 50 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut target = BatchStream::unlabelled(&corpus.target, cfg.batch_size, derived_rng(seed, 60))?;
        let mut rng = derived_rng(seed, 61);

        let warm_cfg = AdaptationConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            ..cfg.clone()
        };
        let mut warm_opt = Optimizer::new(OptimizerKind::Adam);
        for _ in 0..warm {
            let b: Vec<DomainBatch> = streams.iter_mut().map(BatchStream::next_batch).collect();
            let t = target.next_batch();
            m3sda_step1(&mut model, &mut warm_opt, &b, &t, &warm_cfg, &mut rng)?;
        }

        let batches: Vec<DomainBatch> = streams.iter_mut().map(BatchStream::next_batch).collect();
        let tb = target.next_batch();

        let masks = rng.clone();
        let before = m3sda_step2_terms(&model, &batches, &tb, &cfg, &mut masks.clone())?["step2_disc"];
        m3sda_step2(&mut model, &mut Optimizer::new(kind), &batches, &tb, &cfg, &mut masks.clone())?;
        let after = m3sda_step2_terms(&model, &batches, &tb, &cfg, &mut masks.clone())?["step2_disc"];
        if after >= before {
            out.step2_up += 1;
        }

        let masks = derived_rng(seed, 62);
        let before = m3sda_step3_terms(&model, &tb, &mut masks.clone())?["step3_disc"];
        m3sda_step3(&mut model, &mut Optimizer::new(kind), &tb, &cfg, &mut masks.clone())?;
        let after = m3sda_step3_terms(&model, &tb, &mut masks.clone())?["step3_disc"];
        if after <= before {
            out.step3_down += 1;
        }
        out.runs += 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FreezeAudit {
    pub step2_updates: usize,
    /// Step-2 updates that changed any extractor parameter.
    pub step2_moved_extractor: usize,
    /// Step-2 updates that left every head untouched.
    pub step2_idle_heads: usize,
    pub step3_updates: usize,
    pub step3_moved_heads: usize,
    pub step3_idle_extractor: usize,
}

/// A full training run on the default benchmark with every step audited.
pub fn audit_freeze_contracts(seed: u64, epochs: usize, lr: f64) -> Result<FreezeAudit> {
    let corpus = generate(&default_benchmark(), seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in &corpus.sources {
        let (t, v) = split_validation(s, 0.2, seed)?;
        train.push(t);
        val.push(v);
    }
    let target = [corpus.target.clone()];
    let config = AdaptationConfig {
        strategy: Strategy::M3sdaBeta,
        epochs,
        warmup: 1,
        lr,
        seed,
        ..AdaptationConfig::default()
    };
    let mut model = build_model(&ModelConfig {
        input_dim: corpus.target.dim,
        heads: HeadLayout::Pairs(train.len()),
        seed,
        ..ModelConfig::default()
    })?;
    let monitor = Monitor {
        validation: &val,
        target: &target,
    };
    let mut audit = FreezeAudit::default();
    let mut hook = |step: u8, before: &weedshift::nn::ModelBundle, after: &weedshift::nn::ModelBundle| match step {
        2 => {
            audit.step2_updates += 1;
            if !after.group_bitwise_eq(before, ParamGroup::Extractor) {
                audit.step2_moved_extractor += 1;
            }
            if after.group_bitwise_eq(before, ParamGroup::Heads) {
                audit.step2_idle_heads += 1;
            }
        }
        3 => {
            audit.step3_updates += 1;
            if !after.group_bitwise_eq(before, ParamGroup::Heads) {
                audit.step3_moved_heads += 1;
            }
            if after.group_bitwise_eq(before, ParamGroup::Extractor) {
                audit.step3_idle_extractor += 1;
            }
        }
        _ => {}
    };
    train_m3sda_beta_observed(&mut model, &train, &target, &monitor, &config, 5, Some(&mut hook))?;
    Ok(audit)
}
