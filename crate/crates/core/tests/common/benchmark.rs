//! Seed sweeps over the synthetic benchmark.

use weedshift::adapt::Strategy;
use weedshift::bench::{run_benchmark, BenchmarkRun, BenchmarkSettings};
use weedshift::eval::median;
use weedshift::synth::{default_benchmark, BenchmarkSpec};
use weedshift::Result;

pub const SEEDS: std::ops::Range<u64> = 0..5;

pub struct Sweep {
    pub strategy: Strategy,
    pub runs: Vec<BenchmarkRun>,
}

impl Sweep {
    pub fn median_target_f1(&self) -> f64 {
        let f: Vec<f64> = self.runs.iter().map(|r| r.target_f1).collect();
        median(&f).expect("at least one seed")
    }

    /// Median over seeds of source-val F1 minus target F1.
    pub fn median_gap(&self) -> f64 {
        let g: Vec<f64> = self.runs.iter().map(|r| r.val_f1 - r.target_f1).collect();
        median(&g).expect("at least one seed")
    }

    /// Largest excess of a run's target F1 over the rule's target F1.
    pub fn worst_reference_excess(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.target_f1 - r.reference["target"])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn sweep(spec: &BenchmarkSpec, strategy: Strategy, seeds: std::ops::Range<u64>) -> Result<Sweep> {
    let settings = BenchmarkSettings::default();
    let runs = seeds
        .map(|seed| run_benchmark(spec, seed, strategy, &settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep { strategy, runs })
}

pub fn default_sweeps() -> Result<Vec<Sweep>> {
    let spec = default_benchmark();
    [Strategy::Vanilla, Strategy::M2s2da, Strategy::M3sdaBeta]
        .into_iter()
        .map(|s| sweep(&spec, s, SEEDS))
        .collect()
}

pub const SHIFT_LADDER: [f64; 3] = [0.0, 1.5, 3.0];

/// Median vanilla target F1 at each rung of the shift ladder.
pub fn vanilla_shift_ladder() -> Result<Vec<f64>> {
    SHIFT_LADDER
        .iter()
        .map(|&m| Ok(sweep(&default_benchmark().with_target_shift(m), Strategy::Vanilla, SEEDS)?.median_target_f1()))
        .collect()
}
