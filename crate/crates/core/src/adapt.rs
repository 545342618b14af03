//! Training strategies: supervised (vanilla), single-source moment
//! matching (M²S²DA) and multi-source moment matching with classifier
//! discrepancy (M³SDA-β).
//!
//! Moment distances compare elementwise batch means of `z` and `z²`.
//! Discrepancy is the mean absolute difference of two heads' softmax
//! outputs over batch and classes.
//!
//! One M³SDA-β iteration runs three updates on the same batches:
//!
//! 1. `G` and all heads on `Σ_i CE_i + λ·MD²_multi`,
//! 2. heads only on `Σ_i CE_i − Σ_i disc_i(target)`,
//! 3. `G` only on `Σ_i disc_i(target)`,
//!
//! where `CE_i` sums the cross-entropy of both heads of pair `i` on source
//! domain `i`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derived_rng, BatchStream, DomainBatch, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::nn::{HeadLayout, ModelBundle, ParamGroup};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{Tape, Var};

fn check_features(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Dimension {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// Elementwise k-th power, averaged over the batch axis.
fn moment(tape: &mut Tape, z: Var, k: i32) -> Result<Var> {
    let p = tape.pow(z, k);
    tape.mean(p, Some(0))
}

fn moment_gap(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.l2_norm(d))
}

/// `Σ_{k=1,2} ‖E[z_s^k] − E[z_t^k]‖₂` over `[batch × d]` embeddings.
pub fn moment_distance_single(tape: &mut Tape, z_source: Var, z_target: Var) -> Result<Var> {
    check_features(tape, z_source, z_target, "moment distance")?;
    let mut terms = Vec::with_capacity(2);
    for k in 1..=2 {
        let ms = moment(tape, z_source, k)?;
        let mt = moment(tape, z_target, k)?;
        terms.push(moment_gap(tape, ms, mt)?);
    }
    tape.add(terms[0], terms[1])
}

/// Multi-source moment distance: for each order k ∈ {1, 2}, the mean
/// source-to-target gap plus the mean gap over all source pairs.
///
/// With a single source the pairwise term vanishes and the value equals
/// [`moment_distance_single`].
pub fn moment_distance_multi(tape: &mut Tape, z_sources: &[Var], z_target: Var) -> Result<Var> {
    let n = z_sources.len();
    if n == 0 {
        return Err(Error::Config("moment distance needs at least one source".into()));
    }
    for &z in z_sources {
        check_features(tape, z, z_target, "multi-source moment distance")?;
    }
    let mut total: Option<Var> = None;
    let mut accumulate = |tape: &mut Tape, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
        Ok(())
    };
    for k in 1..=2 {
        let mt = moment(tape, z_target, k)?;
        let ms: Vec<Var> = z_sources
            .iter()
            .map(|&z| moment(tape, z, k))
            .collect::<Result<_>>()?;

        let mut to_target = Vec::with_capacity(n);
        for &m in &ms {
            to_target.push(moment_gap(tape, m, mt)?);
        }
        let sum = sum_vars(tape, &to_target)?;
        let avg = tape.scale(sum, 1.0 / n as f64);
        accumulate(tape, avg)?;

        if n > 1 {
            let mut pairwise = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n - 1 {
                for j in i + 1..n {
                    pairwise.push(moment_gap(tape, ms[i], ms[j])?);
                }
            }
            let pairs = pairwise.len() as f64;
            let sum = sum_vars(tape, &pairwise)?;
            let avg = tape.scale(sum, 1.0 / pairs);
            accumulate(tape, avg)?;
        }
    }
    Ok(total.expect("two moment orders"))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::Degenerate("sum of no terms".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Mean absolute difference of two `[batch × classes]` probability tables.
pub fn classifier_discrepancy(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    if tape.shape(p1) != tape.shape(p2) {
        return Err(Error::Dimension {
            op: "classifier discrepancy",
            lhs: tape.shape(p1).to_vec(),
            rhs: tape.shape(p2).to_vec(),
        });
    }
    let d = tape.sub(p1, p2)?;
    let a = tape.abs(d);
    tape.mean(a, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    M2s2da,
    M3sdaBeta,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Vanilla => "vanilla",
            Strategy::M2s2da => "m2s2da",
            Strategy::M3sdaBeta => "m3sda_beta",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "m2s2da" => Ok(Strategy::M2s2da),
            "m3sda_beta" => Ok(Strategy::M3sdaBeta),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    /// Weight of the moment-distance term; unused by `vanilla`.
    pub lambda: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<[f64; 2]>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            lambda: 0.5,
            epochs: 30,
            warmup: 5,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            class_weights: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for moment terms".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.epochs <= self.warmup {
            return Err(Error::Config(format!(
                "epochs ({}) must exceed the warm-up ({})",
                self.epochs, self.warmup
            )));
        }
        Ok(())
    }

    fn weights(&self) -> Option<&[f64]> {
        self.class_weights.as_ref().map(|w| &w[..])
    }
}

/// Loss components of one optimizer iteration, keyed by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub losses: BTreeMap<String, f64>,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's iterations of each loss component.
    pub losses: BTreeMap<String, f64>,
    pub val_f1: f64,
    pub target_f1: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_median_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mean_f1: Option<f64>,
}

/// Held-out sets scored after every epoch. Target labels are read here and
/// nowhere else.
#[derive(Clone, Copy, Debug)]
pub struct Monitor<'a> {
    pub validation: &'a [DomainDataset],
    pub target: &'a [DomainDataset],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub selected_epoch: usize,
    /// Parameters as they were at the end of `selected_epoch`.
    pub selected: ModelBundle,
    /// Target report of the selected model, with `sigma_epochs` filled in.
    pub report: MetricsReport,
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

fn input(tape: &mut Tape, batch: &DomainBatch) -> Var {
    tape.leaf_with(&batch.features, false)
}

fn apply(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    tape: &mut Tape,
    vars: &crate::nn::BundleVars,
    loss: Var,
    group: ParamGroup,
    lr: f64,
) -> Result<()> {
    tape.backward(loss)?;
    model.zero_grad();
    model.collect_grads(tape, vars)?;
    opt.step(model.group_params_mut(group), lr)
}

/// One supervised update on a labelled batch.
pub fn vanilla_step(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    source: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::All);
    let x = input(&mut tape, source);
    let logits = model.forward(&mut tape, &vars, x, true, rng)?;
    let ce = tape.softmax_cross_entropy(logits, source.labels()?, config.weights())?;
    let value = tape.scalar(ce);
    apply(model, opt, &mut tape, &vars, ce, ParamGroup::All, config.lr)?;
    Ok([("ce".to_string(), value)].into())
}

/// One update on `CE(source) + λ·MD²(G(source), G(target))`.
pub fn m2s2da_step(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    source: &DomainBatch,
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::All);
    let xs = input(&mut tape, source);
    let logits = model.forward(&mut tape, &vars, xs, true, rng)?;
    let ce = tape.softmax_cross_entropy(logits, source.labels()?, config.weights())?;
    // The moment term only sees G, so its gradient never reaches the head.
    let zs = model.features(&mut tape, &vars, xs)?;
    let xt = input(&mut tape, target);
    let zt = model.features(&mut tape, &vars, xt)?;
    let md = moment_distance_single(&mut tape, zs, zt)?;
    let weighted = tape.scale(md, config.lambda);
    let loss = tape.add(ce, weighted)?;
    let values = [
        ("ce".to_string(), tape.scalar(ce)),
        ("md".to_string(), tape.scalar(md)),
        ("total".to_string(), tape.scalar(loss)),
    ]
    .into();
    apply(model, opt, &mut tape, &vars, loss, ParamGroup::All, config.lr)?;
    Ok(values)
}

fn pair_ce(
    model: &ModelBundle,
    tape: &mut Tape,
    vars: &crate::nn::BundleVars,
    sources: &[DomainBatch],
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Var>, Var)> {
    let heads = model.classifier.heads();
    let head_vars = vars.classifier.heads();
    let mut features = Vec::with_capacity(sources.len());
    let mut terms = Vec::with_capacity(2 * sources.len());
    for (i, batch) in sources.iter().enumerate() {
        let x = input(tape, batch);
        let z = model.features(tape, vars, x)?;
        features.push(z);
        for h in [2 * i, 2 * i + 1] {
            let logits = heads[h].forward(tape, &head_vars[h], z, true, rng)?;
            terms.push(tape.softmax_cross_entropy(logits, batch.labels()?, config.weights())?);
        }
    }
    Ok((features, sum_vars(tape, &terms)?))
}

fn pair_discrepancy(
    model: &ModelBundle,
    tape: &mut Tape,
    vars: &crate::nn::BundleVars,
    z_target: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let heads = model.classifier.heads();
    let head_vars = vars.classifier.heads();
    let mut terms = Vec::with_capacity(heads.len() / 2);
    for i in 0..heads.len() / 2 {
        let la = heads[2 * i].forward(tape, &head_vars[2 * i], z_target, true, rng)?;
        let lb = heads[2 * i + 1].forward(tape, &head_vars[2 * i + 1], z_target, true, rng)?;
        let pa = tape.softmax(la)?;
        let pb = tape.softmax(lb)?;
        terms.push(classifier_discrepancy(tape, pa, pb)?);
    }
    sum_vars(tape, &terms)
}

fn check_pairs(model: &ModelBundle, sources: &[DomainBatch]) -> Result<()> {
    if model.pair_count() != sources.len() {
        return Err(Error::Config(format!(
            "{} classifier pairs for {} source domains",
            model.pair_count(),
            sources.len()
        )));
    }
    Ok(())
}

/// Step 1: update `G` and every head on `Σ_i CE_i + λ·MD²_multi`.
pub fn m3sda_step1(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    sources: &[DomainBatch],
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    check_pairs(model, sources)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::All);
    let (zs, ce) = pair_ce(model, &mut tape, &vars, sources, config, rng)?;
    let xt = input(&mut tape, target);
    let zt = model.features(&mut tape, &vars, xt)?;
    let md = moment_distance_multi(&mut tape, &zs, zt)?;
    let weighted = tape.scale(md, config.lambda);
    let loss = tape.add(ce, weighted)?;
    let values = [
        ("step1_ce".to_string(), tape.scalar(ce)),
        ("step1_md".to_string(), tape.scalar(md)),
    ]
    .into();
    apply(model, opt, &mut tape, &vars, loss, ParamGroup::All, config.lr)?;
    Ok(values)
}

fn step2_loss(
    model: &ModelBundle,
    tape: &mut Tape,
    vars: &crate::nn::BundleVars,
    sources: &[DomainBatch],
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, BTreeMap<String, f64>)> {
    check_pairs(model, sources)?;
    let (_, ce) = pair_ce(model, tape, vars, sources, config, rng)?;
    let xt = input(tape, target);
    let zt = model.features(tape, vars, xt)?;
    let disc = pair_discrepancy(model, tape, vars, zt, rng)?;
    let loss = tape.sub(ce, disc)?;
    let values = [
        ("step2_ce".to_string(), tape.scalar(ce)),
        ("step2_disc".to_string(), tape.scalar(disc)),
    ]
    .into();
    Ok((loss, values))
}

fn step3_loss(
    model: &ModelBundle,
    tape: &mut Tape,
    vars: &crate::nn::BundleVars,
    target: &DomainBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, BTreeMap<String, f64>)> {
    if model.pair_count() == 0 {
        return Err(Error::Config("step 3 needs classifier pairs".into()));
    }
    let xt = input(tape, target);
    let zt = model.features(tape, vars, xt)?;
    let disc = pair_discrepancy(model, tape, vars, zt, rng)?;
    let values = [("step3_disc".to_string(), tape.scalar(disc))].into();
    Ok((disc, values))
}

/// Step 2: with `G` fixed, update the heads on `Σ_i CE_i − Σ_i disc_i`.
pub fn m3sda_step2(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    sources: &[DomainBatch],
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Heads);
    let (loss, values) = step2_loss(model, &mut tape, &vars, sources, target, config, rng)?;
    apply(model, opt, &mut tape, &vars, loss, ParamGroup::Heads, config.lr)?;
    Ok(values)
}

/// Step 3: with the heads fixed, update `G` on `Σ_i disc_i`.
pub fn m3sda_step3(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Extractor);
    let (loss, values) = step3_loss(model, &mut tape, &vars, target, rng)?;
    apply(model, opt, &mut tape, &vars, loss, ParamGroup::Extractor, config.lr)?;
    Ok(values)
}

/// The terms [`m3sda_step2`] would see, without updating anything. Given a
/// clone of the same `rng` it draws the same dropout masks.
pub fn m3sda_step2_terms(
    model: &ModelBundle,
    sources: &[DomainBatch],
    target: &DomainBatch,
    config: &AdaptationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Nothing);
    Ok(step2_loss(model, &mut tape, &vars, sources, target, config, rng)?.1)
}

/// The terms [`m3sda_step3`] would see, without updating anything.
pub fn m3sda_step3_terms(
    model: &ModelBundle,
    target: &DomainBatch,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Nothing);
    Ok(step3_loss(model, &mut tape, &vars, target, rng)?.1)
}

/// Summed pair discrepancy on a batch in inference mode (no dropout).
pub fn ensemble_discrepancy(model: &ModelBundle, target: &DomainBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, ParamGroup::Nothing);
    let xt = input(&mut tape, target);
    let zt = model.features(&mut tape, &vars, xt)?;
    let heads = model.classifier.heads();
    let head_vars = vars.classifier.heads();
    let mut rng = derived_rng(0, 0);
    let mut total = 0.0;
    for i in 0..heads.len() / 2 {
        let la = heads[2 * i].forward(&mut tape, &head_vars[2 * i], zt, false, &mut rng)?;
        let lb = heads[2 * i + 1].forward(&mut tape, &head_vars[2 * i + 1], zt, false, &mut rng)?;
        let pa = tape.softmax(la)?;
        let pb = tape.softmax(lb)?;
        let d = classifier_discrepancy(&mut tape, pa, pb)?;
        total += tape.scalar(d);
    }
    Ok(total)
}

/// Uniform average of the softmax outputs of all `2N` heads.
pub fn predict_ensemble(model: &ModelBundle, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    model.predict_proba(x, rows)
}

struct EpochLog {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl EpochLog {
    fn new() -> Self {
        Self {
            sums: BTreeMap::new(),
            count: 0,
        }
    }

    fn add(&mut self, values: &BTreeMap<String, f64>) {
        for (k, v) in values {
            *self.sums.entry(k.clone()).or_insert(0.0) += v;
        }
    }

    fn means(&self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}

struct Selection {
    best: Option<(usize, f64, ModelBundle, MetricsReport)>,
}

fn record_epoch(
    model: &ModelBundle,
    epoch: usize,
    log: &EpochLog,
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    history: &mut Vec<EpochRecord>,
    selection: &mut Selection,
) -> Result<()> {
    let val_f1 = eval::pooled_f1(model, monitor.validation)?;
    let report = eval::evaluate_per_subdomain(model, monitor.target)?;
    info!(
        "epoch {epoch}: val F1 {val_f1:.4}, target median F1 {:?}",
        report.median_f1()
    );
    history.push(EpochRecord {
        epoch,
        losses: log.means(),
        val_f1,
        target_f1: report.f1_by_subdomain(),
        target_median_f1: report.aggregates.map(|a| a.median_f1),
        target_mean_f1: report.aggregates.map(|a| a.mean_f1),
    });
    if epoch > config.warmup && selection.best.as_ref().is_none_or(|b| val_f1 > b.1) {
        selection.best = Some((epoch, val_f1, model.clone(), report));
    }
    Ok(())
}

fn finish(
    history: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    selection: Selection,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    let val: Vec<f64> = history.iter().map(|h| h.val_f1).collect();
    let selected_epoch = eval::select_model_epoch(&val, config.warmup)?;
    let (epoch, _, selected, mut report) = selection
        .best
        .ok_or_else(|| Error::Degenerate("no epoch selected".into()))?;
    debug_assert_eq!(epoch, selected_epoch);
    let medians: Vec<f64> = history.iter().filter_map(|h| h.target_median_f1).collect();
    if !medians.is_empty() {
        report.sigma_epochs = Some(eval::sigma_epochs(&medians, window)?);
    }
    report.selected_epoch = Some(selected_epoch);
    Ok(TrainOutcome {
        history,
        steps,
        selected_epoch,
        selected,
        report,
    })
}

fn check_training_inputs(
    model: &ModelBundle,
    sources: &[DomainDataset],
    monitor: &Monitor<'_>,
) -> Result<()> {
    if sources.is_empty() || sources.iter().all(DomainDataset::is_empty) {
        return Err(Error::Config("no labelled source samples".into()));
    }
    for d in sources.iter().chain(monitor.validation).chain(monitor.target) {
        if d.dim != model.input_dim() {
            return Err(Error::Dimension {
                op: "training data",
                lhs: vec![d.dim],
                rhs: vec![model.input_dim()],
            });
        }
    }
    if monitor.validation.iter().all(DomainDataset::is_empty) {
        return Err(Error::Config(
            "model selection needs a non-empty source validation set".into(),
        ));
    }
    let positives: usize = sources.iter().map(DomainDataset::positives).sum();
    let total: usize = sources.iter().map(DomainDataset::len).sum();
    if positives == 0 || positives == total {
        warn!("source training data contains a single class ({positives} of {total} positive)");
    }
    Ok(())
}

/// Supervised training on the pooled sources.
pub fn train_vanilla(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    train_single_head(model, sources, None, monitor, config, window)
}

/// Single-source moment matching against the pooled unlabelled target.
pub fn train_m2s2da(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    target: &[DomainDataset],
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    if target.iter().all(DomainDataset::is_empty) {
        return Err(Error::Config("m2s2da needs unlabelled target samples".into()));
    }
    train_single_head(model, sources, Some(target), monitor, config, window)
}

fn pooled_target(target: &[DomainDataset]) -> Result<DomainDataset> {
    let parts: Vec<DomainDataset> = target.iter().filter(|d| !d.is_empty()).cloned().collect();
    DomainDataset::pooled(&parts, "target")
}

fn train_single_head(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    target: Option<&[DomainDataset]>,
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_training_inputs(model, sources, monitor)?;
    if model.pair_count() != 0 {
        return Err(Error::Config("single-head strategies need a single classifier".into()));
    }
    let pooled = DomainDataset::pooled(sources, "source")?;
    let target_pool = target.map(pooled_target).transpose()?;
    let mut source_stream =
        BatchStream::labelled(&pooled, config.batch_size, derived_rng(config.seed, SOURCE_STREAM))?;
    let mut target_stream = target_pool
        .as_ref()
        .map(|t| BatchStream::unlabelled(t, config.batch_size, derived_rng(config.seed, TARGET_STREAM)))
        .transpose()?;
    let mut dropout_rng = derived_rng(config.seed, DROPOUT_STREAM);
    let mut opt = Optimizer::new(config.optimizer);
    let iterations = pooled.len().div_ceil(config.batch_size);

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.epochs * iterations);
    let mut selection = Selection { best: None };
    for epoch in 1..=config.epochs {
        let mut log = EpochLog::new();
        for iteration in 0..iterations {
            let batch = source_stream.next_batch();
            let losses = match &mut target_stream {
                None => vanilla_step(model, &mut opt, &batch, config, &mut dropout_rng)?,
                Some(ts) => {
                    let tb = ts.next_batch();
                    m2s2da_step(model, &mut opt, &batch, &tb, config, &mut dropout_rng)?
                }
            };
            log.add(&losses);
            log.count += 1;
            steps.push(StepRecord {
                epoch,
                iteration,
                losses,
            });
        }
        record_epoch(model, epoch, &log, monitor, config, &mut history, &mut selection)?;
    }
    finish(history, steps, selection, config, window)
}

/// Multi-source moment matching with classifier-pair discrepancy.
///
/// `model` must carry one classifier pair per entry of `sources`.
pub fn train_m3sda_beta(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    target: &[DomainDataset],
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    train_m3sda_beta_observed(model, sources, target, monitor, config, window, None)
}

/// Called after every alternation step with the step number (1, 2 or 3)
/// and the model before and after it.
pub type StepHook<'a> = &'a mut dyn FnMut(u8, &ModelBundle, &ModelBundle);

/// [`train_m3sda_beta`] with an optional hook that sees every step.
pub fn train_m3sda_beta_observed(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    target: &[DomainDataset],
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_training_inputs(model, sources, monitor)?;
    if model.pair_count() != sources.len() {
        return Err(Error::Config(format!(
            "{} classifier pairs for {} source domains",
            model.pair_count(),
            sources.len()
        )));
    }
    if target.iter().all(DomainDataset::is_empty) {
        return Err(Error::Config("m3sda_beta needs unlabelled target samples".into()));
    }
    let target_pool = pooled_target(target)?;
    let mut streams = sources
        .iter()
        .enumerate()
        .map(|(i, d)| {
            BatchStream::labelled(
                d,
                config.batch_size,
                derived_rng(config.seed, SOURCE_STREAM + 16 * (i as u64 + 1)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut target_stream = BatchStream::unlabelled(
        &target_pool,
        config.batch_size,
        derived_rng(config.seed, TARGET_STREAM),
    )?;
    let mut dropout_rng = derived_rng(config.seed, DROPOUT_STREAM);
    let mut opt = Optimizer::new(config.optimizer);
    let iterations = sources
        .iter()
        .map(DomainDataset::len)
        .max()
        .unwrap_or(0)
        .div_ceil(config.batch_size);

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.epochs * iterations);
    let mut selection = Selection { best: None };
    for epoch in 1..=config.epochs {
        let mut log = EpochLog::new();
        for iteration in 0..iterations {
            let batches: Vec<DomainBatch> = streams.iter_mut().map(BatchStream::next_batch).collect();
            let tb = target_stream.next_batch();
            let mut losses = BTreeMap::new();
            for step in 1..=3u8 {
                let before = hook.is_some().then(|| model.clone());
                losses.extend(match step {
                    1 => m3sda_step1(model, &mut opt, &batches, &tb, config, &mut dropout_rng)?,
                    2 => m3sda_step2(model, &mut opt, &batches, &tb, config, &mut dropout_rng)?,
                    _ => m3sda_step3(model, &mut opt, &tb, config, &mut dropout_rng)?,
                });
                if let (Some(h), Some(before)) = (hook.as_mut(), before) {
                    h(step, &before, model);
                }
            }
            log.add(&losses);
            log.count += 1;
            steps.push(StepRecord {
                epoch,
                iteration,
                losses,
            });
        }
        record_epoch(model, epoch, &log, monitor, config, &mut history, &mut selection)?;
    }
    finish(history, steps, selection, config, window)
}

/// Head layout a strategy needs for `n_sources` source domains.
pub fn head_layout(strategy: Strategy, n_sources: usize) -> HeadLayout {
    match strategy {
        Strategy::M3sdaBeta => HeadLayout::Pairs(n_sources),
        _ => HeadLayout::Single,
    }
}

/// Dispatches on `config.strategy`. `sources` holds one labelled training
/// set per source domain; single-head strategies pool them.
pub fn train(
    model: &mut ModelBundle,
    sources: &[DomainDataset],
    target: &[DomainDataset],
    monitor: &Monitor<'_>,
    config: &AdaptationConfig,
    window: usize,
) -> Result<TrainOutcome> {
    match config.strategy {
        Strategy::Vanilla => train_vanilla(model, sources, monitor, config, window),
        Strategy::M2s2da => train_m2s2da(model, sources, target, monitor, config, window),
        Strategy::M3sdaBeta => {
            if sources.len() < 2 {
                return Err(Error::Config(format!(
                    "m3sda_beta needs at least 2 source domains, got {}",
                    sources.len()
                )));
            }
            train_m3sda_beta(model, sources, target, monitor, config, window)
        }
    }
}
