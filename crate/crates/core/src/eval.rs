//! Evaluation protocol: per-subdomain precision/recall/F1, aggregation
//! across target flights, epoch selection and the prior-guessing baseline.
//!
//! The positive class is label 1; tiles labelled 2 (unclear) are never
//! counted. Flights without a single positive tile are reported but left
//! out of the aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::ModelBundle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Tallies one prediction; ground-truth label 2 is skipped.
    pub fn record(&mut self, predicted: u8, truth: u8) {
        match (predicted == 1, truth) {
            (_, 2) => {}
            (true, 1) => self.tp += 1,
            (true, _) => self.fp += 1,
            (false, 1) => self.fn_ += 1,
            (false, _) => self.tn += 1,
        }
    }

    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Self {
        let mut c = Self::default();
        predicted
            .iter()
            .zip(truth)
            .for_each(|(&p, &t)| c.record(p, t));
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and `F1 = 2TP / (2TP + FP + FN)`; any zero
/// denominator yields 0.
pub fn f1_precision_recall(c: &ConfusionCounts) -> Scores {
    Scores {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdomainScore {
    pub counts: ConfusionCounts,
    pub scores: Scores,
    /// No positive ground truth, so excluded from the aggregates.
    pub excluded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_f1: f64,
    pub median_f1: f64,
    /// Population standard deviation of F1 over the included flights.
    pub std_f1: f64,
    pub flights: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_subdomain: BTreeMap<String, SubdomainScore>,
    pub aggregates: Option<Aggregates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_epochs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
}

impl MetricsReport {
    /// Builds the report from per-flight counts and computes aggregates.
    pub fn from_counts(counts: BTreeMap<String, ConfusionCounts>) -> Self {
        let per_subdomain: BTreeMap<String, SubdomainScore> = counts
            .into_iter()
            .map(|(id, c)| {
                let s = SubdomainScore {
                    counts: c,
                    scores: f1_precision_recall(&c),
                    excluded: c.positives() == 0,
                };
                (id, s)
            })
            .collect();
        let included: Vec<f64> = per_subdomain
            .values()
            .filter(|s| !s.excluded)
            .map(|s| s.scores.f1)
            .collect();
        let aggregates = (!included.is_empty()).then(|| Aggregates {
            mean_f1: mean(&included).expect("non-empty"),
            median_f1: median(&included).expect("non-empty"),
            std_f1: population_std(&included).expect("non-empty"),
            flights: included.len(),
        });
        Self {
            per_subdomain,
            aggregates,
            sigma_epochs: None,
            selected_epoch: None,
        }
    }

    pub fn median_f1(&self) -> Option<f64> {
        self.aggregates.map(|a| a.median_f1)
    }

    pub fn f1_by_subdomain(&self) -> BTreeMap<String, f64> {
        self.per_subdomain
            .iter()
            .map(|(k, v)| (k.clone(), v.scores.f1))
            .collect()
    }

    /// Plain-text table: one row per flight, then the aggregates.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}  note",
            "subdomain", "TP", "FP", "FN", "TN", "precision", "recall", "F1"
        );
        for (id, s) in &self.per_subdomain {
            let c = s.counts;
            let _ = writeln!(
                out,
                "{:<16} {:>7} {:>7} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}  {}",
                id,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                s.scores.precision,
                s.scores.recall,
                s.scores.f1,
                if s.excluded { "excluded: no positives" } else { "" }
            );
        }
        match self.aggregates {
            Some(a) => {
                let _ = writeln!(
                    out,
                    "mean F1 {:.4}  median F1 {:.4}  std F1 {:.4}  over {} subdomains",
                    a.mean_f1, a.median_f1, a.std_f1, a.flights
                );
            }
            None => {
                let _ = writeln!(out, "no subdomain with positive tiles; aggregates undefined");
            }
        }
        if let Some(s) = self.sigma_epochs {
            let _ = writeln!(out, "sigma_epochs {s:.4} (population std of the median)");
        }
        if let Some(e) = self.selected_epoch {
            let _ = writeln!(out, "selected epoch {e}");
        }
        out
    }
}

/// Accumulates per-domain confusion counts over a fixed set of domains.
#[derive(Clone, Debug)]
pub struct SubdomainTally {
    counts: BTreeMap<String, ConfusionCounts>,
}

impl SubdomainTally {
    pub fn new<I, S>(domains: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            counts: domains
                .into_iter()
                .map(|d| (d.into(), ConfusionCounts::default()))
                .collect(),
        }
    }

    pub fn record(&mut self, domain: &str, predicted: u8, truth: u8) -> Result<()> {
        self.counts
            .get_mut(domain)
            .ok_or_else(|| Error::Data(format!("unknown subdomain `{domain}`")))?
            .record(predicted, truth);
        Ok(())
    }

    pub fn finish(self) -> MetricsReport {
        MetricsReport::from_counts(self.counts)
    }
}

/// Scores `model` separately on each target subdomain.
pub fn evaluate_per_subdomain(model: &ModelBundle, target: &[DomainDataset]) -> Result<MetricsReport> {
    let mut tally = SubdomainTally::new(target.iter().map(|d| d.domain_id.clone()));
    for d in target {
        if d.dim != model.input_dim() {
            return Err(Error::Dimension {
                op: "evaluate",
                lhs: vec![d.dim],
                rhs: vec![model.input_dim()],
            });
        }
        if d.is_empty() {
            continue;
        }
        let predicted = model.predict(&d.features, d.len())?;
        for (&p, &t) in predicted.iter().zip(&d.labels) {
            tally.record(&d.domain_id, p, t)?;
        }
    }
    Ok(tally.finish())
}

/// F1 of `model` on the union of `sets`.
pub fn pooled_f1(model: &ModelBundle, sets: &[DomainDataset]) -> Result<f64> {
    let mut c = ConfusionCounts::default();
    for d in sets.iter().filter(|d| !d.is_empty()) {
        let predicted = model.predict(&d.features, d.len())?;
        c.merge(&ConfusionCounts::from_predictions(&predicted, &d.labels));
    }
    Ok(f1_precision_recall(&c).f1)
}

/// 1-based epoch maximizing validation F1 among epochs after `warmup`;
/// ties go to the earliest epoch.
pub fn select_model_epoch(val_f1: &[f64], warmup: usize) -> Result<usize> {
    if val_f1.len() <= warmup {
        return Err(Error::Config(format!(
            "{} epochs of history do not exceed the warm-up of {warmup}",
            val_f1.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &f) in val_f1.iter().enumerate().skip(warmup) {
        if f.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| f > b) {
            best = Some((i + 1, f));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Degenerate("no finite validation score after warm-up".into()))
}

/// Population standard deviation of the per-epoch median F1 over the last
/// `window` epochs (all epochs, with a warning, when fewer are available).
pub fn sigma_epochs(medians: &[f64], window: usize) -> Result<f64> {
    if medians.is_empty() || window == 0 {
        return Err(Error::Degenerate("sigma over an empty epoch window".into()));
    }
    let tail = if medians.len() < window {
        warn!(
            "history has {} epochs, fewer than the window of {window}; using all of them",
            medians.len()
        );
        medians
    } else {
        &medians[medians.len() - window..]
    };
    Ok(population_std(tail).expect("non-empty"))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Median; the average of the two middle values for even counts.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn population_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    // The rounded mean of identical values can differ from them by an ulp.
    if xs.iter().all(|&x| x == xs[0]) {
        return Some(0.0);
    }
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Large-sample F1 of a classifier that flags each tile positive with
/// probability `prior`, on data with the given class counts.
///
/// Precision tends to the positive fraction `q` and recall to `prior`, so
/// F1 → 2·prior·q / (prior + q); it equals `prior` when `q == prior`.
pub fn dummy_prior_expected_f1(prior: f64, positives: u64, negatives: u64) -> f64 {
    let total = positives + negatives;
    if total == 0 || positives == 0 || prior <= 0.0 {
        return 0.0;
    }
    let q = positives as f64 / total as f64;
    2.0 * prior * q / (prior + q)
}

/// Expected dummy-classifier F1 per flight.
pub fn dummy_prior_baseline(
    prior: f64,
    counts: &BTreeMap<String, ConfusionCounts>,
) -> BTreeMap<String, f64> {
    counts
        .iter()
        .map(|(id, c)| {
            let pos = c.positives();
            (id.clone(), dummy_prior_expected_f1(prior, pos, c.total() - pos))
        })
        .collect()
}

/// One Monte-Carlo draw of the dummy classifier on `truth`.
pub fn dummy_prior_simulate<R: Rng + ?Sized>(prior: f64, truth: &[u8], rng: &mut R) -> f64 {
    let mut c = ConfusionCounts::default();
    for &t in truth {
        let predicted = u8::from(rng.random::<f64>() < prior);
        c.record(predicted, t);
    }
    f1_precision_recall(&c).f1
}
