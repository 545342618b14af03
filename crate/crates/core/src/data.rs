//! Feature datasets tagged with a domain, and the minibatch streams the
//! trainers draw from.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Row-major `[len × dim]` feature matrix with binary labels, all from one
/// domain (a source subset or a target flight).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let domain_id = domain_id.into();
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "domain `{domain_id}`: {} feature values for {} labels of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Label(format!(
                "domain `{domain_id}` carries training label {bad}; only 0 and 1 are trainable"
            )));
        }
        Ok(Self {
            domain_id,
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Concatenates several datasets of equal width under one domain id.
    pub fn pooled(parts: &[DomainDataset], domain_id: impl Into<String>) -> Result<Self> {
        let dim = parts
            .first()
            .ok_or_else(|| Error::Data("nothing to pool".into()))?
            .dim;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(Error::Dimension {
                    op: "pool datasets",
                    lhs: vec![dim],
                    rhs: vec![p.dim],
                });
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        DomainDataset::new(domain_id, dim, features, labels)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> DomainDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        DomainDataset {
            domain_id: self.domain_id.clone(),
            dim: self.dim,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// A minibatch from one domain; target batches carry no labels.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain_id: String,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl DomainBatch {
    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| {
            Error::TrainingState(format!(
                "batch from `{}` has no labels",
                self.domain_id
            ))
        })
    }
}

/// Endless shuffled pass over a dataset: each exhaustion reshuffles and
/// starts over, so shorter domains cycle while longer ones are consumed.
#[derive(Debug)]
pub struct BatchStream<'a> {
    data: &'a DomainDataset,
    batch_size: usize,
    labelled: bool,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a DomainDataset, batch_size: usize, labelled: bool, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::Config(format!(
                "domain `{}` has no samples to stream",
                data.domain_id
            )));
        }
        let mut stream = Self {
            data,
            batch_size,
            labelled,
            order: (0..data.len()).collect(),
            cursor: 0,
            rng,
        };
        stream.order.shuffle(&mut stream.rng);
        Ok(stream)
    }

    pub fn labelled(data: &'a DomainDataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        Self::new(data, batch_size, true, rng)
    }

    /// A stream whose batches never expose labels.
    pub fn unlabelled(data: &'a DomainDataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        Self::new(data, batch_size, false, rng)
    }

    pub fn next_batch(&mut self) -> DomainBatch {
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            rows.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let dim = self.data.dim;
        let mut features = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            features.extend_from_slice(self.data.row(r));
        }
        DomainBatch {
            domain_id: self.data.domain_id.clone(),
            features: Tensor::new(vec![rows.len(), dim], features).expect("consistent batch shape"),
            labels: self
                .labelled
                .then(|| rows.iter().map(|&r| usize::from(self.data.labels[r])).collect()),
        }
    }
}

/// Independent generator for one purpose (`stream`) of a seeded run.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> DomainDataset {
        DomainDataset::new(
            "toy",
            2,
            (0..n * 2).map(|v| v as f64).collect(),
            (0..n).map(|i| (i % 2) as u8).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(DomainDataset::new("a", 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(matches!(
            DomainDataset::new("a", 1, vec![0.0; 2], vec![0, 2]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn stream_cycles_through_every_row() {
        let data = toy(5);
        let mut s = BatchStream::labelled(&data, 2, derived_rng(1, 0)).unwrap();
        let mut seen = vec![0; 5];
        for _ in 0..5 {
            let b = s.next_batch();
            assert_eq!(b.rows(), 2);
            for row in b.features.data().chunks(2) {
                seen[(row[0] / 2.0) as usize] += 1;
            }
        }
        assert_eq!(seen, vec![2; 5]);
    }

    #[test]
    fn unlabelled_stream_hides_labels() {
        let data = toy(4);
        let mut s = BatchStream::unlabelled(&data, 3, derived_rng(1, 0)).unwrap();
        let b = s.next_batch();
        assert!(b.labels.is_none());
        assert!(b.labels().is_err());
    }

    #[test]
    fn split_names_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test, Split::Unassigned] {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
    }
}
