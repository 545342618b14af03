//! Domain-adaptation toolkit for tile-based binary weed classification.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`tiling`]: bounding-box annotations to labelled tiles and leakage-safe splits,
//! - [`raster`], [`corpus`]: Netpbm images, manifests and feature tables,
//! - [`tape`], [`tensor`], [`optim`]: a small reverse-mode autodiff engine,
//! - [`nn`]: feature extractor, classifier head, freezing and LoRA,
//! - [`adapt`]: vanilla, single-source and multi-source moment-matching training,
//! - [`eval`]: per-subdomain F1, model selection and baselines,
//! - [`synth`], [`bench`]: covariate-shift benchmarks with a known labelling rule.

pub mod adapt;
pub mod bench;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
