//! Feature extractor `G`, classifier head `C`, LoRA adapters and the
//! freeze policy that decides which tensors an optimizer may touch.
//!
//! The extractor is a stack of `linear → ReLU` blocks standing in for a
//! pretrained backbone; `unfreeze` counts trainable blocks from the end.
//! With LoRA enabled every extractor layer is wrapped in an adapter whose
//! base weights stay frozen. LoRA targeting all extractor layers is a
//! stand-in: real vision transformers leave the choice of target layers
//! open.
//!
//! A model is bound onto a [`Tape`] once per step with a [`ParamGroup`]
//! mask; frozen tensors enter the tape as constants.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HEAD_DROPOUT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adaptation {
    None,
    Lora {
        rank: usize,
        /// Scale numerator; the adapter output is multiplied by `alpha / rank`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "count", rename_all = "snake_case")]
pub enum HeadLayout {
    Single,
    /// One `(C_i, C'_i)` pair per source domain.
    Pairs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the extractor blocks before the final feature block.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub unfreeze: usize,
    pub adaptation: Adaptation,
    pub dropout: f64,
    pub heads: HeadLayout,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![32],
            feature_dim: 32,
            unfreeze: 2,
            adaptation: Adaptation::None,
            dropout: HEAD_DROPOUT,
            heads: HeadLayout::Single,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn block_count(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.unfreeze > self.block_count() {
            return Err(Error::Config(format!(
                "unfreeze = {} exceeds the {} extractor blocks",
                self.unfreeze,
                self.block_count()
            )));
        }
        if let Adaptation::Lora { rank, alpha } = self.adaptation {
            if rank == 0 {
                return Err(Error::Config("LoRA rank must be positive".into()));
            }
            if self.unfreeze != 0 {
                return Err(Error::Config(
                    "LoRA keeps the extractor base frozen; set unfreeze = 0".into(),
                ));
            }
            if alpha.is_some_and(|a| !a.is_finite()) {
                return Err(Error::Config("LoRA alpha must be finite".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.heads == HeadLayout::Pairs(0) {
            return Err(Error::Config("classifier pair count must be positive".into()));
        }
        Ok(())
    }

    /// Fills in defaults that depend on other fields (LoRA alpha = rank).
    pub fn resolved(mut self) -> Self {
        if let Adaptation::Lora { rank, alpha: None } = self.adaptation {
            self.adaptation = Adaptation::Lora {
                rank,
                alpha: Some(rank as f64),
            };
        }
        self
    }
}

/// Which parameter groups receive gradients in a given step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    Extractor,
    Heads,
    Nothing,
}

impl ParamGroup {
    fn extractor(self) -> bool {
        matches!(self, ParamGroup::All | ParamGroup::Extractor)
    }

    fn heads(self) -> bool {
        matches!(self, ParamGroup::All | ParamGroup::Heads)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> Tensor {
    let bound = (6.0 / d_in as f64).sqrt();
    let data = (0..d_out * d_in)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![d_out, d_in], data).expect("consistent init shape")
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    weight: Var,
    bias: Var,
}

impl LinearLayer {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, trainable: bool) -> Self {
        Self {
            weight: he_uniform(rng, d_out, d_in).with_requires_grad(trainable),
            bias: Tensor::zeros(vec![d_out]).with_requires_grad(trainable),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn trainable(&self) -> bool {
        self.weight.requires_grad()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_requires_grad(trainable);
        self.bias.set_requires_grad(trainable);
    }

    fn bind(&self, tape: &mut Tape, enabled: bool) -> LinearVars {
        LinearVars {
            weight: tape.leaf_with(&self.weight, enabled && self.weight.requires_grad()),
            bias: tape.leaf_with(&self.bias, enabled && self.bias.requires_grad()),
        }
    }

    /// `x · Wᵀ + b` for a `[batch × d_in]` input.
    pub fn forward(&self, tape: &mut Tape, vars: &LinearVars, x: Var) -> Result<Var> {
        let wt = tape.transpose(vars.weight)?;
        let xw = tape.matmul(x, wt)?;
        tape.add_bias(xw, vars.bias)
    }

    fn collect(&mut self, tape: &Tape, vars: &LinearVars) -> Result<()> {
        collect_one(&mut self.weight, tape, vars.weight)?;
        collect_one(&mut self.bias, tape, vars.bias)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

fn collect_one(t: &mut Tensor, tape: &Tape, v: Var) -> Result<()> {
    if let Some(g) = tape.grad(v) {
        t.accumulate_grad(g)?;
    }
    Ok(())
}

/// Frozen base layer plus a trainable rank-`R` update `(α/R)·up·down`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub base: LinearLayer,
    /// `[R × d_in]`
    pub down: Tensor,
    /// `[d_out × R]`, zero at initialization.
    pub up: Tensor,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    base: LinearVars,
    down: Var,
    up: Var,
}

impl LoraAdapter {
    fn init(rng: &mut ChaCha8Rng, base: LinearLayer, rank: usize, alpha: f64) -> Self {
        let (d_in, d_out) = (base.d_in(), base.d_out());
        let mut base = base;
        base.set_trainable(false);
        Self {
            base,
            down: he_uniform(rng, rank, d_in).with_requires_grad(true),
            up: Tensor::zeros(vec![d_out, rank]).with_requires_grad(true),
            scale: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    fn bind(&self, tape: &mut Tape, enabled: bool) -> LoraVars {
        LoraVars {
            base: self.base.bind(tape, enabled),
            down: tape.leaf_with(&self.down, enabled && self.down.requires_grad()),
            up: tape.leaf_with(&self.up, enabled && self.up.requires_grad()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &LoraVars, x: Var) -> Result<Var> {
        let base = self.base.forward(tape, &vars.base, x)?;
        let down_t = tape.transpose(vars.down)?;
        let low = tape.matmul(x, down_t)?;
        let up_t = tape.transpose(vars.up)?;
        let delta = tape.matmul(low, up_t)?;
        let delta = tape.scale(delta, self.scale);
        tape.add(base, delta)
    }

    /// Folds the adapter into a single dense layer.
    pub fn merged(&self) -> LinearLayer {
        let (d_out, d_in, r) = (self.base.d_out(), self.base.d_in(), self.rank());
        let mut w = self.base.weight.data().to_vec();
        let (up, down) = (self.up.data(), self.down.data());
        for o in 0..d_out {
            for i in 0..d_in {
                let delta: f64 = (0..r).map(|k| up[o * r + k] * down[k * d_in + i]).sum();
                w[o * d_in + i] += self.scale * delta;
            }
        }
        LinearLayer {
            weight: Tensor::new(vec![d_out, d_in], w).expect("same shape as base"),
            bias: self.base.bias.clone(),
        }
    }

    fn collect(&mut self, tape: &Tape, vars: &LoraVars) -> Result<()> {
        self.base.collect(tape, &vars.base)?;
        collect_one(&mut self.down, tape, vars.down)?;
        collect_one(&mut self.up, tape, vars.up)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Dense(LinearLayer),
    Lora(LoraAdapter),
}

#[derive(Clone, Copy, Debug)]
enum BlockVars {
    Dense(LinearVars),
    Lora(LoraVars),
}

impl Block {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Block::Dense(l) => l.visit(prefix, out),
            Block::Lora(a) => {
                a.base.visit(prefix, out);
                out.push((format!("{prefix}.lora_down"), &a.down));
                out.push((format!("{prefix}.lora_up"), &a.up));
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Block::Dense(l) => l.visit_mut(prefix, out),
            Block::Lora(a) => {
                a.base.visit_mut(prefix, out);
                out.push((format!("{prefix}.lora_down"), &mut a.down));
                out.push((format!("{prefix}.lora_up"), &mut a.up));
            }
        }
    }
}

/// The backbone `G`: `linear → ReLU` blocks ending at `feature_dim`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct ExtractorVars {
    blocks: Vec<BlockVars>,
}

impl FeatureExtractor {
    pub fn input_dim(&self) -> usize {
        match &self.blocks[0] {
            Block::Dense(l) => l.d_in(),
            Block::Lora(a) => a.base.d_in(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.blocks.last().expect("extractor has blocks") {
            Block::Dense(l) => l.d_out(),
            Block::Lora(a) => a.base.d_out(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, enabled: bool) -> ExtractorVars {
        ExtractorVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Dense(l) => BlockVars::Dense(l.bind(tape, enabled)),
                    Block::Lora(a) => BlockVars::Lora(a.bind(tape, enabled)),
                })
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ExtractorVars, x: Var) -> Result<Var> {
        let cols = tape.shape(x).get(1).copied().unwrap_or(0);
        if tape.shape(x).len() != 2 || cols != self.input_dim() {
            return Err(Error::Dimension {
                op: "feature extractor input",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = x;
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            h = match (block, bv) {
                (Block::Dense(l), BlockVars::Dense(v)) => l.forward(tape, v, h)?,
                (Block::Lora(a), BlockVars::Lora(v)) => a.forward(tape, v, h)?,
                _ => unreachable!("vars bound from the same extractor"),
            };
            h = tape.relu(h);
        }
        Ok(h)
    }

    fn collect(&mut self, tape: &Tape, vars: &ExtractorVars) -> Result<()> {
        for (block, bv) in self.blocks.iter_mut().zip(&vars.blocks) {
            match (block, bv) {
                (Block::Dense(l), BlockVars::Dense(v)) => l.collect(tape, v)?,
                (Block::Lora(a), BlockVars::Lora(v)) => a.collect(tape, v)?,
                _ => unreachable!("vars bound from the same extractor"),
            }
        }
        Ok(())
    }

    fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("extractor.block{i}"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("extractor.block{i}"), out);
        }
    }
}

/// The head `C`: linear(f→f) → ReLU → dropout → linear(f→2).
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear1: LinearLayer,
    pub linear2: LinearLayer,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    linear1: LinearVars,
    linear2: LinearVars,
}

impl ClassifierHead {
    fn init(rng: &mut ChaCha8Rng, feature_dim: usize, dropout: f64) -> Self {
        Self {
            linear1: LinearLayer::init(rng, feature_dim, feature_dim, true),
            linear2: LinearLayer::init(rng, feature_dim, 2, true),
            dropout,
        }
    }

    pub fn bind(&self, tape: &mut Tape, enabled: bool) -> HeadVars {
        HeadVars {
            linear1: self.linear1.bind(tape, enabled),
            linear2: self.linear2.bind(tape, enabled),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        z: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.linear1.forward(tape, &vars.linear1, z)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, training, rng)?;
        self.linear2.forward(tape, &vars.linear2, h)
    }

    fn collect(&mut self, tape: &Tape, vars: &HeadVars) -> Result<()> {
        self.linear1.collect(tape, &vars.linear1)?;
        self.linear2.collect(tape, &vars.linear2)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear1.visit(&format!("{prefix}.linear1"), out);
        self.linear2.visit(&format!("{prefix}.linear2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.linear1.visit_mut(&format!("{prefix}.linear1"), out);
        self.linear2.visit_mut(&format!("{prefix}.linear2"), out);
    }
}

/// Classifier pairs `(C_i, C'_i)`, one per source domain, over a shared `G`.
#[derive(Clone, Debug)]
pub struct ClassifierPairSet {
    pub pairs: Vec<(ClassifierHead, ClassifierHead)>,
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Single(ClassifierHead),
    Pairs(ClassifierPairSet),
}

#[derive(Clone, Debug)]
pub enum ClassifierVars {
    Single(HeadVars),
    Pairs(Vec<(HeadVars, HeadVars)>),
}

impl Classifier {
    pub fn heads(&self) -> Vec<&ClassifierHead> {
        match self {
            Classifier::Single(h) => vec![h],
            Classifier::Pairs(set) => set.pairs.iter().flat_map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl ClassifierVars {
    pub fn heads(&self) -> Vec<HeadVars> {
        match self {
            ClassifierVars::Single(h) => vec![*h],
            ClassifierVars::Pairs(p) => p.iter().flat_map(|(a, b)| [*a, *b]).collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub extractor: ExtractorVars,
    pub classifier: ClassifierVars,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
}

/// Builds a freshly initialized model from `config`.
///
/// Weights are He-uniform and biases zero, drawn from a generator seeded
/// with `config.seed`; LoRA `up` matrices start at zero so an adapted
/// model initially computes exactly what its frozen base computes.
pub fn build_model(config: &ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let config = config.clone().resolved();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut widths = vec![config.input_dim];
    widths.extend(&config.hidden);
    widths.push(config.feature_dim);
    let n_blocks = config.block_count();
    let first_trainable = n_blocks - config.unfreeze;

    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let layer = LinearLayer::init(&mut rng, widths[i], widths[i + 1], i >= first_trainable);
        blocks.push(layer);
    }
    let blocks = match config.adaptation {
        Adaptation::None => blocks.into_iter().map(Block::Dense).collect(),
        Adaptation::Lora { rank, alpha } => {
            let alpha = alpha.expect("resolved config carries alpha");
            blocks
                .into_iter()
                .map(|l| Block::Lora(LoraAdapter::init(&mut rng, l, rank, alpha)))
                .collect()
        }
    };
    let extractor = FeatureExtractor { blocks };

    let classifier = match config.heads {
        HeadLayout::Single => {
            Classifier::Single(ClassifierHead::init(&mut rng, config.feature_dim, config.dropout))
        }
        HeadLayout::Pairs(n) => Classifier::Pairs(ClassifierPairSet {
            pairs: (0..n)
                .map(|_| {
                    let a = ClassifierHead::init(&mut rng, config.feature_dim, config.dropout);
                    let b = ClassifierHead::init(&mut rng, config.feature_dim, config.dropout);
                    (a, b)
                })
                .collect(),
        }),
    };

    Ok(ModelBundle {
        config,
        extractor,
        classifier,
    })
}

impl ModelBundle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn pair_count(&self) -> usize {
        match &self.classifier {
            Classifier::Single(_) => 0,
            Classifier::Pairs(set) => set.pairs.len(),
        }
    }

    /// Puts every parameter on `tape`; only tensors that are trainable and
    /// belong to `group` will receive gradients.
    pub fn bind(&self, tape: &mut Tape, group: ParamGroup) -> BundleVars {
        let extractor = self.extractor.bind(tape, group.extractor());
        let classifier = match &self.classifier {
            Classifier::Single(h) => ClassifierVars::Single(h.bind(tape, group.heads())),
            Classifier::Pairs(set) => ClassifierVars::Pairs(
                set.pairs
                    .iter()
                    .map(|(a, b)| (a.bind(tape, group.heads()), b.bind(tape, group.heads())))
                    .collect(),
            ),
        };
        BundleVars {
            extractor,
            classifier,
        }
    }

    /// Feature embedding `z = G(x)`.
    pub fn features(&self, tape: &mut Tape, vars: &BundleVars, x: Var) -> Result<Var> {
        self.extractor.forward(tape, &vars.extractor, x)
    }

    /// Logits of every head on `z`, in pair order `C_1, C'_1, C_2, ...`.
    pub fn head_logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &BundleVars,
        z: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        self.classifier
            .heads()
            .into_iter()
            .zip(vars.classifier.heads())
            .map(|(h, hv)| h.forward(tape, &hv, z, training, rng))
            .collect()
    }

    /// `C(G(x))` for a single-head model; for classifier pairs this is the
    /// first head `C_1`. Use [`ModelBundle::predict_proba`] for the ensemble.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &BundleVars,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let z = self.features(tape, vars, x)?;
        let head = self.classifier.heads()[0];
        let hv = vars.classifier.heads()[0];
        head.forward(tape, &hv, z, training, rng)
    }

    /// Inference-mode class probabilities, `[rows × 2]` row-major. Pairs
    /// are combined by averaging the softmax of all `2N` heads.
    pub fn predict_proba(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, ParamGroup::Nothing);
        let input = tape.input(vec![rows, self.input_dim()], x.to_vec()).map_err(|_| {
            Error::Dimension {
                op: "predict",
                lhs: vec![rows, x.len() / rows.max(1)],
                rhs: vec![self.input_dim()],
            }
        })?;
        let z = self.features(&mut tape, &vars, input)?;
        // Dropout is inactive outside training, so the generator is unused.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.head_logits(&mut tape, &vars, z, false, &mut rng)?;
        let probs: Vec<Var> = logits
            .into_iter()
            .map(|l| tape.softmax(l))
            .collect::<Result<_>>()?;
        Ok(ensemble_mean(&tape, &probs))
    }

    /// Hard predictions (argmax, ties to class 0).
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(x, rows)?
            .chunks(2)
            .map(|p| u8::from(p[1] > p[0]))
            .collect())
    }

    /// Adds the tape gradients of every bound parameter into its tensor.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &BundleVars) -> Result<()> {
        self.extractor.collect(tape, &vars.extractor)?;
        match (&mut self.classifier, &vars.classifier) {
            (Classifier::Single(h), ClassifierVars::Single(v)) => h.collect(tape, v)?,
            (Classifier::Pairs(set), ClassifierVars::Pairs(vs)) => {
                for ((a, b), (va, vb)) in set.pairs.iter_mut().zip(vs) {
                    a.collect(tape, va)?;
                    b.collect(tape, vb)?;
                }
            }
            _ => unreachable!("vars bound from the same bundle"),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.named_params_mut()
            .into_iter()
            .for_each(|(_, t)| t.zero_grad());
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.extractor.visit(&mut out);
        match &self.classifier {
            Classifier::Single(h) => h.visit("head", &mut out),
            Classifier::Pairs(set) => {
                for (i, (a, b)) in set.pairs.iter().enumerate() {
                    a.visit(&format!("pair{i}.c"), &mut out);
                    b.visit(&format!("pair{i}.c_prime"), &mut out);
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.extractor.visit_mut(&mut out);
        match &mut self.classifier {
            Classifier::Single(h) => h.visit_mut("head", &mut out),
            Classifier::Pairs(set) => {
                for (i, (a, b)) in set.pairs.iter_mut().enumerate() {
                    a.visit_mut(&format!("pair{i}.c"), &mut out);
                    b.visit_mut(&format!("pair{i}.c_prime"), &mut out);
                }
            }
        }
        out
    }

    /// Parameters of `group`, for handing to an optimizer.
    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<(String, &mut Tensor)> {
        self.named_params_mut()
            .into_iter()
            .filter(|(name, _)| {
                let is_extractor = name.starts_with("extractor.");
                (is_extractor && group.extractor()) || (!is_extractor && group.heads())
            })
            .collect()
    }

    /// Bitwise comparison of the parameters in `group`.
    pub fn group_bitwise_eq(&self, other: &ModelBundle, group: ParamGroup) -> bool {
        let pick = |m: &ModelBundle| -> Vec<Tensor> {
            m.named_params()
                .into_iter()
                .filter(|(name, _)| {
                    let is_extractor = name.starts_with("extractor.");
                    (is_extractor && group.extractor()) || (!is_extractor && group.heads())
                })
                .map(|(_, t)| t.clone())
                .collect()
        };
        let (a, b) = (pick(self), pick(other));
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }

    /// Parameters an optimizer may update.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Row-wise average of several `[rows × 2]` probability nodes.
fn ensemble_mean(tape: &Tape, probs: &[Var]) -> Vec<f64> {
    let n = probs.len() as f64;
    let mut out = vec![0.0; tape.value(probs[0]).len()];
    for &p in probs {
        out.iter_mut().zip(tape.value(p)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Uniform average of per-classifier probability tables.
pub fn average_probabilities(tables: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Degenerate("no classifiers to average".into()))?;
    if tables.iter().any(|t| t.len() != first.len()) {
        return Err(Error::Shape("probability tables differ in size".into()));
    }
    let n = tables.len() as f64;
    Ok((0..first.len())
        .map(|i| tables.iter().map(|t| t[i]).sum::<f64>() / n)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: ModelConfig,
    #[serde(default)]
    meta: std::collections::BTreeMap<String, String>,
    params: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "weedshift-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model plus free-form metadata (strategy, selected epoch, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelBundle,
    pub meta: std::collections::BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            meta: self.meta.clone(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::format(origin, format!("not a checkpoint: `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {}", file.version),
            ));
        }
        let mut model = build_model(&file.model)?;
        let mut stored: std::collections::BTreeMap<String, NamedTensor> = file
            .params
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        for (name, t) in model.named_params_mut() {
            let p = stored
                .remove(&name)
                .ok_or_else(|| Error::format(origin, format!("missing parameter `{name}`")))?;
            if p.shape != t.shape() || p.data.len() != t.numel() {
                return Err(Error::format(
                    origin,
                    format!("parameter `{name}` has shape {:?}, expected {:?}", p.shape, t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::format(origin, format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            model,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
