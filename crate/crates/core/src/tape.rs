//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; a node only ever refers to
//! nodes with a smaller index, so the tape order is a topological order and
//! the backward pass is a single reverse sweep. Leaves created from a
//! [`Tensor`] with `requires_grad` accumulate their gradient on the tape
//! across backward calls until [`Tape::zero_grad`].
//!
//! ```
//! use weedshift::tape::Tape;
//! use weedshift::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().with_requires_grad(true));
//! let sq = tape.pow(x, 2);
//! let loss = tape.sum(sq, None).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the operands of a binary elementwise op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Pow {
        x: usize,
        k: i32,
    },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    AddBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Reduce {
        kind: Reduction,
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Norm(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        cols: usize,
        labels: Vec<usize>,
        /// Per-sample weight already divided by the total weight.
        weights: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward computation.
///
/// A tape is single-threaded and short-lived: build one per optimization
/// step, read the gradients back, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copies `t` onto the tape; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, t.requires_grad())
    }

    /// Copies `t` onto the tape, overriding whether it tracks gradients.
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// A constant input that never receives a gradient.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf_with(&t, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "{op} expects a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let value = transpose_raw(self.value(x), rows, cols);
        let rg = self.requires_grad(x);
        Ok(self.push(vec![cols, rows], value, Op::Transpose { x: x.0, rows, cols }, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let (bcast, shape) = if sa == sb {
            (Broadcast::Same, sa.to_vec())
        } else if nb == 1 {
            (Broadcast::RhsScalar, sa.to_vec())
        } else if na == 1 {
            (Broadcast::LhsScalar, sb.to_vec())
        } else {
            return Err(Error::Dimension {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f64> = match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RhsScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::LhsScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Scale { x: x.0, factor }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Elementwise integer power.
    pub fn pow(&mut self, x: Var, k: i32) -> Var {
        let value = self.value(x).iter().map(|v| v.powi(k)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Pow { x: x.0, k }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Relu(x.0), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Exp(x.0), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Log(x.0), rg))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Abs(x.0), rg)
    }

    /// Adds a bias vector `[n]` to every row of a `[b × n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: vec![rows, cols],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(
            vec![rows, cols],
            value,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                cols,
            },
            rg,
        ))
    }

    fn reduce(&mut self, kind: Reduction, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, self.value(x).len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape(format!(
                        "reduction axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out = shape.clone();
                out.remove(ax);
                (outer, shape[ax], inner, out)
            }
        };
        if len == 0 || outer * inner == 0 {
            return Err(Error::Degenerate(format!(
                "empty reduction over shape {shape:?}"
            )));
        }
        let src = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        if kind == Reduction::Mean {
            let inv = 1.0 / len as f64;
            value.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            out_shape,
            value,
            Op::Reduce {
                kind,
                x: x.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Sum over `axis`, or over every element when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduction::Sum, x, axis)
    }

    /// Mean over `axis`, or over every element when `axis` is `None`.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduction::Mean, x, axis)
    }

    /// Euclidean norm of all elements; the subgradient at the origin is 0.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let norm = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.requires_grad(x);
        self.push(Vec::new(), vec![norm], Op::L2Norm(x.0), rg)
    }

    /// Row-wise softmax of a `[b × c]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "softmax")?;
        let value = softmax_rows(self.value(x), cols);
        let rg = self.requires_grad(x);
        Ok(self.push(vec![rows, cols], value, Op::Softmax { x: x.0, cols }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, using the log-sum-exp form.
    ///
    /// With `class_weights`, each sample's term is scaled by the weight of
    /// its class and the sum is normalized by the total weight.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if rows == 0 {
            return Err(Error::Degenerate("cross-entropy over an empty batch".into()));
        }
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Label(format!(
                "label {bad} outside 0..{cols}"
            )));
        }
        let raw_weights: Vec<f64> = match class_weights {
            None => vec![1.0; rows],
            Some(w) => {
                if w.len() != cols || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "class weights {w:?} must be {cols} finite non-negative values"
                    )));
                }
                labels.iter().map(|&l| w[l]).collect()
            }
        };
        let total: f64 = raw_weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("class weights sum to zero on this batch".into()));
        }
        let weights: Vec<f64> = raw_weights.iter().map(|w| w / total).collect();

        let x = self.value(logits);
        let mut loss = 0.0;
        for (r, row) in x.chunks(cols).enumerate() {
            // ln Σ exp(x_j - max) = ln(1 + Σ_{j != argmax} exp(x_j - max))
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            loss += weights[r] * ((max - row[labels[r]]) + rest.ln_1p());
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                cols,
                labels: labels.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// itself so inference is an exact identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Back-propagates from a single-element `loss`, adding into the
    /// gradient of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |target: usize, contribution: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut adj[target] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(g),
                },
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let bt = transpose_raw(&nodes[b].value, k, n);
                        send(a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if nodes[b].requires_grad {
                        let at = transpose_raw(&nodes[a].value, m, k);
                        send(b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                &Op::Transpose { x, rows, cols } => send(x, transpose_raw(&g, cols, rows)),
                &Op::Binary { kind, a, b, bcast } => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    let at = |j: usize| if bcast == Broadcast::LhsScalar { 0 } else { j };
                    let bt = |j: usize| if bcast == Broadcast::RhsScalar { 0 } else { j };
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => g.iter().enumerate().map(|(j, g)| g * vb[bt(j)]).collect(),
                    };
                    let gb: Vec<f64> = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(j, g)| g * va[at(j)]).collect(),
                    };
                    let collapse = |v: Vec<f64>, scalar: bool| {
                        if scalar {
                            vec![v.iter().sum()]
                        } else {
                            v
                        }
                    };
                    send(a, collapse(ga, bcast == Broadcast::LhsScalar));
                    send(b, collapse(gb, bcast == Broadcast::RhsScalar));
                }
                &Op::Scale { x, factor } => send(x, g.iter().map(|v| v * factor).collect()),
                &Op::Pow { x, k } => {
                    let xv = &nodes[x].value;
                    let kf = f64::from(k);
                    send(
                        x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, x)| g * kf * x.powi(k - 1))
                            .collect(),
                    );
                }
                &Op::Relu(x) => {
                    let xv = &nodes[x].value;
                    send(
                        x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                &Op::Exp(x) => send(x, g.iter().zip(&node.value).map(|(g, y)| g * y).collect()),
                &Op::Log(x) => {
                    let xv = &nodes[x].value;
                    send(x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
                }
                &Op::Abs(x) => {
                    let xv = &nodes[x].value;
                    send(
                        x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, x)| {
                                if *x > 0.0 {
                                    *g
                                } else if *x < 0.0 {
                                    -g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                &Op::AddBias { x, bias, cols } => {
                    if nodes[bias].requires_grad {
                        let mut gb = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        send(bias, gb);
                    }
                    send(x, g);
                }
                &Op::Reduce {
                    kind,
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let scale = if kind == Reduction::Mean {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for j in 0..inner {
                                gx[base + j] = g[o * inner + j] * scale;
                            }
                        }
                    }
                    send(x, gx);
                }
                &Op::L2Norm(x) => {
                    let norm = node.value[0];
                    let xv = &nodes[x].value;
                    let gx = if norm > 0.0 {
                        xv.iter().map(|v| g[0] * v / norm).collect()
                    } else {
                        vec![0.0; xv.len()]
                    };
                    send(x, gx);
                }
                &Op::Softmax { x, cols } => {
                    let y = &node.value;
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(x, gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    cols,
                    labels,
                    weights,
                } => {
                    let probs = softmax_rows(&nodes[*logits].value, *cols);
                    let mut gx = probs;
                    for (r, row) in gx.chunks_mut(*cols).enumerate() {
                        row[labels[r]] -= 1.0;
                        let w = weights[r] * g[0];
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    send(*logits, gx);
                }
                Op::Dropout { x, mask } => {
                    send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}
