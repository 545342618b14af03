//! Central-difference gradient oracle and the catalogue of differentiable
//! operations it is run against.
#![allow(dead_code)]

pub mod alternation;
pub mod benchmark;
pub mod lora;
pub mod protocol;
pub mod tiling;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weedshift::adapt::{classifier_discrepancy, moment_distance_multi, moment_distance_single};
use weedshift::nn::{build_model, ModelConfig, ParamGroup};
use weedshift::tape::{Tape, Var};
use weedshift::tensor::Tensor;
use weedshift::Result;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// How input entries are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Uniform in [-2, 2].
    Any,
    /// Uniform in [-2, 2] with |x| >= 0.05, away from kinks at zero.
    AwayFromZero,
    /// Uniform in [0.5, 3].
    Positive,
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub build: Build,
}

pub fn sample(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-2.0..2.0),
            Domain::AwayFromZero => {
                let m: f64 = rng.random_range(0.05..2.0);
                if rng.random_bool(0.5) { m } else { -m }
            }
            Domain::Positive => rng.random_range(0.5..3.0),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar value and gradients of every input.
pub fn analytic(build: &Build, inputs: &[Tensor]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_with(t, true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (tape.scalar(loss), grads)
}

fn value(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_with(t, false)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.scalar(loss)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of every input.
pub fn central_difference(build: &Build, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = value(build, &work);
            work[k].data_mut()[i] = x0 - h;
            let down = value(build, &work);
            work[k].data_mut()[i] = x0;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all inputs at once; 0 when both vanish.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let (a, b) = (flat(a), flat(b));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Largest relative error over `instances` random draws of `case`.
pub fn worst_error(case: &Case, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| sample(&mut rng, s, case.domain)).collect();
            let (_, exact) = analytic(&case.build, &inputs);
            let approx = central_difference(&case.build, &inputs, 1e-6);
            relative_error(&exact, &approx)
        })
        .fold(0.0, f64::max)
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct gradient.
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = tape.input(shape, weights)?;
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

fn unary(name: &'static str, shape: &[usize], domain: Domain, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    Case {
        name,
        shapes: vec![shape.to_vec()],
        domain,
        build: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y)
        }),
    }
}

fn binary(name: &'static str, a: &[usize], b: &[usize], f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    Case {
        name,
        shapes: vec![a.to_vec(), b.to_vec()],
        domain: Domain::Any,
        build: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            project(t, y)
        }),
    }
}

const LABELS: [usize; 5] = [0, 1, 1, 0, 1];

/// Every differentiable tape operation and every training loss.
pub fn cases() -> Vec<Case> {
    let mut out = vec![
        binary("matmul", &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b)),
        unary("transpose", &[3, 4], Domain::Any, |t, x| t.transpose(x)),
        binary("add", &[2, 3], &[2, 3], |t, a, b| t.add(a, b)),
        binary("add_scalar", &[2, 3], &[], |t, a, b| t.add(a, b)),
        binary("sub", &[2, 3], &[2, 3], |t, a, b| t.sub(a, b)),
        binary("sub_scalar", &[], &[2, 3], |t, a, b| t.sub(a, b)),
        binary("mul", &[2, 3], &[2, 3], |t, a, b| t.mul(a, b)),
        binary("mul_scalar", &[2, 3], &[], |t, a, b| t.mul(a, b)),
        unary("scale", &[2, 3], Domain::Any, |t, x| Ok(t.scale(x, -1.7))),
        unary("neg", &[2, 3], Domain::Any, |t, x| Ok(t.neg(x))),
        unary("pow2", &[2, 3], Domain::Any, |t, x| Ok(t.pow(x, 2))),
        unary("pow3", &[2, 3], Domain::Any, |t, x| Ok(t.pow(x, 3))),
        unary("pow_neg1", &[2, 3], Domain::Positive, |t, x| Ok(t.pow(x, -1))),
        unary("relu", &[2, 3], Domain::AwayFromZero, |t, x| Ok(t.relu(x))),
        unary("exp", &[2, 3], Domain::Any, |t, x| Ok(t.exp(x))),
        unary("log", &[2, 3], Domain::Positive, |t, x| t.log(x)),
        unary("abs", &[2, 3], Domain::AwayFromZero, |t, x| Ok(t.abs(x))),
        binary("add_bias", &[4, 3], &[3], |t, a, b| t.add_bias(a, b)),
        unary("sum_all", &[3, 4], Domain::Any, |t, x| t.sum(x, None)),
        unary("sum_axis0", &[3, 4], Domain::Any, |t, x| t.sum(x, Some(0))),
        unary("sum_axis1", &[3, 4], Domain::Any, |t, x| t.sum(x, Some(1))),
        unary("mean_all", &[3, 4], Domain::Any, |t, x| t.mean(x, None)),
        unary("mean_axis0", &[3, 4], Domain::Any, |t, x| t.mean(x, Some(0))),
        unary("mean_axis1", &[3, 4], Domain::Any, |t, x| t.mean(x, Some(1))),
        unary("l2_norm", &[5], Domain::AwayFromZero, |t, x| Ok(t.l2_norm(x))),
        unary("softmax", &[4, 3], Domain::Any, |t, x| t.softmax(x)),
        Case {
            name: "dropout",
            shapes: vec![vec![4, 5]],
            domain: Domain::Any,
            build: Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let y = t.dropout(v[0], 0.3, true, &mut rng)?;
                project(t, y)
            }),
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![5, 2]],
            domain: Domain::Any,
            build: Box::new(|t, v| t.softmax_cross_entropy(v[0], &LABELS, None)),
        },
        Case {
            name: "cross_entropy_weighted",
            shapes: vec![vec![5, 2]],
            domain: Domain::Any,
            build: Box::new(|t, v| t.softmax_cross_entropy(v[0], &LABELS, Some(&[1.0, 4.0]))),
        },
        Case {
            name: "moment_distance_single",
            shapes: vec![vec![6, 4], vec![5, 4]],
            domain: Domain::Any,
            build: Box::new(|t, v| moment_distance_single(t, v[0], v[1])),
        },
        Case {
            name: "moment_distance_multi",
            shapes: vec![vec![4, 3], vec![5, 3], vec![3, 3], vec![6, 3]],
            domain: Domain::Any,
            build: Box::new(|t, v| moment_distance_multi(t, &v[..3], v[3])),
        },
        Case {
            name: "classifier_discrepancy",
            shapes: vec![vec![5, 2], vec![5, 2]],
            domain: Domain::Any,
            build: Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                let q = t.softmax(v[1])?;
                classifier_discrepancy(t, p, q)
            }),
        },
    ];
    let model = build_model(&ModelConfig {
        input_dim: 4,
        hidden: vec![6],
        feature_dim: 5,
        dropout: 0.0,
        ..ModelConfig::default()
    })
    .unwrap();
    out.push(Case {
        name: "model_cross_entropy",
        shapes: vec![vec![5, 4]],
        domain: Domain::Any,
        build: Box::new(move |t, v| {
            let vars = model.bind(t, ParamGroup::Nothing);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits = model.forward(t, &vars, v[0], false, &mut rng)?;
            t.softmax_cross_entropy(logits, &LABELS, None)
        }),
    });
    out
}
