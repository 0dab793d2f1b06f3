//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::heads::{gaussian_log_joint, log_prior_from_joint, HeadVars};
use crate::moments::{mom_loss, Centering, MomentError, MomentSpec, MomentTables};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Step used by the gradient suite.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Maximum relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of a scalar-valued graph function against
/// central differences with step `h`, over every entry of every input.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`; the maximum
/// over all entries is returned.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward_only(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()?.to_f64_lossy())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            work[which].data_mut()[j] = x + T::lit(h);
            let up = eval(&work)?;
            work[which].data_mut()[j] = x - T::lit(h);
            let down = eval(&work)?;
            work[which].data_mut()[j] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which].data()[j].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// One row of the gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    loss: Loss,
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("sized")
    }

    /// Values in `[-2, 2]` kept at least `gap` away from zero.
    fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        let mut t = self.uniform(shape, gap, 2.0);
        for x in t.data_mut() {
            if self.0.random::<bool>() {
                *x = -*x;
            }
        }
        t
    }

    /// Random positive weights, so weighted sums do not cancel.
    fn weights(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, 0.5, 1.5)
    }
}

/// `Σ out ⊙ w` for a fixed random `w` of the same shape as `out`.
fn weighted(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    g.sum_all(p)
}

fn unary(
    name: &str,
    x: Tensor<f64>,
    w: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        inputs: vec![x],
        loss: Box::new(move |g, v| {
            let out = op(g, v[0])?;
            weighted(g, out, &w)
        }),
    }
}

fn binary(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    w: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        inputs: vec![a, b],
        loss: Box::new(move |g, v| {
            let out = op(g, v[0], v[1])?;
            weighted(g, out, &w)
        }),
    }
}

fn op_cases(s: &mut Sampler) -> Vec<Case> {
    let mut cases = vec![
        binary(
            "add (broadcast)",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.uniform(&[4], -2.0, 2.0),
            s.weights(&[3, 4]),
            |g, a, b| g.add(a, b),
        ),
        binary(
            "sub (broadcast)",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.uniform(&[3, 1], -2.0, 2.0),
            s.weights(&[3, 4]),
            |g, a, b| g.sub(a, b),
        ),
        binary(
            "mul (broadcast)",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.uniform(&[4], -2.0, 2.0),
            s.weights(&[3, 4]),
            |g, a, b| g.mul(a, b),
        ),
        binary(
            "div",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.uniform(&[3, 4], 0.5, 2.0),
            s.weights(&[3, 4]),
            |g, a, b| g.div(a, b),
        ),
        binary(
            "matmul",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.uniform(&[4, 2], -2.0, 2.0),
            s.weights(&[3, 2]),
            |g, a, b| g.matmul(a, b),
        ),
        unary(
            "exp",
            s.uniform(&[2, 3], -2.0, 2.0),
            s.weights(&[2, 3]),
            |g, a| g.exp(a),
        ),
        unary(
            "log",
            s.uniform(&[2, 3], 0.2, 2.0),
            s.weights(&[2, 3]),
            |g, a| g.log(a),
        ),
        unary(
            "powi",
            s.away_from_zero(&[2, 3], 0.2),
            s.weights(&[2, 3]),
            |g, a| g.powi(a, 3),
        ),
        unary(
            "neg",
            s.uniform(&[2, 3], -2.0, 2.0),
            s.weights(&[2, 3]),
            |g, a| g.neg(a),
        ),
        unary(
            "leaky_relu",
            s.away_from_zero(&[3, 4], 0.1),
            s.weights(&[3, 4]),
            |g, a| g.leaky_relu(a),
        ),
        unary(
            "scale",
            s.uniform(&[2, 3], -2.0, 2.0),
            s.weights(&[2, 3]),
            |g, a| g.scale(a, -1.7),
        ),
        unary(
            "offset",
            s.uniform(&[2, 3], -2.0, 2.0),
            s.weights(&[2, 3]),
            |g, a| g.offset(a, 0.3),
        ),
        unary(
            "sum (axis)",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[4]),
            |g, a| g.sum(a, &[0], false),
        ),
        unary(
            "mean (axis)",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[3, 1]),
            |g, a| g.mean(a, &[1], true),
        ),
        unary(
            "logsumexp",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[3]),
            |g, a| g.logsumexp(a, 1, false),
        ),
        unary(
            "log_softmax",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[3, 4]),
            |g, a| g.log_softmax(a, 1),
        ),
        unary(
            "softmax",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[3, 4]),
            |g, a| g.softmax(a, 1),
        ),
        unary(
            "reshape",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[2, 6]),
            |g, a| g.reshape(a, &[2, 6]),
        ),
        unary(
            "transpose",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[4, 3]),
            |g, a| g.transpose(a),
        ),
        unary(
            "gather_rows",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[4, 4]),
            |g, a| g.gather_rows(a, &[2, 0, 2, 1]),
        ),
        unary(
            "pick",
            s.uniform(&[3, 4], -2.0, 2.0),
            s.weights(&[3]),
            |g, a| g.pick(a, &[3, 0, 1]),
        ),
    ];
    // Distinct entries so the maximum is unique and differentiable.
    let mut distinct: Vec<f64> = (0..12).map(|i| -2.0 + 4.0 * i as f64 / 11.0).collect();
    distinct.shuffle(&mut s.0);
    cases.push(unary(
        "max (axis)",
        Tensor::new(vec![3, 4], distinct).expect("sized"),
        s.weights(&[3]),
        |g, a| g.max(a, &[1], false),
    ));
    cases
}

fn head_cases(s: &mut Sampler) -> Vec<Case> {
    let (n, k, d) = (5, 3, 4);
    let w = s.weights(&[n, k]);
    let wp = s.weights(&[n]);
    let z = s.uniform(&[n, d], -2.0, 2.0);
    let mu = s.uniform(&[k, d], -2.0, 2.0);
    let lv = s.uniform(&[k, d], -0.5, 0.5);
    let w2 = w.clone();
    let wl = w.clone();
    vec![
        Case {
            name: "aagmm conditional wrt z, mu, log_var".into(),
            inputs: vec![z.clone(), mu.clone(), lv.clone()],
            loss: Box::new(move |g, v| {
                let lj = gaussian_log_joint(g, v[0], v[1], Some(v[2]))?;
                let lc = g.log_softmax(lj, 1)?;
                weighted(g, lc, &w)
            }),
        },
        Case {
            name: "aagmm log_prior wrt z, mu, log_var".into(),
            inputs: vec![z.clone(), mu.clone(), lv],
            loss: Box::new(move |g, v| {
                let lj = gaussian_log_joint(g, v[0], v[1], Some(v[2]))?;
                let lp = log_prior_from_joint(g, lj)?;
                weighted(g, lp, &wp)
            }),
        },
        Case {
            name: "kmeans conditional wrt z, mu".into(),
            inputs: vec![z.clone(), mu],
            loss: Box::new(move |g, v| {
                let lj = gaussian_log_joint(g, v[0], v[1], None)?;
                let lc = g.log_softmax(lj, 1)?;
                weighted(g, lc, &w2)
            }),
        },
        Case {
            name: "linear conditional wrt z, weight, bias".into(),
            inputs: vec![z, s.uniform(&[d, k], -1.0, 1.0), s.uniform(&[k], -1.0, 1.0)],
            loss: Box::new(move |g, v| {
                let head = HeadVars::Linear {
                    weight: v[1],
                    bias: v[2],
                };
                let sc = head.scores(g, v[0])?;
                let lc = g.log_softmax(sc, 1)?;
                weighted(g, lc, &wl)
            }),
        },
        perceptron_case(s),
    ]
}

fn perceptron_case(s: &mut Sampler) -> Case {
    let x = s.uniform(&[4, 3], -2.0, 2.0);
    let labels = vec![0usize, 2, 1, 2];
    Case {
        name: "2-layer perceptron cross-entropy".into(),
        inputs: vec![
            s.uniform(&[3, 5], -1.0, 1.0),
            s.uniform(&[5], -0.5, 0.5),
            s.uniform(&[5, 3], -1.0, 1.0),
            s.uniform(&[3], -0.5, 0.5),
        ],
        loss: Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, v[0])?;
            let h = g.add(h, v[1])?;
            let h = g.leaky_relu(h)?;
            let o = g.matmul(h, v[2])?;
            let o = g.add(o, v[3])?;
            let lp = g.log_softmax(o, 1)?;
            let p = g.pick(lp, &labels)?;
            let m = g.mean_all(p)?;
            g.neg(m)
        }),
    }
}

fn moment_error(e: MomentError) -> TensorError {
    match e {
        MomentError::Tensor(t) => t,
        _ => TensorError::Domain { op: "mom_loss" },
    }
}

fn moment_cases(s: &mut Sampler) -> Vec<Case> {
    let mut cases = Vec::new();
    for d in [2, 4, 6] {
        for p in 1..=4 {
            let n = 6;
            let tables = MomentTables::<f64>::new(d, p).expect("valid order");
            let global = MomentSpec::new(p, Centering::Global);
            let t = tables.clone();
            cases.push(Case {
                name: format!("mom_loss global p={p} D={d}"),
                inputs: vec![s.uniform(&[n, d], -2.0, 2.0)],
                loss: Box::new(move |g, v| {
                    Ok(mom_loss(g, v[0], &global, &t, None)
                        .map_err(moment_error)?
                        .total)
                }),
            });
            let per = MomentSpec::new(p, Centering::PerCluster);
            cases.push(Case {
                name: format!("mom_loss per-cluster p={p} D={d}"),
                inputs: vec![
                    s.uniform(&[n, d], -1.5, 1.5),
                    s.uniform(&[2, d], -1.0, 1.0),
                    s.uniform(&[2, d], -0.3, 0.3),
                ],
                loss: Box::new(move |g, v| {
                    let head = HeadVars::Aagmm {
                        centers: v[1],
                        log_var: v[2],
                    };
                    Ok(mom_loss(g, v[0], &per, &tables, Some(&head))
                        .map_err(moment_error)?
                        .total)
                }),
            });
        }
    }
    cases
}

/// Runs the full gradient suite: every tape operation, the three heads,
/// a small perceptron, and the moment loss for orders 1 to 4 at D = 2, 4, 6
/// in both centering modes.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = op_cases(&mut s);
    cases.extend(head_cases(&mut s));
    cases.extend(moment_cases(&mut s));
    cases
        .into_iter()
        .map(|c| {
            Ok(CheckRow {
                max_rel_err: finite_diff_check(&c.loss, &c.inputs, DEFAULT_STEP)?,
                name: c.name,
            })
        })
        .collect()
}
