//! Method-of-moments constraints on the latent embedding.
//!
//! For each order `p`, the sample hyper-covariance tensor
//! `M_p[d₁..d_p] = (1/n) Σ_i Π_j zc[i, d_j]` is compared against the moments of
//! a standard normal. Each squared discrepancy is weighted by the reciprocal of
//! the number of tuples that share its hyper-diagonal count, so every class of
//! tuples contributes at most one unit to the order's loss.
//!
//! The first-order moment is always taken around the reference point (zero in
//! global mode, the cluster center in per-cluster mode); higher orders use the
//! centered samples.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::heads::HeadVars;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Highest supported moment order.
pub const MAX_ORDER: usize = 4;

/// Clusters whose total responsibility falls below this mass are skipped.
pub const MIN_CLUSTER_MASS: f64 = 1e-6;

/// Default cross-order weights for orders 1..=4.
pub const DEFAULT_ORDER_WEIGHTS: [f64; MAX_ORDER] = [1.0, 0.5, 0.25, 0.125];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("moment constraint disabled (order 0)")]
    Disabled,
    #[error("moment order {0} exceeds the supported maximum of 4")]
    OrderTooHigh(usize),
    #[error("order weights must be non-negative")]
    NegativeWeight,
    #[error("moments of an empty sample")]
    EmptySample,
    #[error("per-cluster centering needs a Gaussian head")]
    NeedsGenerativeHead,
    #[error("every cluster has vanishing responsibility mass")]
    DegenerateResponsibilities,
    #[error("moment tables built for dimension {tables} but samples have width {samples}")]
    DimensionMismatch { tables: usize, samples: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MomentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Centering {
    /// Batch mean for orders ≥ 2, zero for order 1, unit weights.
    Global,
    /// Per cluster `(z − μ_k)/σ_k`, weighted by responsibilities.
    #[default]
    PerCluster,
}

impl fmt::Display for Centering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Centering::Global => "global",
            Centering::PerCluster => "per-cluster",
        })
    }
}

impl FromStr for Centering {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" => Ok(Centering::Global),
            "per-cluster" | "per-cluster-soft" => Ok(Centering::PerCluster),
            other => Err(format!(
                "unknown centering mode `{other}` (expected global or per-cluster)"
            )),
        }
    }
}

/// Which orders are constrained and how they are weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSpec {
    /// Highest constrained order; all lower orders are included. 0 disables.
    pub max_order: usize,
    /// `λ_p` for p = 1..=4; entries above `max_order` are ignored.
    pub weights: [f64; MAX_ORDER],
    pub centering: Centering,
}

impl Default for MomentSpec {
    fn default() -> Self {
        Self {
            max_order: 0,
            weights: DEFAULT_ORDER_WEIGHTS,
            centering: Centering::PerCluster,
        }
    }
}

impl MomentSpec {
    pub fn new(max_order: usize, centering: Centering) -> Self {
        Self {
            max_order,
            centering,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_order > MAX_ORDER {
            return Err(MomentError::OrderTooHigh(self.max_order));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(MomentError::NegativeWeight);
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.max_order > 0
    }

    pub fn weight(&self, order: usize) -> f64 {
        self.weights[order - 1]
    }
}

/// Number of hyper-diagonals an index tuple lies on: `p − #distinct indices`.
pub fn hyperdiag_count(tuple: &[usize]) -> usize {
    let mut seen: Vec<usize> = tuple.to_vec();
    seen.sort_unstable();
    seen.dedup();
    tuple.len() - seen.len()
}

/// Stirling number of the second kind, `S₂(n, k)`.
pub fn stirling2(n: usize, k: usize) -> u64 {
    let mut row = vec![0u64; k + 1];
    row[0] = 1;
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            row[j] = j as u64 * row[j] + row[j - 1];
        }
        row[0] = 0;
    }
    row[k]
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i as u64 + 1))
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Count of length-`p` tuples over `d` symbols with exactly `h` hyper-diagonals:
/// `C(d, m)·m!·S₂(p, m)` with `m = p − h` distinct values.
pub fn class_size(p: usize, d: usize, h: usize) -> u64 {
    if p == 0 || h >= p {
        return 0;
    }
    let m = p - h;
    if m > d {
        return 0;
    }
    binomial(d, m) * factorial(m) * stirling2(p, m)
}

/// `n!!`, with `0!! = (−1)!! = 1`.
pub fn double_factorial(n: i64) -> u64 {
    let mut acc = 1u64;
    let mut k = n;
    while k > 1 {
        acc *= k as u64;
        k -= 2;
    }
    acc
}

/// Standard-normal moment `E[Π_j Z_{d_j}]` for an index tuple: the product over
/// distinct axes of 0 (odd multiplicity) or `(m−1)!!` (even multiplicity m).
pub fn target_moment(tuple: &[usize]) -> f64 {
    let mut sorted = tuple.to_vec();
    sorted.sort_unstable();
    let mut acc = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let mult = (j - i) as i64;
        if mult % 2 == 1 {
            return 0.0;
        }
        acc *= double_factorial(mult - 1) as f64;
        i = j;
    }
    acc
}

fn tuple_of(mut flat: usize, p: usize, d: usize, out: &mut [usize]) {
    for slot in out[..p].iter_mut().rev() {
        *slot = flat % d;
        flat /= d;
    }
}

/// Dense standard-normal target and per-entry weight tensors for one order.
#[derive(Debug, Clone)]
pub struct OrderTable<T: Scalar = f64> {
    pub order: usize,
    pub target: Tensor<T>,
    pub weight: Tensor<T>,
}

/// Targets and hyper-diagonal weights for orders 1..=max_order at dimension D.
#[derive(Debug, Clone)]
pub struct MomentTables<T: Scalar = f64> {
    pub dim: usize,
    pub orders: Vec<OrderTable<T>>,
}

impl<T: Scalar> MomentTables<T> {
    pub fn new(dim: usize, max_order: usize) -> Result<Self> {
        if max_order > MAX_ORDER {
            return Err(MomentError::OrderTooHigh(max_order));
        }
        let orders = (1..=max_order)
            .map(|p| {
                let shape = vec![dim; p];
                let count = dim.pow(p as u32);
                let sizes: Vec<u64> = (0..p).map(|h| class_size(p, dim, h)).collect();
                let mut target = Vec::with_capacity(count);
                let mut weight = Vec::with_capacity(count);
                let mut tuple = [0usize; MAX_ORDER];
                for flat in 0..count {
                    tuple_of(flat, p, dim, &mut tuple);
                    let t = &tuple[..p];
                    target.push(T::lit(target_moment(t)));
                    weight.push(T::one() / T::lit(sizes[hyperdiag_count(t)] as f64));
                }
                OrderTable {
                    order: p,
                    target: Tensor::new(shape.clone(), target).expect("sized"),
                    weight: Tensor::new(shape, weight).expect("sized"),
                }
            })
            .collect();
        Ok(Self { dim, orders })
    }

    pub fn max_order(&self) -> usize {
        self.orders.len()
    }
}

/// Order-`p` sample moment tensor of `zc [n×D]`, shape `[D; p]`.
///
/// Built as iterated outer products followed by a (weighted) mean over samples.
/// `weights`, when given, is a length-n vector; the result is normalized by
/// its sum.
pub fn sample_moments<T: Scalar>(
    g: &mut Graph<T>,
    zc: Var,
    weights: Option<Var>,
    p: usize,
) -> Result<Var> {
    let shape = g.shape(zc).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "sample_moments",
            lhs: shape,
            rhs: vec![],
        }
        .into());
    }
    let (n, d) = (shape[0], shape[1]);
    if n == 0 {
        return Err(MomentError::EmptySample);
    }
    if p == 0 || p > MAX_ORDER {
        return Err(MomentError::OrderTooHigh(p));
    }
    let col = g.reshape(zc, &[n, 1, d])?;
    let mut prod = zc;
    for q in 2..=p {
        let prev = g.reshape(prod, &[n, d.pow(q as u32 - 1), 1])?;
        prod = g.mul(prev, col)?;
    }
    let mut target_shape = vec![n];
    target_shape.extend(std::iter::repeat_n(d, p));
    prod = g.reshape(prod, &target_shape)?;

    match weights {
        None => Ok(g.mean(prod, &[0], false)?),
        Some(w) => {
            let mut wshape = vec![n];
            wshape.extend(std::iter::repeat_n(1, p));
            let wb = g.reshape(w, &wshape)?;
            let weighted = g.mul(prod, wb)?;
            let num = g.sum(weighted, &[0], false)?;
            let mass = g.sum_all(w)?;
            Ok(g.div(num, mass)?)
        }
    }
}

/// One centered sub-population.
#[derive(Debug, Clone, Copy)]
pub struct Population {
    /// Samples whose plain mean is compared with the zero first moment.
    pub first: Var,
    /// Centered samples used for orders ≥ 2.
    pub centered: Var,
    /// Per-sample weights; `None` means uniform.
    pub weights: Option<Var>,
}

/// Splits `z [n×D]` into the populations the moments are measured on.
///
/// Global mode yields one population centered at the batch mean.
/// Per-cluster mode yields one population per cluster with
/// `(z − μ_k)/σ_k` weighted by the responsibility `p(k | z)`; responsibilities
/// stay on the tape so gradients reach the head through them.
pub fn centralize<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    mode: Centering,
    head: Option<&HeadVars>,
) -> Result<Vec<Population>> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "centralize",
            lhs: shape,
            rhs: vec![],
        }
        .into());
    }
    let n = shape[0];
    if n == 0 {
        return Err(MomentError::EmptySample);
    }
    match mode {
        Centering::Global => {
            let mean = g.mean(z, &[0], true)?;
            let centered = g.sub(z, mean)?;
            Ok(vec![Population {
                first: z,
                centered,
                weights: None,
            }])
        }
        Centering::PerCluster => {
            let head = head.ok_or(MomentError::NeedsGenerativeHead)?;
            let centers = head.centers().ok_or(MomentError::NeedsGenerativeHead)?;
            let k = g.shape(centers)[0];
            let scores = head.scores(g, z)?;
            let resp = g.softmax(scores, 1)?;
            let resp_t = g.transpose(resp)?;
            let min_mass = T::lit(MIN_CLUSTER_MASS);
            let mut pops = Vec::with_capacity(k);
            for c in 0..k {
                let rc = g.gather_rows(resp_t, &[c])?;
                let rc = g.reshape(rc, &[n])?;
                if g.value(rc).sum_all() < min_mass {
                    continue;
                }
                let mu = g.gather_rows(centers, &[c])?;
                let mut zc = g.sub(z, mu)?;
                if let Some(lv) = head.log_var() {
                    let lvc = g.gather_rows(lv, &[c])?;
                    let inv_sigma = g.scale(lvc, -T::half())?;
                    let inv_sigma = g.exp(inv_sigma)?;
                    zc = g.mul(zc, inv_sigma)?;
                }
                pops.push(Population {
                    first: zc,
                    centered: zc,
                    weights: Some(rc),
                });
            }
            if pops.is_empty() {
                return Err(MomentError::DegenerateResponsibilities);
            }
            Ok(pops)
        }
    }
}

/// Moment loss on a tape.
#[derive(Debug, Clone)]
pub struct MomLoss {
    /// `Σ_p λ_p ε_p`.
    pub total: Var,
    /// Unweighted discrepancy `ε_p` for p = 1..=max_order, averaged over
    /// populations.
    pub per_order: Vec<Var>,
}

/// `Σ_t w(t)·(M(t) − T(t))²` for one order and population.
fn order_discrepancy<T: Scalar>(
    g: &mut Graph<T>,
    table: &OrderTable<T>,
    pop: &Population,
) -> Result<Var> {
    let samples = if table.order == 1 {
        pop.first
    } else {
        pop.centered
    };
    let m = sample_moments(g, samples, pop.weights, table.order)?;
    let target = g.constant(table.target.clone());
    let weight = g.constant(table.weight.clone());
    let diff = g.sub(m, target)?;
    let sq = g.powi(diff, 2)?;
    let weighted = g.mul(sq, weight)?;
    Ok(g.sum_all(weighted)?)
}

/// Weighted L2 distance between sample and standard-normal moments of `z`,
/// summed over orders 1..=spec.max_order.
pub fn mom_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    spec: &MomentSpec,
    tables: &MomentTables<T>,
    head: Option<&HeadVars>,
) -> Result<MomLoss> {
    spec.validate()?;
    if !spec.enabled() {
        return Err(MomentError::Disabled);
    }
    if tables.max_order() < spec.max_order {
        return Err(MomentError::OrderTooHigh(spec.max_order));
    }
    let width = g.shape(z).get(1).copied().unwrap_or(0);
    if width != tables.dim {
        return Err(MomentError::DimensionMismatch {
            tables: tables.dim,
            samples: width,
        });
    }
    let pops = centralize(g, z, spec.centering, head)?;
    let inv_pops = T::one() / T::lit(pops.len() as f64);

    let mut per_order = Vec::with_capacity(spec.max_order);
    let mut total: Option<Var> = None;
    for table in &tables.orders[..spec.max_order] {
        let mut acc: Option<Var> = None;
        for pop in &pops {
            let e = order_discrepancy(g, table, pop)?;
            acc = Some(match acc {
                Some(a) => g.add(a, e)?,
                None => e,
            });
        }
        let eps = g.scale(acc.expect("at least one population"), inv_pops)?;
        per_order.push(eps);
        let term = g.scale(eps, T::lit(spec.weight(table.order)))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(MomLoss {
        total: total.expect("max_order ≥ 1"),
        per_order,
    })
}

/// Global-mode moment loss of `z` with the default order weights.
pub fn global_loss_value(z: &Tensor<f64>, max_order: usize) -> Result<f64> {
    let spec = MomentSpec::new(max_order, Centering::Global);
    let tables = MomentTables::new(z.cols(), max_order)?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let loss = mom_loss(&mut g, zv, &spec, &tables, None)?;
    Ok(g.value(loss.total).data()[0])
}

/// Draws an `n × dim` standard-normal sample.
pub fn standard_normal_sample(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data).expect("sized")
}

/// Distribution of the global-mode loss over repeated standard-normal samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloBound {
    pub losses: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// `mean + 4·sd`.
    pub bound: f64,
}

impl MonteCarloBound {
    pub fn median(&self) -> f64 {
        let mut v = self.losses.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }
}

pub fn monte_carlo_bound(
    dim: usize,
    max_order: usize,
    n: usize,
    repeats: usize,
    seed: u64,
) -> Result<MonteCarloBound> {
    if repeats < 2 || n == 0 {
        return Err(MomentError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses = (0..repeats)
        .map(|_| global_loss_value(&standard_normal_sample(n, dim, &mut rng), max_order))
        .collect::<Result<Vec<_>>>()?;
    let r = repeats as f64;
    let mean = losses.iter().sum::<f64>() / r;
    let sd = (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (r - 1.0)).sqrt();
    Ok(MonteCarloBound {
        losses,
        mean,
        sd,
        bound: mean + 4.0 * sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperdiag_examples() {
        assert_eq!(hyperdiag_count(&[3, 3]), 1);
        assert_eq!(hyperdiag_count(&[1, 2]), 0);
        assert_eq!(hyperdiag_count(&[4, 4, 4, 4]), 3);
        assert_eq!(hyperdiag_count(&[0, 0, 1, 2]), 1);
    }

    #[test]
    fn stirling_small_values() {
        assert_eq!(stirling2(4, 2), 7);
        assert_eq!(stirling2(4, 4), 1);
        assert_eq!(stirling2(3, 1), 1);
        assert_eq!(stirling2(0, 0), 1);
    }

    #[test]
    fn class_sizes() {
        assert_eq!(class_size(2, 8, 1), 8);
        assert_eq!(class_size(2, 8, 0), 56);
        assert_eq!(class_size(3, 8, 2), 8);
        assert_eq!(class_size(3, 8, 1), 168);
        assert_eq!(class_size(3, 8, 0), 336);
        // m > D gives an empty class.
        assert_eq!(class_size(4, 2, 0), 0);
        assert_eq!((0..4).map(|h| class_size(4, 2, h)).sum::<u64>(), 16);
    }

    #[test]
    fn double_factorials() {
        assert_eq!(double_factorial(-1), 1);
        assert_eq!(double_factorial(0), 1);
        assert_eq!(double_factorial(3), 3);
        assert_eq!(double_factorial(5), 15);
    }

    #[test]
    fn targets() {
        assert_eq!(target_moment(&[2, 2]), 1.0);
        assert_eq!(target_moment(&[1, 2]), 0.0);
        assert_eq!(target_moment(&[0, 0, 0, 0]), 3.0);
        assert_eq!(target_moment(&[0, 1, 0, 1]), 1.0);
        assert_eq!(target_moment(&[0, 0, 0, 1]), 0.0);
        assert_eq!(target_moment(&[5]), 0.0);
    }

    #[test]
    fn table_element_counts() {
        let t = MomentTables::<f64>::new(8, 4).unwrap();
        let counts: Vec<usize> = t.orders.iter().map(|o| o.target.len()).collect();
        assert_eq!(counts, vec![8, 64, 512, 4096]);
        assert!(MomentTables::<f64>::new(3, 5).is_err());
    }

    #[test]
    fn second_order_moment_by_hand() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]));
        let m = sample_moments(&mut g, z, None, 2).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.0, 0.0, 0.0]);
        let e = g.constant(Tensor::zeros(&[0, 2]));
        assert_eq!(
            sample_moments(&mut g, e, None, 1),
            Err(MomentError::EmptySample)
        );
    }

    #[test]
    fn global_centering_zeroes_the_mean() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[
            vec![1.0, 5.0],
            vec![2.0, -1.0],
            vec![4.5, 0.25],
        ]));
        let pops = centralize(&mut g, z, Centering::Global, None).unwrap();
        let m = sample_moments(&mut g, pops[0].centered, None, 1).unwrap();
        for &v in g.value(m).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn per_cluster_needs_a_gaussian_head() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(
            centralize(&mut g, z, Centering::PerCluster, None).unwrap_err(),
            MomentError::NeedsGenerativeHead
        );
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let head = HeadVars::Linear { weight: w, bias: b };
        assert_eq!(
            centralize(&mut g, z, Centering::PerCluster, Some(&head)).unwrap_err(),
            MomentError::NeedsGenerativeHead
        );
    }

    #[test]
    fn single_cluster_reduces_to_standardization() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[vec![3.0, 1.0], vec![-1.0, 2.0]]));
        let centers = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let log_var = g.constant(Tensor::from_rows(&[vec![4f64.ln(), 0.0]]));
        let head = HeadVars::Aagmm { centers, log_var };
        let pops = centralize(&mut g, z, Centering::PerCluster, Some(&head)).unwrap();
        assert_eq!(pops.len(), 1);
        let zc = g.value(pops[0].centered).data().to_vec();
        let expected = [1.0, 0.0, -1.0, 1.0];
        for (a, b) in zc.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.value(pops[0].weights.unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_sample_scores_one_on_second_order() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::full(&[10, 3], 0.75));
        let tables = MomentTables::new(3, 2).unwrap();
        let mut spec = MomentSpec::new(2, Centering::Global);
        spec.weights = [1.0; 4];
        let loss = mom_loss(&mut g, z, &spec, &tables, None).unwrap();
        let second = g.value(loss.per_order[1]).item().unwrap();
        assert!((second - 1.0).abs() < 1e-12);
        // first order sees the raw mean 0.75 on each of 3 axes, weight 1/3.
        let first = g.value(loss.per_order[0]).item().unwrap();
        assert!((first - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn disabled_spec_is_rejected() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let tables = MomentTables::new(2, 1).unwrap();
        let spec = MomentSpec::new(0, Centering::Global);
        assert_eq!(
            mom_loss(&mut g, z, &spec, &tables, None).unwrap_err(),
            MomentError::Disabled
        );
    }

    #[test]
    fn spec_validation() {
        let mut spec = MomentSpec::new(5, Centering::Global);
        assert_eq!(spec.validate(), Err(MomentError::OrderTooHigh(5)));
        spec.max_order = 2;
        spec.weights[1] = -0.1;
        assert_eq!(spec.validate(), Err(MomentError::NegativeWeight));
    }
}
