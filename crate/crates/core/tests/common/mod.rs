//! Independent oracles for the moment constraints, shared by test targets.

use std::collections::{BTreeMap, HashSet};

use genhead::moments::{MomentSpec, MIN_CLUSTER_MASS};
use genhead::Tensor;

pub fn all_tuples(p: usize, d: usize) -> Vec<Vec<usize>> {
    (0..d.pow(p as u32))
        .map(|mut flat| {
            let mut t = vec![0; p];
            for slot in t.iter_mut().rev() {
                *slot = flat % d;
                flat /= d;
            }
            t
        })
        .collect()
}

pub fn distinct(t: &[usize]) -> usize {
    t.iter().collect::<HashSet<_>>().len()
}

/// `E[Z^m]` for a unit Gaussian by Simpson's rule on [-12, 12].
pub fn gaussian_moment(m: usize) -> f64 {
    let n = 6000;
    let (a, b) = (-12.0f64, 12.0f64);
    let h = (b - a) / n as f64;
    let f = |x: f64| x.powi(m as i32) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn quadrature_target(t: &[usize]) -> f64 {
    let mut mult = BTreeMap::new();
    for &i in t {
        *mult.entry(i).or_insert(0usize) += 1;
    }
    mult.values().map(|&m| gaussian_moment(m)).product()
}

/// Discrepancy of one population by explicit loops over samples and tuples.
pub fn population_error(first: &[Vec<f64>], centered: &[Vec<f64>], w: &[f64], p: usize) -> f64 {
    let d = first[0].len();
    let mass: f64 = w.iter().sum();
    let samples = if p == 1 { first } else { centered };
    let tuples = all_tuples(p, d);
    let mut sizes = vec![0usize; p];
    for t in &tuples {
        sizes[p - distinct(t)] += 1;
    }
    let mut err = 0.0;
    for t in &tuples {
        let mut m = 0.0;
        for (row, &wi) in samples.iter().zip(w) {
            m += wi * t.iter().map(|&j| row[j]).product::<f64>();
        }
        m /= mass;
        let diff = m - quadrature_target(t).round();
        err += diff * diff / sizes[p - distinct(t)] as f64;
    }
    err
}

pub fn rows(z: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..z.rows()).map(|i| z.row(i).to_vec()).collect()
}

pub fn oracle_global(z: &Tensor<f64>, spec: &MomentSpec) -> f64 {
    let raw = rows(z);
    let n = raw.len() as f64;
    let d = z.cols();
    let mean: Vec<f64> = (0..d)
        .map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let centered: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let w = vec![1.0; raw.len()];
    (1..=spec.max_order)
        .map(|p| spec.weight(p) * population_error(&raw, &centered, &w, p))
        .sum()
}

pub fn oracle_per_cluster(
    z: &Tensor<f64>,
    centers: &Tensor<f64>,
    log_var: &Tensor<f64>,
    spec: &MomentSpec,
) -> f64 {
    let raw = rows(z);
    let k = centers.rows();
    let resp: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let dens: Vec<f64> = (0..k)
                .map(|c| {
                    r.iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            let v = log_var.get(&[c, j]).exp();
                            -0.5 * ((x - centers.get(&[c, j])).powi(2) / v + v.ln())
                        })
                        .sum()
                })
                .collect();
            let m = dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = dens.iter().map(|d| (d - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let mut per_order = vec![0.0; spec.max_order];
    let mut pops = 0;
    for c in 0..k {
        let w: Vec<f64> = resp.iter().map(|r| r[c]).collect();
        if w.iter().sum::<f64>() < MIN_CLUSTER_MASS {
            continue;
        }
        pops += 1;
        let zc: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, &x)| (x - centers.get(&[c, j])) / log_var.get(&[c, j]).exp().sqrt())
                    .collect()
            })
            .collect();
        for p in 1..=spec.max_order {
            per_order[p - 1] += population_error(&zc, &zc, &w, p);
        }
    }
    per_order
        .iter()
        .enumerate()
        .map(|(i, e)| spec.weight(i + 1) * e / pops as f64)
        .sum()
}
