//! Mahalanobis outlier gate over the latent space.
//!
//! A sample's score aggregates its Mahalanobis distances to every cluster
//! (max or min over clusters). The threshold `τ` is the nearest-rank
//! percentile of the labeled population's scores; an unlabeled sample is
//! excluded when its score is strictly greater than `τ`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::heads::Head;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OutlierError {
    #[error("variances must be strictly positive")]
    NonPositiveVariance,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("the gate needs a Gaussian head")]
    NotGenerative,
    #[error("cannot fit a threshold on an empty labeled set")]
    EmptyLabeledSet,
    #[error("the gate has no fitted threshold yet")]
    Unfitted,
    #[error("percentile must lie in (0, 100], got {0}")]
    BadPercentile(f64),
}

pub type Result<T, E = OutlierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    /// Farthest cluster, as the outlier rule is usually written.
    #[default]
    Max,
    /// Nearest cluster: far from every center.
    Min,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Max => "max",
            Aggregation::Min => "min",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(Aggregation::Max),
            "min" => Ok(Aggregation::Min),
            other => Err(format!(
                "unknown aggregation `{other}` (expected max or min)"
            )),
        }
    }
}

/// `sqrt(Σ_d (z_d − μ_d)² / σ²_d)`.
pub fn mahalanobis<T: Scalar>(z: &[T], mu: &[T], var: &[T]) -> Result<T> {
    if z.len() != mu.len() {
        return Err(OutlierError::LengthMismatch(z.len(), mu.len()));
    }
    if var.len() != mu.len() {
        return Err(OutlierError::LengthMismatch(var.len(), mu.len()));
    }
    let mut acc = T::zero();
    for ((&zi, &mi), &vi) in z.iter().zip(mu).zip(var) {
        if !(vi > T::zero()) {
            return Err(OutlierError::NonPositiveVariance);
        }
        let d = zi - mi;
        acc += d * d / vi;
    }
    Ok(acc.sqrt())
}

/// Nearest-rank percentile: the value at rank `⌈q/100 · n⌉` of the sorted sample.
pub fn nearest_rank_percentile<T: Scalar>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() || !(q > 0.0 && q <= 100.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    // Small epsilon keeps exact products like 0.9·10 from rounding up to 10.
    let rank = ((q / 100.0) * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Some(sorted[rank - 1])
}

/// Cluster geometry the gate scores against.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGeometry<T: Scalar = f64> {
    pub centers: Tensor<T>,
    pub variances: Tensor<T>,
}

impl<T: Scalar> ClusterGeometry<T> {
    pub fn from_head(head: &Head<T>) -> Result<Self> {
        match (head.centers(), head.variances()) {
            (Some(c), Some(v)) => Ok(Self {
                centers: c.clone(),
                variances: v,
            }),
            _ => Err(OutlierError::NotGenerative),
        }
    }

    pub fn distances(&self, z: &[T]) -> Result<Vec<T>> {
        (0..self.centers.rows())
            .map(|k| mahalanobis(z, self.centers.row(k), self.variances.row(k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierGate<T: Scalar = f64> {
    /// Percentile level in (0, 100].
    pub percentile: f64,
    pub aggregation: Aggregation,
    /// Steps between threshold refits.
    pub refresh: usize,
    tau: Option<T>,
}

impl<T: Scalar> Default for OutlierGate<T> {
    fn default() -> Self {
        Self {
            percentile: 90.0,
            aggregation: Aggregation::Max,
            refresh: 50,
            tau: None,
        }
    }
}

impl<T: Scalar> OutlierGate<T> {
    pub fn new(percentile: f64, aggregation: Aggregation, refresh: usize) -> Result<Self> {
        if !(percentile > 0.0 && percentile <= 100.0) {
            return Err(OutlierError::BadPercentile(percentile));
        }
        Ok(Self {
            percentile,
            aggregation,
            refresh,
            tau: None,
        })
    }

    pub fn threshold(&self) -> Option<T> {
        self.tau
    }

    pub fn is_fitted(&self) -> bool {
        self.tau.is_some()
    }

    /// Aggregated Mahalanobis score of one latent point.
    pub fn score(&self, geometry: &ClusterGeometry<T>, z: &[T]) -> Result<T> {
        let d = geometry.distances(z)?;
        let init = match self.aggregation {
            Aggregation::Max => T::neg_infinity(),
            Aggregation::Min => T::infinity(),
        };
        Ok(d.into_iter().fold(init, |acc, x| match self.aggregation {
            Aggregation::Max => acc.max(x),
            Aggregation::Min => acc.min(x),
        }))
    }

    pub fn scores(&self, geometry: &ClusterGeometry<T>, z: &Tensor<T>) -> Result<Vec<T>> {
        (0..z.rows())
            .map(|i| self.score(geometry, z.row(i)))
            .collect()
    }

    /// Fits `τ` as the configured percentile of the labeled scores.
    pub fn fit_threshold(
        &mut self,
        geometry: &ClusterGeometry<T>,
        labeled: &Tensor<T>,
    ) -> Result<T> {
        if labeled.rows() == 0 || labeled.is_empty() {
            return Err(OutlierError::EmptyLabeledSet);
        }
        let scores = self.scores(geometry, labeled)?;
        let tau = nearest_rank_percentile(&scores, self.percentile)
            .ok_or(OutlierError::BadPercentile(self.percentile))?;
        self.tau = Some(tau);
        Ok(tau)
    }

    /// `true` keeps the sample: its score does not exceed `τ`.
    pub fn mask(&self, geometry: &ClusterGeometry<T>, z: &Tensor<T>) -> Result<Vec<bool>> {
        let tau = self.tau.ok_or(OutlierError::Unfitted)?;
        Ok(self
            .scores(geometry, z)?
            .into_iter()
            .map(|s| s <= tau)
            .collect())
    }

    pub fn reset(&mut self) {
        self.tau = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(centers: &[Vec<f64>], variances: &[Vec<f64>]) -> ClusterGeometry<f64> {
        ClusterGeometry {
            centers: Tensor::from_rows(centers),
            variances: Tensor::from_rows(variances),
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let d: f64 = mahalanobis(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - 5.0).abs() < 1e-15);
        let d: f64 = mahalanobis(&[2.0, 1.0], &[0.0, 0.0], &[4.0, 1.0]).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mahalanobis(&[1.0], &[1.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(
            mahalanobis(&[1.0], &[1.0], &[0.0]),
            Err(OutlierError::NonPositiveVariance)
        );
    }

    #[test]
    fn score_aggregation() {
        let geo = geometry(&[vec![1.0], vec![5.0]], &[vec![1.0], vec![1.0]]);
        let z = [0.0];
        let max = OutlierGate::new(90.0, Aggregation::Max, 50).unwrap();
        let min = OutlierGate::new(90.0, Aggregation::Min, 50).unwrap();
        assert_eq!(max.score(&geo, &z).unwrap(), 5.0);
        assert_eq!(min.score(&geo, &z).unwrap(), 1.0);

        let single = geometry(&[vec![2.0]], &[vec![1.0]]);
        assert_eq!(
            max.score(&single, &z).unwrap(),
            min.score(&single, &z).unwrap()
        );
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&v, 90.0), Some(9.0));
        assert_eq!(nearest_rank_percentile(&v, 100.0), Some(10.0));
        assert_eq!(nearest_rank_percentile(&v, 1.0), Some(1.0));
        assert_eq!(nearest_rank_percentile(&[2.5; 7], 90.0), Some(2.5));
        assert_eq!(nearest_rank_percentile::<f64>(&[], 90.0), None);
    }

    #[test]
    fn fit_and_mask() {
        // 1-D scores 1..10 around a single unit-variance center at 0.
        let geo = geometry(&[vec![0.0]], &[vec![1.0]]);
        let labeled = Tensor::from_rows(&(1..=10).map(|i| vec![f64::from(i)]).collect::<Vec<_>>());
        let mut gate = OutlierGate::new(90.0, Aggregation::Max, 50).unwrap();
        assert_eq!(gate.mask(&geo, &labeled), Err(OutlierError::Unfitted));
        assert_eq!(gate.fit_threshold(&geo, &labeled).unwrap(), 9.0);

        let probe = Tensor::from_rows(&[vec![5.0], vec![9.0], vec![9.5], vec![0.0]]);
        assert_eq!(
            gate.mask(&geo, &probe).unwrap(),
            vec![true, true, false, true]
        );
        assert_eq!(
            gate.fit_threshold(&geo, &Tensor::zeros(&[0, 1])),
            Err(OutlierError::EmptyLabeledSet)
        );
    }

    #[test]
    fn center_is_kept_in_min_mode() {
        let geo = geometry(
            &[vec![0.0, 0.0], vec![10.0, 0.0]],
            &[vec![1.0, 1.0], vec![2.0, 2.0]],
        );
        let mut gate = OutlierGate::new(90.0, Aggregation::Min, 50).unwrap();
        gate.fit_threshold(&geo, &Tensor::from_rows(&[vec![0.0, 0.0]]))
            .unwrap();
        assert_eq!(gate.threshold(), Some(0.0));
        let keep = gate
            .mask(&geo, &Tensor::from_rows(&[vec![10.0, 0.0]]))
            .unwrap();
        assert_eq!(keep, vec![true]);
    }

    #[test]
    fn linear_head_cannot_gate() {
        let head = crate::heads::init_head::<f64>(crate::heads::HeadKind::Linear, 2, 2, 0).unwrap();
        assert_eq!(
            ClusterGeometry::from_head(&head),
            Err(OutlierError::NotGenerative)
        );
    }

    #[test]
    fn percentile_bounds() {
        assert!(OutlierGate::<f64>::new(150.0, Aggregation::Max, 50).is_err());
        assert!(OutlierGate::<f64>::new(0.0, Aggregation::Max, 50).is_err());
    }
}
