//! Evaluation quantities and the per-evaluation metrics table.

use std::io::{Read, Write};

use thiserror::Error;

use crate::autodiff::Graph;
use crate::moments::{mom_loss, Centering, MomentError, MomentSpec, MomentTables, MAX_ORDER};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} of an empty set")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("assignment {index} out of range for {classes} centers")]
    BadAssignment { index: usize, classes: usize },
    #[error("rows must have strictly increasing steps ({prev} then {next})")]
    StepOrder { prev: usize, next: usize },
    #[error("non-finite value in column `{0}`")]
    NonFinite(&'static str),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(p: &Tensor<f64>) -> Vec<usize> {
    (0..p.rows())
        .map(|i| {
            let row = p.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty("accuracy"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy restricted to each true class; `NaN` for classes with no samples.
pub fn per_class_accuracy(predicted: &[usize], truth: &[usize], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t < classes {
            seen[t] += 1;
            hit[t] += usize::from(p == t);
        }
    }
    hit.iter()
        .zip(&seen)
        .map(|(&h, &s)| {
            if s == 0 {
                f64::NAN
            } else {
                h as f64 / s as f64
            }
        })
        .collect()
}

/// Mean L2 distance from each row of `z` to its assigned center.
pub fn compactness(z: &Tensor<f64>, assignments: &[usize], centers: &Tensor<f64>) -> Result<f64> {
    if z.rows() != assignments.len() {
        return Err(MetricsError::LengthMismatch(z.rows(), assignments.len()));
    }
    if assignments.is_empty() {
        return Err(MetricsError::Empty("compactness"));
    }
    let k = centers.rows();
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(MetricsError::BadAssignment {
                index: a,
                classes: k,
            });
        }
        let d2: f64 = z
            .row(i)
            .iter()
            .zip(centers.row(a))
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / assignments.len() as f64)
}

/// Centroid of the rows assigned to each class (zero for empty classes).
pub fn empirical_centers(z: &Tensor<f64>, assignments: &[usize], classes: usize) -> Tensor<f64> {
    let d = z.cols();
    let mut sums = Tensor::zeros(&[classes, d]);
    let mut counts = vec![0usize; classes];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        let row = &mut sums.data_mut()[a * d..(a + 1) * d];
        for (s, &x) in row.iter_mut().zip(z.row(i)) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in &mut sums.data_mut()[c * d..(c + 1) * d] {
                *s /= n as f64;
            }
        }
    }
    sums
}

/// Global-mode moment discrepancies of a fixed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    /// Unweighted `ε_p` for p = 1..=max_order.
    pub per_order: Vec<f64>,
    /// `λ_p ε_p`; these sum to `total`.
    pub weighted: Vec<f64>,
    pub total: f64,
}

/// Evaluates the global-mode moment loss of `z` without keeping gradients.
pub fn moment_report(
    z: &Tensor<f64>,
    max_order: usize,
    weights: [f64; MAX_ORDER],
) -> Result<MomentReport> {
    let spec = MomentSpec {
        max_order,
        weights,
        centering: Centering::Global,
    };
    let tables = MomentTables::new(z.cols(), max_order)?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let loss = mom_loss(&mut g, zv, &spec, &tables, None)?;
    let per_order: Vec<f64> = loss
        .per_order
        .iter()
        .map(|&v| g.value(v).data()[0])
        .collect();
    let weighted = per_order
        .iter()
        .enumerate()
        .map(|(i, e)| spec.weight(i + 1) * e)
        .collect();
    Ok(MomentReport {
        per_order,
        weighted,
        total: g.value(loss.total).data()[0],
    })
}

/// Precision and recall of predicted outlier flags; both are 1 when the
/// respective denominator is empty.
pub fn outlier_pr(truth: &[bool], predicted: &[bool]) -> Result<(f64, f64)> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
    }
    let tp = truth
        .iter()
        .zip(predicted)
        .filter(|&(&t, &p)| t && p)
        .count();
    let n_pred = predicted.iter().filter(|&&p| p).count();
    let n_true = truth.iter().filter(|&&t| t).count();
    let precision = if n_pred == 0 {
        1.0
    } else {
        tp as f64 / n_pred as f64
    };
    let recall = if n_true == 0 {
        1.0
    } else {
        tp as f64 / n_true as f64
    };
    Ok((precision, recall))
}

/// Kept fraction and accuracy of the kept pseudo-labels (1 when none kept).
pub fn pseudo_quality(kept: &[bool], pseudo: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    if kept.len() != pseudo.len() {
        return Err(MetricsError::LengthMismatch(kept.len(), pseudo.len()));
    }
    if kept.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(kept.len(), truth.len()));
    }
    let n_kept = kept.iter().filter(|&&k| k).count();
    if n_kept == 0 {
        return Ok((0.0, 1.0));
    }
    let correct = (0..kept.len())
        .filter(|&i| kept[i] && pseudo[i] == truth[i])
        .count();
    Ok((
        n_kept as f64 / kept.len() as f64,
        correct as f64 / n_kept as f64,
    ))
}

pub const CSV_HEADER: [&str; 14] = [
    "step",
    "loss_sup",
    "loss_unsup",
    "loss_mom_total",
    "loss_mom_p1",
    "loss_mom_p2",
    "loss_mom_p3",
    "loss_mom_p4",
    "pseudo_rate",
    "pseudo_acc",
    "outlier_tau",
    "outlier_rate",
    "test_acc",
    "compactness",
];

/// One evaluation row. Loss columns are means over the steps since the
/// previous row; the unsupervised and moment columns already carry their
/// loss weights, so `loss_sup + loss_unsup + loss_mom_total` is the
/// optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_mom_total: f64,
    pub loss_mom: [f64; MAX_ORDER],
    pub pseudo_rate: f64,
    pub pseudo_acc: f64,
    pub outlier_tau: f64,
    pub outlier_rate: f64,
    pub test_acc: f64,
    pub compactness: f64,
}

impl MetricsRow {
    fn values(&self) -> [(&'static str, f64); 13] {
        [
            ("loss_sup", self.loss_sup),
            ("loss_unsup", self.loss_unsup),
            ("loss_mom_total", self.loss_mom_total),
            ("loss_mom_p1", self.loss_mom[0]),
            ("loss_mom_p2", self.loss_mom[1]),
            ("loss_mom_p3", self.loss_mom[2]),
            ("loss_mom_p4", self.loss_mom[3]),
            ("pseudo_rate", self.pseudo_rate),
            ("pseudo_acc", self.pseudo_acc),
            ("outlier_tau", self.outlier_tau),
            ("outlier_rate", self.outlier_rate),
            ("test_acc", self.test_acc),
            ("compactness", self.compactness),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(MetricsError::StepOrder {
                    prev: last.step,
                    next: row.step,
                });
            }
        }
        if let Some((name, _)) = row.values().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(MetricsError::NonFinite(name));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for row in &self.rows {
            let mut rec = vec![row.step.to_string()];
            rec.extend(row.values().iter().map(|(_, v)| format!("{v}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut report = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num =
                |i: usize| -> f64 { rec.get(i).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN) };
            let row = MetricsRow {
                step: rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(0),
                loss_sup: num(1),
                loss_unsup: num(2),
                loss_mom_total: num(3),
                loss_mom: [num(4), num(5), num(6), num(7)],
                pseudo_rate: num(8),
                pseudo_acc: num(9),
                outlier_tau: num(10),
                outlier_rate: num(11),
                test_acc: num(12),
                compactness: num(13),
            };
            report.push(row)?;
        }
        Ok(report)
    }
}
