//! Deterministic synthetic datasets with labeled/unlabeled/test splits,
//! tabular weak/strong augmentations and injected far-field outliers.
//!
//! Every generator draws class-conditional points in a 2-D plane and lifts
//! them to the ambient dimension through a seeded random affine map followed
//! by a coordinatewise `tanh`, so the ambient distribution is not Gaussian.
//! Features are then standardized over the inliers, so zeroing a coordinate
//! in the strong view replaces it with its mean.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

/// Weak augmentation noise as a fraction of the per-feature scale.
pub const WEAK_NOISE: f64 = 0.05;
/// Strong augmentation noise as a fraction of the per-feature scale.
pub const STRONG_NOISE: f64 = 0.15;
/// Probability of zeroing each coordinate in the strong view.
pub const STRONG_DROPOUT: f64 = 0.25;
/// Range of the per-coordinate multiplicative jitter in the strong view.
pub const STRONG_JITTER: (f64, f64) = (0.9, 1.1);
/// Half-width of the outlier box relative to the largest inlier coordinate.
pub const OUTLIER_BOX_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GeneratorKind {
    #[default]
    WarpedMixture,
    TwoMoons,
    Rings,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::WarpedMixture => "warped-mixture",
            GeneratorKind::TwoMoons => "two-moons",
            GeneratorKind::Rings => "rings",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "warped-mixture" => Ok(GeneratorKind::WarpedMixture),
            "two-moons" => Ok(GeneratorKind::TwoMoons),
            "rings" => Ok(GeneratorKind::Rings),
            other => Err(format!(
                "unknown generator `{other}` (expected warped-mixture, two-moons or rings)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    pub classes: usize,
    pub ambient: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub labels_per_class: usize,
    /// Standard deviation of the in-plane class noise.
    pub noise: f64,
    /// Extra latent directions carrying class-independent Gaussian noise.
    pub nuisance_dims: usize,
    pub nuisance_scale: f64,
    /// Gain applied before the tanh warp; larger values bend the lifted
    /// manifold more strongly.
    pub warp: f64,
    /// Fraction of the unlabeled split replaced by far-field outliers.
    pub outlier_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::WarpedMixture,
            classes: 8,
            ambient: 16,
            n_unlabeled: 8000,
            n_test: 2000,
            labels_per_class: 4,
            noise: 0.08,
            nuisance_dims: 6,
            nuisance_scale: 0.3,
            warp: 0.8,
            outlier_frac: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.kind == GeneratorKind::TwoMoons && self.classes != 2 {
            return bad("two-moons has exactly two classes");
        }
        if self.ambient < 2 {
            return bad("ambient dimension must be at least 2");
        }
        if self.labels_per_class == 0 {
            return bad("labels per class must be positive");
        }
        if self.labels_per_class * self.classes > self.n_unlabeled {
            return bad("labeled budget exceeds the unlabeled population");
        }
        if !(0.0..0.5).contains(&self.outlier_frac) {
            return bad("outlier fraction must lie in [0, 0.5)");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be a finite non-negative number");
        }
        if !(self.warp > 0.0) || !self.warp.is_finite() {
            return bad("warp gain must be positive");
        }
        if !(self.nuisance_scale >= 0.0) || !self.nuisance_scale.is_finite() {
            return bad("nuisance scale must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_frac * self.n_unlabeled as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Ground-truth outlier flags (only ever set on the unlabeled split).
    pub outlier: Vec<bool>,
    pub classes: usize,
    /// Ambient images of the class centers, when known.
    pub centers: Option<Tensor<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ambient(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Features and labels of one split, in dataset order.
    pub fn subset(&self, split: Split) -> (Tensor<f64>, Vec<usize>) {
        let idx = self.indices(split);
        let x = self.features.gather_rows(&idx).expect("indices in range");
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn outlier_flags(&self, split: Split) -> Vec<bool> {
        self.indices(split)
            .into_iter()
            .map(|i| self.outlier[i])
            .collect()
    }

    /// Per-feature standard deviation over the labeled and unlabeled splits.
    pub fn feature_scale(&self) -> Vec<f64> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.splits[i] != Split::Test)
            .collect();
        let a = self.ambient();
        let n = idx.len().max(1) as f64;
        let mut mean = vec![0.0; a];
        for &i in &idx {
            for (m, &x) in mean.iter_mut().zip(self.features.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; a];
        for &i in &idx {
            for ((v, &x), &m) in var.iter_mut().zip(self.features.row(i)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// Writes `f0..f{a-1},label,split,outlier` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.ambient()).map(|j| format!("f{j}")).collect();
        header.extend(["label", "split", "outlier"].map(String::from));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|x| format!("{x}"))
                .collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.splits[i].to_string());
            rec.push(u8::from(self.outlier[i]).to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let a = header
            .len()
            .checked_sub(3)
            .filter(|&a| a > 0)
            .ok_or_else(|| {
                DatasetError::Format(
                    "expected feature columns followed by label,split,outlier".into(),
                )
            })?;
        if &header[a] != "label" || &header[a + 1] != "split" || &header[a + 2] != "outlier" {
            return Err(DatasetError::Format(
                "trailing columns must be label,split,outlier".into(),
            ));
        }
        let (mut data, mut labels, mut splits, mut outlier) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| DatasetError::Format(format!("row {}: bad {what}", line + 1));
            for j in 0..a {
                data.push(rec[j].parse::<f64>().map_err(|_| bad("feature"))?);
            }
            labels.push(rec[a].parse::<usize>().map_err(|_| bad("label"))?);
            splits.push(rec[a + 1].parse::<Split>().map_err(|_| bad("split"))?);
            outlier.push(match &rec[a + 2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("outlier flag")),
            });
        }
        let n = labels.len();
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            features: Tensor::new(vec![n, a], data)
                .map_err(|e| DatasetError::Format(e.to_string()))?,
            labels,
            splits,
            outlier,
            classes,
            centers: None,
        })
    }
}

/// Fixed seeded lift from the plane (plus nuisance directions) to the
/// ambient space.
struct Lift {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    gain: f64,
}

impl Lift {
    fn new(ambient: usize, latent: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let norm = (2.0 / latent as f64).sqrt();
        let weight = (0..ambient)
            .map(|_| (0..latent).map(|_| norm * gaussian(rng)).collect())
            .collect();
        let bias = (0..ambient).map(|_| 0.1 * gaussian(rng)).collect();
        Self { weight, bias, gain }
    }

    fn apply(&self, p: [f64; 2], extra: &[f64], out: &mut Vec<f64>) {
        for (w, b) in self.weight.iter().zip(&self.bias) {
            let mut u = w[0] * p[0] + w[1] * p[1] + b;
            for (wi, e) in w[2..].iter().zip(extra) {
                u += wi * e;
            }
            out.push((self.gain * u).tanh());
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class center in the plane (before noise).
fn plane_center(kind: GeneratorKind, classes: usize, class: usize) -> [f64; 2] {
    match kind {
        GeneratorKind::WarpedMixture => {
            let t = std::f64::consts::TAU * class as f64 / classes as f64;
            [t.cos(), t.sin()]
        }
        GeneratorKind::TwoMoons => {
            if class == 0 {
                [0.0, 0.5]
            } else {
                [1.0, -0.25]
            }
        }
        GeneratorKind::Rings => [0.0, 0.0],
    }
}

fn plane_point(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let s = spec.noise;
    match spec.kind {
        GeneratorKind::WarpedMixture => {
            let c = plane_center(spec.kind, spec.classes, class);
            [c[0] + s * gaussian(rng), c[1] + s * gaussian(rng)]
        }
        GeneratorKind::TwoMoons => {
            let t = std::f64::consts::PI * rng.random::<f64>();
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            [x + s * gaussian(rng), y + s * gaussian(rng)]
        }
        GeneratorKind::Rings => {
            let t = std::f64::consts::TAU * rng.random::<f64>();
            let r = (class + 1) as f64 / spec.classes as f64 + s * gaussian(rng);
            [r * t.cos(), r * t.sin()]
        }
    }
}

/// Generates the dataset described by `spec`; identical specs give identical data.
///
/// Rows are ordered labeled, unlabeled, test. The labeled split holds exactly
/// `labels_per_class` samples of every class; the first
/// `round(outlier_frac · n_unlabeled)` unlabeled draws are replaced by points
/// uniform over a box five times the inlier coordinate range.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lift = Lift::new(spec.ambient, 2 + spec.nuisance_dims, spec.warp, &mut rng);
    let mut extra = vec![0.0; spec.nuisance_dims];
    let mut point = |c: usize, rng: &mut ChaCha8Rng, data: &mut Vec<f64>| {
        let p = plane_point(spec, c, rng);
        for e in extra.iter_mut() {
            *e = spec.nuisance_scale * gaussian(rng);
        }
        lift.apply(p, &extra, data);
    };
    let k = spec.classes;

    let total = k * spec.labels_per_class + spec.n_unlabeled + spec.n_test;
    let mut data = Vec::with_capacity(total * spec.ambient);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);

    for c in 0..k {
        for _ in 0..spec.labels_per_class {
            point(c, &mut rng, &mut data);
            labels.push(c);
            splits.push(Split::Labeled);
        }
    }
    for (n, split) in [
        (spec.n_unlabeled, Split::Unlabeled),
        (spec.n_test, Split::Test),
    ] {
        for _ in 0..n {
            let c = rng.random_range(0..k);
            point(c, &mut rng, &mut data);
            labels.push(c);
            splits.push(split);
        }
    }

    let mut centers = Vec::with_capacity(k * spec.ambient);
    for c in 0..k {
        lift.apply(plane_center(spec.kind, k, c), &[], &mut centers);
    }
    standardize(&mut data, &mut centers, spec.ambient);
    let centers = Tensor::new(vec![k, spec.ambient], centers).expect("sized");

    let mut outlier = vec![false; total];
    let n_out = spec.outlier_count();
    if n_out > 0 {
        let radius = data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let half = OUTLIER_BOX_FACTOR * radius;
        let start = k * spec.labels_per_class;
        let a = spec.ambient;
        for i in start..start + n_out {
            let row = &mut data[i * a..(i + 1) * a];
            for x in row.iter_mut() {
                *x = rng.random_range(-half..half);
            }
            labels[i] = nearest_center(row, &centers);
            outlier[i] = true;
        }
    }

    Ok(Dataset {
        features: Tensor::new(vec![total, spec.ambient], data).expect("sized"),
        labels,
        splits,
        outlier,
        classes: k,
        centers: Some(centers),
    })
}

/// Shifts and scales every feature to zero mean and unit variance over the
/// generated inliers, applying the same map to the class centers.
fn standardize(data: &mut [f64], centers: &mut [f64], a: usize) {
    let n = (data.len() / a).max(1) as f64;
    let mut mean = vec![0.0; a];
    let mut var = vec![0.0; a];
    for row in data.chunks(a) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    for row in data.chunks(a) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let inv: Vec<f64> = var
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    for row in data.chunks_mut(a).chain(centers.chunks_mut(a)) {
        for ((x, m), s) in row.iter_mut().zip(&mean).zip(&inv) {
            *x = (*x - m) * s;
        }
    }
}

fn nearest_center(x: &[f64], centers: &Tensor<f64>) -> usize {
    (0..centers.rows())
        .map(|c| {
            let d: f64 = x
                .iter()
                .zip(centers.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (c, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(c, _)| c)
}

/// Additive Gaussian noise with per-feature standard deviation `sigma·scale_j`.
pub fn augment_weak<R: Rng>(
    x: &Tensor<f64>,
    scale: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Tensor<f64> {
    let a = x.cols();
    let mut out = x.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sigma * scale[j % a] * e;
    }
    out
}

/// Gaussian noise, then coordinate dropout, then multiplicative jitter.
pub fn augment_strong<R: Rng>(x: &Tensor<f64>, scale: &[f64], rng: &mut R) -> Tensor<f64> {
    let a = x.cols();
    let (lo, hi) = STRONG_JITTER;
    let mut out = x.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let e: f64 = StandardNormal.sample(rng);
        *v += STRONG_NOISE * scale[j % a] * e;
        if rng.random::<f64>() < STRONG_DROPOUT {
            *v = 0.0;
        }
        *v *= rng.random_range(lo..=hi);
    }
    out
}

/// Seeded weak view at the default noise level.
pub fn weak_view(x: &Tensor<f64>, scale: &[f64], seed: u64) -> Tensor<f64> {
    augment_weak(x, scale, WEAK_NOISE, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seeded strong view.
pub fn strong_view(x: &Tensor<f64>, scale: &[f64], seed: u64) -> Tensor<f64> {
    augment_strong(x, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}
