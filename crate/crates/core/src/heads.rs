//! Final classification layers and the perceptron backbone.
//!
//! The generative heads keep one diagonal Gaussian per class. All density
//! arithmetic happens in log space: the joint `log N(z; μ_k, Σ_k)` is computed
//! directly, the prior is a log-sum-exp over clusters with uniform weights
//! `1/K`, and the conditional is the row-wise softmax of the joint.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Parameter, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Range the AAGMM variances are drawn from at initialization.
pub const INIT_VARIANCE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadError {
    #[error("latent width {got} does not match head dimension {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("a linear head has no cluster densities")]
    NotGenerative,
    #[error("sigma must be non-zero")]
    ZeroSigma,
    #[error("need at least one class and one latent dimension")]
    EmptyHead,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = HeadError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Linear,
    Kmeans,
    Aagmm,
}

impl HeadKind {
    pub fn is_generative(self) -> bool {
        !matches!(self, HeadKind::Linear)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Kmeans => "kmeans",
            HeadKind::Aagmm => "aagmm",
        })
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "kmeans" => Ok(HeadKind::Kmeans),
            "aagmm" => Ok(HeadKind::Aagmm),
            other => Err(format!(
                "unknown head kind `{other}` (expected linear, kmeans or aagmm)"
            )),
        }
    }
}

/// Axis-aligned Gaussian mixture head: one diagonal Gaussian per class.
#[derive(Debug, Clone, PartialEq)]
pub struct AagmmHead<T: Scalar = f64> {
    /// Cluster centers, `K×D`.
    pub centers: Tensor<T>,
    /// `ln σ²` per cluster and axis, `K×D`.
    pub log_var: Tensor<T>,
}

/// Gaussian head with identity covariance for every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansHead<T: Scalar = f64> {
    pub centers: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxHead<T: Scalar = f64> {
    /// `D×K`.
    pub weight: Tensor<T>,
    /// `K`.
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T: Scalar = f64> {
    Linear(LinearSoftmaxHead<T>),
    Kmeans(KmeansHead<T>),
    Aagmm(AagmmHead<T>),
}

/// Draws a freshly initialized head. Centers are i.i.d. standard normal;
/// AAGMM variances are uniform in [0.9, 1.1] and stored as logarithms.
pub fn init_head<T: Scalar>(
    kind: HeadKind,
    classes: usize,
    dim: usize,
    seed: u64,
) -> Result<Head<T>> {
    if classes == 0 || dim == 0 {
        return Err(HeadError::EmptyHead);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize, scale: f64| -> Vec<T> {
        (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                T::lit(x * scale)
            })
            .collect()
    };
    Ok(match kind {
        HeadKind::Linear => {
            let weight = normal(dim * classes, 1.0 / (dim as f64).sqrt());
            Head::Linear(LinearSoftmaxHead {
                weight: Tensor::new(vec![dim, classes], weight)?,
                bias: Tensor::zeros(&[classes]),
            })
        }
        HeadKind::Kmeans => Head::Kmeans(KmeansHead {
            centers: Tensor::new(vec![classes, dim], normal(classes * dim, 1.0))?,
        }),
        HeadKind::Aagmm => {
            let centers = Tensor::new(vec![classes, dim], normal(classes * dim, 1.0))?;
            let (lo, hi) = INIT_VARIANCE_RANGE;
            let uniform = Uniform::new_inclusive(lo, hi).expect("valid range");
            let log_var = (0..classes * dim)
                .map(|_| T::lit(uniform.sample(&mut rng).ln()))
                .collect();
            Head::Aagmm(AagmmHead {
                centers,
                log_var: Tensor::new(vec![classes, dim], log_var)?,
            })
        }
    })
}

/// `log N(z_i; μ_k, diag σ²_k)` for every sample and cluster, `[n×K]`.
///
/// `log_var = None` means unit variances (the KMeans head).
pub fn gaussian_log_joint<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    centers: Var,
    log_var: Option<Var>,
) -> Result<Var, TensorError> {
    let zs = g.shape(z).to_vec();
    let cs = g.shape(centers).to_vec();
    if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_log_joint",
            lhs: zs,
            rhs: cs,
        });
    }
    let (n, d) = (zs[0], zs[1]);
    let z3 = g.reshape(z, &[n, 1, d])?;
    let diff = g.sub(z3, centers)?;
    let mut sq = g.powi(diff, 2)?;
    if let Some(lv) = log_var {
        let neg = g.neg(lv)?;
        let precision = g.exp(neg)?;
        sq = g.mul(sq, precision)?;
    }
    let quad = g.sum(sq, &[2], false)?;
    let mut out = g.scale(quad, -T::half())?;
    if let Some(lv) = log_var {
        let logdet = g.sum(lv, &[1], false)?;
        let half = g.scale(logdet, -T::half())?;
        out = g.add(out, half)?;
    }
    let norm = -T::half() * T::lit(d as f64) * T::lit(2.0 * std::f64::consts::PI).ln();
    g.offset(out, norm)
}

/// `ln p(x)`: log-sum-exp of the joint over clusters, minus `ln K`.
pub fn log_prior_from_joint<T: Scalar>(
    g: &mut Graph<T>,
    log_joint: Var,
) -> Result<Var, TensorError> {
    let k = g.shape(log_joint)[1];
    let lse = g.logsumexp(log_joint, 1, false)?;
    g.offset(lse, -T::lit(k as f64).ln())
}

/// Head parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Linear { weight: Var, bias: Var },
    Kmeans { centers: Var },
    Aagmm { centers: Var, log_var: Var },
}

impl HeadVars {
    /// Per-class scores whose row softmax is the conditional: the log joint
    /// for the Gaussian heads, logits for the linear head.
    pub fn scores<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var, TensorError> {
        match *self {
            HeadVars::Linear { weight, bias } => {
                let zw = g.matmul(z, weight)?;
                g.add(zw, bias)
            }
            HeadVars::Kmeans { centers } => gaussian_log_joint(g, z, centers, None),
            HeadVars::Aagmm { centers, log_var } => {
                gaussian_log_joint(g, z, centers, Some(log_var))
            }
        }
    }

    pub fn centers(&self) -> Option<Var> {
        match *self {
            HeadVars::Linear { .. } => None,
            HeadVars::Kmeans { centers } | HeadVars::Aagmm { centers, .. } => Some(centers),
        }
    }

    pub fn log_var(&self) -> Option<Var> {
        match *self {
            HeadVars::Aagmm { log_var, .. } => Some(log_var),
            _ => None,
        }
    }
}

impl<T: Scalar> Head<T> {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::Kmeans(_) => HeadKind::Kmeans,
            Head::Aagmm(_) => HeadKind::Aagmm,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Linear(h) => h.bias.len(),
            Head::Kmeans(h) => h.centers.rows(),
            Head::Aagmm(h) => h.centers.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Head::Linear(h) => h.weight.rows(),
            Head::Kmeans(h) => h.centers.cols(),
            Head::Aagmm(h) => h.centers.cols(),
        }
    }

    pub fn centers(&self) -> Option<&Tensor<T>> {
        match self {
            Head::Linear(_) => None,
            Head::Kmeans(h) => Some(&h.centers),
            Head::Aagmm(h) => Some(&h.centers),
        }
    }

    /// Per-cluster diagonal variances `σ²`, `K×D` (ones for KMeans).
    pub fn variances(&self) -> Option<Tensor<T>> {
        match self {
            Head::Linear(_) => None,
            Head::Kmeans(h) => Some(Tensor::ones(h.centers.shape())),
            Head::Aagmm(h) => Some(h.log_var.map(T::exp)),
        }
    }

    /// Binds this head's tensors as constants.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> HeadVars {
        match self {
            Head::Linear(h) => HeadVars::Linear {
                weight: g.constant(h.weight.clone()),
                bias: g.constant(h.bias.clone()),
            },
            Head::Kmeans(h) => HeadVars::Kmeans {
                centers: g.constant(h.centers.clone()),
            },
            Head::Aagmm(h) => HeadVars::Aagmm {
                centers: g.constant(h.centers.clone()),
                log_var: g.constant(h.log_var.clone()),
            },
        }
    }

    fn check_width(&self, z: &Tensor<T>) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.dim() {
            return Err(HeadError::WidthMismatch {
                expected: self.dim(),
                got: if z.rank() == 2 { z.cols() } else { z.len() },
            });
        }
        Ok(())
    }

    /// `log p(Y=k, X=z_i)`, `[n×K]`.
    pub fn log_joint(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.kind().is_generative() {
            return Err(HeadError::NotGenerative);
        }
        self.check_width(z)?;
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let zv = g.constant(z.clone());
        let out = vars.scores(&mut g, zv)?;
        Ok(g.value(out).clone())
    }

    /// `log p(X=z_i)`, `[n]`.
    pub fn log_prior(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let lj = self.log_joint(z)?;
        let mut g = Graph::new();
        let v = g.constant(lj);
        let out = log_prior_from_joint(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    /// `p(Y=k | X=z_i)`, row-stochastic `[n×K]`.
    pub fn conditional(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(z)?;
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let zv = g.constant(z.clone());
        let s = vars.scores(&mut g, zv)?;
        let p = g.softmax(s, 1)?;
        Ok(g.value(p).clone())
    }
}

/// Slope and intercept such that `sigmoid(m·x + b)` equals the two-cluster
/// conditional `p(A | x)` for 1-D Gaussians with means `mu_a`, `mu_b` and
/// common standard deviation `sigma`.
///
/// The intercept is `(μ_B² − μ_A²) / (2σ²)`, which follows from the ratio of
/// the two densities.
pub fn sigmoid_equivalence_params<T: Scalar>(mu_a: T, mu_b: T, sigma: T) -> Result<(T, T)> {
    if sigma == T::zero() {
        return Err(HeadError::ZeroSigma);
    }
    let var = sigma * sigma;
    let slope = (mu_a - mu_b) / var;
    let intercept = (mu_b * mu_b - mu_a * mu_a) / (T::lit(2.0) * var);
    Ok((slope, intercept))
}

/// Perceptron mapping the ambient features to the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Scalar = f64> {
    /// `(weight [in×out], bias [out])` per layer; leaky rectifier between layers.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Backbone<T> {
    /// He-style initialization; biases start at zero.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        T::lit(x * std)
                    })
                    .collect();
                (
                    Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    Tensor::zeros(&[fan_out]),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.cols())
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let layers: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
            .collect();
        let z = embed_on_graph(&mut g, &layers, xv)?;
        Ok(g.value(z).clone())
    }
}

/// Affine layers with a leaky rectifier after every layer but the last.
pub fn embed_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[(Var, Var)],
    x: Var,
) -> Result<Var, TensorError> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let hw = g.matmul(h, w)?;
        h = g.add(hw, b)?;
        if i + 1 < layers.len() {
            h = g.leaky_relu(h)?;
        }
    }
    Ok(h)
}

/// Output of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Scalar = f64> {
    pub z: Tensor<T>,
    pub conditional: Tensor<T>,
    /// `None` for the linear head, which models no density.
    pub log_prior: Option<Tensor<T>>,
}

/// Backbone followed by head, evaluated without recording gradients.
pub fn forward<T: Scalar>(
    backbone: &Backbone<T>,
    head: &Head<T>,
    x: &Tensor<T>,
) -> Result<ForwardOutput<T>> {
    if x.rank() != 2 || x.cols() != backbone.input_dim() {
        return Err(HeadError::WidthMismatch {
            expected: backbone.input_dim(),
            got: if x.rank() == 2 { x.cols() } else { x.len() },
        });
    }
    let z = backbone.embed(x)?;
    let conditional = head.conditional(&z)?;
    let log_prior = if head.kind().is_generative() {
        Some(head.log_prior(&z)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        z,
        conditional,
        log_prior,
    })
}

/// Architecture of a backbone + head model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub ambient: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub classes: usize,
    pub head: HeadKind,
}

impl ModelSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.ambient];
        w.extend(&self.hidden);
        w.push(self.latent);
        w
    }
}

#[derive(Debug, Clone, Copy)]
enum HeadIds {
    Linear { weight: ParamId, bias: ParamId },
    Kmeans { centers: ParamId },
    Aagmm { centers: ParamId, log_var: ParamId },
}

/// Trainable backbone and head whose parameters live in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f64> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
    head: HeadIds,
}

/// Model parameters bound on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub layers: Vec<(Var, Var)>,
    pub head: HeadVars,
}

impl BoundModel {
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        embed_on_graph(g, &self.layers, x)
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let backbone = Backbone::init(&spec.widths(), seed);
        let head = init_head(
            spec.head,
            spec.classes,
            spec.latent,
            seed.wrapping_add(0x9E37_79B9),
        )?;
        Ok(Self::from_parts(spec, &backbone, &head))
    }

    pub fn from_parts(spec: ModelSpec, backbone: &Backbone<T>, head: &Head<T>) -> Self {
        let mut store = ParamStore::new();
        let layers = backbone
            .layers
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                let mut pw = Parameter::new(format!("backbone.{i}.weight"), w.clone());
                pw.decay = true;
                (
                    store.push(pw),
                    store.add(format!("backbone.{i}.bias"), b.clone()),
                )
            })
            .collect();
        let head = match head {
            Head::Linear(h) => {
                let mut pw = Parameter::new("head.weight", h.weight.clone());
                pw.decay = true;
                HeadIds::Linear {
                    weight: store.push(pw),
                    bias: store.add("head.bias", h.bias.clone()),
                }
            }
            Head::Kmeans(h) => HeadIds::Kmeans {
                centers: store.add("head.centers", h.centers.clone()),
            },
            Head::Aagmm(h) => HeadIds::Aagmm {
                centers: store.add("head.centers", h.centers.clone()),
                log_var: store.add("head.log_var", h.log_var.clone()),
            },
        };
        Self {
            spec,
            store,
            layers,
            head,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|&(w, b)| (g.param(&self.store, w), g.param(&self.store, b)))
            .collect();
        let head = match self.head {
            HeadIds::Linear { weight, bias } => HeadVars::Linear {
                weight: g.param(&self.store, weight),
                bias: g.param(&self.store, bias),
            },
            HeadIds::Kmeans { centers } => HeadVars::Kmeans {
                centers: g.param(&self.store, centers),
            },
            HeadIds::Aagmm { centers, log_var } => HeadVars::Aagmm {
                centers: g.param(&self.store, centers),
                log_var: g.param(&self.store, log_var),
            },
        };
        BoundModel { layers, head }
    }

    pub fn backbone(&self) -> Backbone<T> {
        Backbone {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (self.store.value(w).clone(), self.store.value(b).clone()))
                .collect(),
        }
    }

    pub fn head(&self) -> Head<T> {
        match self.head {
            HeadIds::Linear { weight, bias } => Head::Linear(LinearSoftmaxHead {
                weight: self.store.value(weight).clone(),
                bias: self.store.value(bias).clone(),
            }),
            HeadIds::Kmeans { centers } => Head::Kmeans(KmeansHead {
                centers: self.store.value(centers).clone(),
            }),
            HeadIds::Aagmm { centers, log_var } => Head::Aagmm(AagmmHead {
                centers: self.store.value(centers).clone(),
                log_var: self.store.value(log_var).clone(),
            }),
        }
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone().embed(x)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        forward(&self.backbone(), &self.head(), x)
    }
}
