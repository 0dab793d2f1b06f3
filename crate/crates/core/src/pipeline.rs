//! Semi-supervised training: supervised cross-entropy, confidence-masked
//! pseudo-labeling on strong views, the moment constraint on weak-view
//! embeddings, the outlier gate, and momentum SGD with global-norm clipping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{clip_global_norm, Graph, Var};
use crate::datasets::{augment_strong, augment_weak, Dataset, DatasetError, Split, WEAK_NOISE};
use crate::heads::{HeadError, HeadKind, Model, ModelSpec};
use crate::metrics::{self, MetricsError, MetricsReport, MetricsRow};
use crate::moments::{mom_loss, Centering, MomentError, MomentSpec, MomentTables, MAX_ORDER};
use crate::optim::Sgd;
use crate::outlier::{Aggregation, ClusterGeometry, OutlierError, OutlierGate};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Outlier(#[from] OutlierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DatasetError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Which augmented view feeds the moment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MomView {
    #[default]
    Weak,
    Strong,
}

impl fmt::Display for MomView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MomView::Weak => "weak",
            MomView::Strong => "strong",
        })
    }
}

impl FromStr for MomView {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weak" => Ok(MomView::Weak),
            "strong" => Ok(MomView::Strong),
            other => Err(format!("unknown view `{other}` (expected weak or strong)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub enabled: bool,
    pub percentile: f64,
    pub aggregation: Aggregation,
    pub refresh: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            percentile: 90.0,
            aggregation: Aggregation::Max,
            refresh: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    /// Labeled batch size.
    pub batch: usize,
    /// Unlabeled batch = `unlabeled_ratio × batch`.
    pub unlabeled_ratio: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tau_conf: f64,
    pub lambda_u: f64,
    pub mom: MomentSpec,
    pub mom_view: MomView,
    pub curriculum: bool,
    pub gate: GateConfig,
    pub head: HeadKind,
    pub latent: usize,
    pub hidden: Vec<usize>,
    /// Shadow-average decay for evaluation weights; 0 disables it.
    pub ema_decay: f64,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 4000,
            batch: 16,
            unlabeled_ratio: 7,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            tau_conf: 0.95,
            lambda_u: 1.0,
            mom: MomentSpec::default(),
            mom_view: MomView::Weak,
            curriculum: true,
            gate: GateConfig::default(),
            head: HeadKind::Aagmm,
            latent: 8,
            hidden: vec![64, 64],
            ema_decay: 0.0,
            eval_every: 200,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch == 0 || self.unlabeled_ratio == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.tau_conf > 0.0 && self.tau_conf <= 1.0) {
            return bad(format!(
                "confidence threshold must lie in (0, 1], got {}",
                self.tau_conf
            ));
        }
        if !(self.lambda_u >= 0.0) || !self.lambda_u.is_finite() {
            return bad(format!(
                "lambda_u must be non-negative, got {}",
                self.lambda_u
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!(
                "EMA decay must lie in [0, 1), got {}",
                self.ema_decay
            ));
        }
        if self.eval_every == 0 {
            return bad("evaluation interval must be positive".into());
        }
        if self.latent == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        self.mom.validate()?;
        if self.mom.enabled()
            && self.mom.centering == Centering::PerCluster
            && !self.head.is_generative()
        {
            return bad("per-cluster moment centering needs a kmeans or aagmm head".into());
        }
        if self.gate.enabled {
            if !self.head.is_generative() {
                return bad("the outlier gate needs a kmeans or aagmm head".into());
            }
            if !(self.gate.percentile > 0.0 && self.gate.percentile <= 100.0) {
                return bad(format!(
                    "gate percentile must lie in (0, 100], got {}",
                    self.gate.percentile
                ));
            }
            if self.gate.refresh == 0 {
                return bad("gate refresh interval must be positive".into());
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, ambient: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            ambient,
            hidden: self.hidden.clone(),
            latent: self.latent,
            classes,
            head: self.head,
        }
    }

    /// Whether the unlabeled branch contributes anything to the objective.
    pub fn uses_unlabeled(&self) -> bool {
        self.lambda_u > 0.0 || self.mom.enabled()
    }
}

/// Hard labels (row argmax, lowest index on ties) and the mask of rows whose
/// top probability reaches the threshold of their label.
pub fn pseudo_label(probs: &Tensor<f64>, thresholds: &[f64]) -> (Vec<usize>, Vec<bool>) {
    let labels = metrics::argmax_rows(probs);
    let mask = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| probs.row(i)[c] >= thresholds[c])
        .collect();
    (labels, mask)
}

/// `τ·count_c / max count`, floored at 0.5; all `τ` while no class has counts.
pub fn curriculum_thresholds(counts: &[u64], tau: f64) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![tau; counts.len()];
    }
    counts
        .iter()
        .map(|&c| (tau * (c as f64 / max as f64)).max(0.5))
        .collect()
}

/// Independent random streams so that disabling one branch never shifts
/// the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Labeled = 1,
    Unlabeled = 2,
    Augment = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// One optimization batch. Rows of `x` are laid out as labeled, weak
/// unlabeled, then (optionally) strong unlabeled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub unlabeled: usize,
    pub strong: bool,
    /// Ground-truth labels of the unlabeled rows, used only for diagnostics.
    pub unlabeled_truth: Vec<usize>,
}

impl Batch {
    pub fn labeled(&self) -> usize {
        self.labels.len()
    }

    fn weak_rows(&self) -> std::ops::Range<usize> {
        let l = self.labeled();
        l..l + self.unlabeled
    }

    fn strong_row(&self, i: usize) -> usize {
        self.labeled() + self.unlabeled + i
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f64>,
    pub optimizer: Sgd<f64>,
    pub step: usize,
    /// Confident predictions per class, for the curriculum thresholds.
    pub counts: Vec<u64>,
    pub gate: Option<OutlierGate<f64>>,
    pub ema: Option<Vec<Tensor<f64>>>,
    tables: Option<MomentTables<f64>>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, ambient: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_spec(ambient, classes), cfg.seed)?;
        let optimizer = Sgd::new(&model.store, cfg.lr, cfg.momentum, cfg.weight_decay);
        let gate = if cfg.gate.enabled {
            Some(OutlierGate::new(
                cfg.gate.percentile,
                cfg.gate.aggregation,
                cfg.gate.refresh,
            )?)
        } else {
            None
        };
        let ema =
            (cfg.ema_decay > 0.0).then(|| model.store.iter().map(|p| p.value.clone()).collect());
        let tables = if cfg.mom.enabled() {
            Some(MomentTables::new(cfg.latent, cfg.mom.max_order)?)
        } else {
            None
        };
        Ok(Self {
            model,
            optimizer,
            step: 0,
            counts: vec![0; classes],
            gate,
            ema,
            tables,
        })
    }

    pub fn thresholds(&self, cfg: &RunConfig) -> Vec<f64> {
        if cfg.curriculum {
            curriculum_thresholds(&self.counts, cfg.tau_conf)
        } else {
            vec![cfg.tau_conf; self.counts.len()]
        }
    }

    /// Refits the gate threshold on embeddings of `labeled_x`.
    pub fn refit_gate(&mut self, labeled_x: &Tensor<f64>) -> Result<Option<f64>> {
        let Some(gate) = self.gate.as_mut() else {
            return Ok(None);
        };
        let geometry = ClusterGeometry::from_head(&self.model.head())?;
        let z = self.model.embed(labeled_x)?;
        Ok(Some(gate.fit_threshold(&geometry, &z)?))
    }

    /// The model evaluation should use: the shadow average when enabled.
    pub fn eval_model(&self) -> Model<f64> {
        let mut model = self.model.clone();
        if let Some(ema) = &self.ema {
            for (p, v) in model.store.iter_mut().zip(ema) {
                p.value = v.clone();
            }
        }
        model
    }
}

/// Tape handles and masks produced by [`objective`].
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub sup: Var,
    /// `λ_u`-weighted consistency term, when the unlabeled branch is active.
    pub unsup: Option<Var>,
    /// Weighted moment total and unweighted per-order terms.
    pub mom: Option<(Var, Vec<Var>)>,
    pub pseudo: Vec<usize>,
    /// Largest weak-view class probability per unlabeled row.
    pub top_prob: Vec<f64>,
    pub confident: Vec<bool>,
    /// Gate decision per unlabeled row (all true when the gate is off).
    pub gate_keep: Vec<bool>,
}

impl Objective {
    pub fn kept(&self) -> Vec<bool> {
        self.confident
            .iter()
            .zip(&self.gate_keep)
            .map(|(&c, &g)| c && g)
            .collect()
    }
}

/// Builds the training objective for `batch` on `g`, with `x` the tape node
/// holding `batch.x`.
pub fn objective(
    g: &mut Graph<f64>,
    state: &TrainState,
    cfg: &RunConfig,
    batch: &Batch,
    x: Var,
) -> Result<Objective> {
    let bound = state.model.bind(g);
    let z = bound.embed(g, x)?;
    let scores = bound.head.scores(g, z)?;
    let logp = g.log_softmax(scores, 1)?;

    let n_l = batch.labeled();
    let lab_rows: Vec<usize> = (0..n_l).collect();
    let lab_logp = g.gather_rows(logp, &lab_rows)?;
    let picked = g.pick(lab_logp, &batch.labels)?;
    let nll = g.mean_all(picked)?;
    let sup = g.neg(nll)?;

    let n_u = batch.unlabeled;
    let mut out = Objective {
        total: sup,
        sup,
        unsup: None,
        mom: None,
        pseudo: Vec::new(),
        top_prob: Vec::new(),
        confident: Vec::new(),
        gate_keep: vec![true; n_u],
    };
    if n_u == 0 {
        return Ok(out);
    }

    let weak_rows: Vec<usize> = batch.weak_rows().collect();
    let weak_probs = g.value(logp).gather_rows(&weak_rows)?.map(f64::exp);
    let (pseudo, confident) = pseudo_label(&weak_probs, &state.thresholds(cfg));

    if let Some(gate) = state.gate.as_ref().filter(|g| g.is_fitted()) {
        let geometry = ClusterGeometry::from_head(&state.model.head())?;
        let zw = g.value(z).gather_rows(&weak_rows)?;
        out.gate_keep = gate.mask(&geometry, &zw)?;
    }

    let mut total = sup;
    if cfg.lambda_u > 0.0 {
        if !batch.strong {
            return Err(PipelineError::Config(
                "consistency loss needs strong views".into(),
            ));
        }
        let (rows, targets): (Vec<usize>, Vec<usize>) = (0..n_u)
            .filter(|&i| confident[i] && out.gate_keep[i])
            .map(|i| (batch.strong_row(i), pseudo[i]))
            .unzip();
        let unsup = if rows.is_empty() {
            g.scalar_constant(0.0)
        } else {
            let kept_logp = g.gather_rows(logp, &rows)?;
            let picked = g.pick(kept_logp, &targets)?;
            let s = g.sum_all(picked)?;
            g.scale(s, -cfg.lambda_u / n_u as f64)?
        };
        total = g.add(total, unsup)?;
        out.unsup = Some(unsup);
    }

    if let Some(tables) = &state.tables {
        let rows: Vec<usize> = (0..n_u)
            .filter(|&i| out.gate_keep[i])
            .map(|i| match cfg.mom_view {
                MomView::Weak => weak_rows[i],
                MomView::Strong => batch.strong_row(i),
            })
            .collect();
        if cfg.mom_view == MomView::Strong && !batch.strong {
            return Err(PipelineError::Config(
                "moment loss on strong views needs strong views".into(),
            ));
        }
        let (mom_total, per_order) = if rows.is_empty() {
            let zero = g.scalar_constant(0.0);
            (zero, vec![zero; cfg.mom.max_order])
        } else {
            let zk = g.gather_rows(z, &rows)?;
            let m = mom_loss(g, zk, &cfg.mom, tables, Some(&bound.head))?;
            (m.total, m.per_order)
        };
        total = g.add(total, mom_total)?;
        out.mom = Some((mom_total, per_order));
    }

    out.total = total;
    out.top_prob = (0..n_u).map(|i| weak_probs.row(i)[pseudo[i]]).collect();
    out.pseudo = pseudo;
    out.confident = confident;
    Ok(out)
}

/// Per-step loss breakdown and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_mom_total: f64,
    /// `λ_p ε_p` per order.
    pub loss_mom: [f64; MAX_ORDER],
    pub unlabeled: usize,
    pub kept: usize,
    pub kept_correct: usize,
    pub gated_out: usize,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
}

/// One optimizer step on `batch`; the gate is used as currently fitted.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &RunConfig) -> Result<StepReport> {
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let obj = objective(&mut g, state, cfg, batch, x)?;
    let scalar = |v: Var| g.value(v).data()[0];

    let mut rep = StepReport {
        total: scalar(obj.total),
        loss_sup: scalar(obj.sup),
        loss_unsup: obj.unsup.map_or(0.0, scalar),
        unlabeled: batch.unlabeled,
        ..StepReport::default()
    };
    if let Some((total, per_order)) = &obj.mom {
        rep.loss_mom_total = scalar(*total);
        for (p, &v) in per_order.iter().enumerate() {
            rep.loss_mom[p] = cfg.mom.weight(p + 1) * scalar(v);
        }
    }
    if !rep.total.is_finite() {
        return Err(PipelineError::NonFinite("loss"));
    }

    for (i, kept) in obj.kept().into_iter().enumerate() {
        if kept {
            rep.kept += 1;
            rep.kept_correct += usize::from(obj.pseudo[i] == batch.unlabeled_truth[i]);
        }
        rep.gated_out += usize::from(!obj.gate_keep[i]);
        if obj.top_prob[i] >= cfg.tau_conf && obj.gate_keep[i] {
            state.counts[obj.pseudo[i]] += 1;
        }
    }

    state.model.store.zero_grad();
    g.backward(obj.total, &mut state.model.store)?;
    clip_global_norm(&mut state.model.store, cfg.clip_norm);
    rep.grad_norm = state.model.store.global_grad_norm();
    if !rep.grad_norm.is_finite() {
        return Err(PipelineError::NonFinite("gradient"));
    }
    state.optimizer.step(&mut state.model.store);
    if let Some(ema) = state.ema.as_mut() {
        let d = cfg.ema_decay;
        for (s, p) in ema.iter_mut().zip(state.model.store.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
    state.step += 1;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub compactness: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Accuracy and compactness of `model` on `(x, y)`. Compactness uses the
/// head's centers, or per-predicted-class centroids for the linear head.
pub fn evaluate(model: &Model<f64>, x: &Tensor<f64>, y: &[usize]) -> Result<EvalReport> {
    if y.is_empty() {
        return Err(PipelineError::EmptyTestSet);
    }
    let out = model.forward(x)?;
    let predictions = metrics::argmax_rows(&out.conditional);
    let k = model.spec.classes;
    let centers = match model.head().centers() {
        Some(c) => c.clone(),
        None => metrics::empirical_centers(&out.z, &predictions, k),
    };
    Ok(EvalReport {
        accuracy: metrics::accuracy(&predictions, y)?,
        compactness: metrics::compactness(&out.z, &predictions, &centers)?,
        per_class: metrics::per_class_accuracy(&predictions, y, k),
        predictions,
    })
}

/// Gate quality against ground truth: flagged fraction of the labeled set,
/// and precision/recall of the flags on the unlabeled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateReport {
    pub tau: f64,
    pub labeled_flag_rate: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn evaluate_gate(
    model: &Model<f64>,
    gate: &mut OutlierGate<f64>,
    labeled_x: &Tensor<f64>,
    unlabeled_x: &Tensor<f64>,
    truth: &[bool],
) -> Result<GateReport> {
    let geometry = ClusterGeometry::from_head(&model.head())?;
    let zl = model.embed(labeled_x)?;
    let tau = gate.fit_threshold(&geometry, &zl)?;
    let lab_keep = gate.mask(&geometry, &zl)?;
    let flagged = lab_keep.iter().filter(|&&k| !k).count();
    let zu = model.embed(unlabeled_x)?;
    let predicted: Vec<bool> = gate.mask(&geometry, &zu)?.into_iter().map(|k| !k).collect();
    let (precision, recall) = metrics::outlier_pr(truth, &predicted)?;
    Ok(GateReport {
        tau,
        labeled_flag_rate: flagged as f64 / lab_keep.len() as f64,
        precision,
        recall,
    })
}

/// Owns data, state and random streams for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    labeled_x: Tensor<f64>,
    labeled_y: Vec<usize>,
    unlabeled_x: Tensor<f64>,
    unlabeled_y: Vec<usize>,
    test_x: Tensor<f64>,
    test_y: Vec<usize>,
    scale: Vec<f64>,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: &Dataset) -> Result<Self> {
        let (labeled_x, labeled_y) = data.subset(Split::Labeled);
        let (unlabeled_x, unlabeled_y) = data.subset(Split::Unlabeled);
        let (test_x, test_y) = data.subset(Split::Test);
        if labeled_y.is_empty() {
            return Err(PipelineError::Config(
                "dataset has no labeled samples".into(),
            ));
        }
        if cfg.uses_unlabeled() && unlabeled_y.is_empty() {
            return Err(PipelineError::Config(
                "dataset has no unlabeled samples".into(),
            ));
        }
        let state = TrainState::new(&cfg, data.ambient(), data.classes)?;
        Ok(Self {
            labeled_rng: stream_rng(cfg.seed, Stream::Labeled),
            unlabeled_rng: stream_rng(cfg.seed, Stream::Unlabeled),
            augment_rng: stream_rng(cfg.seed, Stream::Augment),
            scale: data.feature_scale(),
            cfg,
            state,
            labeled_x,
            labeled_y,
            unlabeled_x,
            unlabeled_y,
            test_x,
            test_y,
        })
    }

    pub fn labeled(&self) -> (&Tensor<f64>, &[usize]) {
        (&self.labeled_x, &self.labeled_y)
    }

    pub fn unlabeled(&self) -> (&Tensor<f64>, &[usize]) {
        (&self.unlabeled_x, &self.unlabeled_y)
    }

    /// Draws the next batch: labeled rows with replacement and a weak view;
    /// unlabeled rows with weak and strong views when that branch is active.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let b = self.cfg.batch;
        let li: Vec<usize> = (0..b)
            .map(|_| self.labeled_rng.random_range(0..self.labeled_y.len()))
            .collect();
        let xl = augment_weak(
            &self.labeled_x.gather_rows(&li)?,
            &self.scale,
            WEAK_NOISE,
            &mut self.augment_rng,
        );
        let labels: Vec<usize> = li.iter().map(|&i| self.labeled_y[i]).collect();

        let mut data = xl.into_data();
        let mut unlabeled = 0;
        let mut unlabeled_truth = Vec::new();
        let strong = self.cfg.lambda_u > 0.0 || self.cfg.mom_view == MomView::Strong;
        if self.cfg.uses_unlabeled() {
            unlabeled = b * self.cfg.unlabeled_ratio;
            let ui: Vec<usize> = (0..unlabeled)
                .map(|_| self.unlabeled_rng.random_range(0..self.unlabeled_y.len()))
                .collect();
            let xu = self.unlabeled_x.gather_rows(&ui)?;
            data.extend(
                augment_weak(&xu, &self.scale, WEAK_NOISE, &mut self.augment_rng).into_data(),
            );
            if strong {
                data.extend(augment_strong(&xu, &self.scale, &mut self.augment_rng).into_data());
            }
            unlabeled_truth = ui.iter().map(|&i| self.unlabeled_y[i]).collect();
        }
        let rows = b + unlabeled * if strong { 2 } else { 1 };
        Ok(Batch {
            x: Tensor::new(vec![rows, self.labeled_x.cols()], data)?,
            labels,
            unlabeled,
            strong: strong && unlabeled > 0,
            unlabeled_truth,
        })
    }

    /// Refits the gate when due, then samples and takes one step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        let attach = |e: PipelineError| PipelineError::AtStep {
            step,
            source: Box::new(e),
        };
        if self.state.gate.is_some() && step.is_multiple_of(self.cfg.gate.refresh) {
            let x = self.labeled_x.clone();
            self.state.refit_gate(&x).map_err(attach)?;
        }
        let batch = self.next_batch().map_err(attach)?;
        train_step(&mut self.state, &batch, &self.cfg).map_err(attach)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.state.eval_model(), &self.test_x, &self.test_y)
    }

    fn row(&self, acc: &Interval) -> Result<MetricsRow> {
        let eval = self.evaluate()?;
        let n = acc.steps.max(1) as f64;
        let mut loss_mom = [0.0; MAX_ORDER];
        for (m, s) in loss_mom.iter_mut().zip(acc.loss_mom) {
            *m = s / n;
        }
        Ok(MetricsRow {
            step: self.state.step,
            loss_sup: acc.loss_sup / n,
            loss_unsup: acc.loss_unsup / n,
            loss_mom_total: acc.loss_mom_total / n,
            loss_mom,
            pseudo_rate: ratio(acc.kept, acc.unlabeled, 0.0),
            pseudo_acc: ratio(acc.kept_correct, acc.kept, 1.0),
            outlier_tau: self
                .state
                .gate
                .as_ref()
                .and_then(|g| g.threshold())
                .unwrap_or(0.0),
            outlier_rate: ratio(acc.gated_out, acc.unlabeled, 0.0),
            test_acc: eval.accuracy,
            compactness: eval.compactness,
        })
    }

    /// Runs all configured steps, evaluating at step 0, every `eval_every`
    /// steps and after the last step.
    pub fn run(mut self) -> Result<RunOutput> {
        let started = Instant::now();
        if self.state.gate.is_some() {
            let x = self.labeled_x.clone();
            self.state.refit_gate(&x)?;
        }
        let mut report = MetricsReport::new();
        report.push(self.row(&Interval::default())?)?;
        let mut acc = Interval::default();
        while self.state.step < self.cfg.steps {
            let rep = self.step()?;
            acc.add(&rep);
            let s = self.state.step;
            if s.is_multiple_of(self.cfg.eval_every) || s == self.cfg.steps {
                let row = self.row(&acc).map_err(|e| PipelineError::AtStep {
                    step: s,
                    source: Box::new(e),
                })?;
                report.push(row)?;
                acc = Interval::default();
            }
        }
        let final_eval = self.evaluate()?;
        Ok(RunOutput {
            report,
            final_eval,
            wall_secs: started.elapsed().as_secs_f64(),
            state: self.state,
        })
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Default)]
struct Interval {
    steps: usize,
    loss_sup: f64,
    loss_unsup: f64,
    loss_mom_total: f64,
    loss_mom: [f64; MAX_ORDER],
    unlabeled: usize,
    kept: usize,
    kept_correct: usize,
    gated_out: usize,
}

impl Interval {
    fn add(&mut self, r: &StepReport) {
        self.steps += 1;
        self.loss_sup += r.loss_sup;
        self.loss_unsup += r.loss_unsup;
        self.loss_mom_total += r.loss_mom_total;
        for (a, b) in self.loss_mom.iter_mut().zip(r.loss_mom) {
            *a += b;
        }
        self.unlabeled += r.unlabeled;
        self.kept += r.kept;
        self.kept_correct += r.kept_correct;
        self.gated_out += r.gated_out;
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub final_eval: EvalReport,
    pub wall_secs: f64,
    pub state: TrainState,
}

/// Trains on `data` under `cfg`.
pub fn run(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    Trainer::new(cfg.clone(), data)?.run()
}
