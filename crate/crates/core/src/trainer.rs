//! Two-view training.
//!
//! Every labeled sentence is seen through the original view (the sentence
//! alone) and, in context modes, through the retrieval view (the sentence
//! followed by its assembled contexts). The loss sums the CRF negative
//! log-likelihood of each view in use and a consistency term in which the
//! retrieval view acts as a fixed teacher for the original view:
//!
//! * `cl_l2`: squared distance between the two views' token representations;
//! * `cl_kl`: cross-entropy of the original view's CRF marginals against the
//!   retrieval view's marginals.
//!
//! No gradient flows through the teacher side of the consistency term; the
//! retrieval view still learns from its own likelihood term.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{entity_f1, Dataset, LabeledSentence, Prf, Token};
use crate::crf::{marginal_entropy, score_lattice, CrfParams, LatticeGrad, MarginalTable, ScoreLattice};
use crate::encoder::{
    encode_features, featurize_all, EmbeddingStore, EncoderGrad, EncoderParams, FeatureVector,
    HashFeatureSpec,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reranker::{EmbeddingMatrix, ViewTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WoContext,
    WContext,
    JointNoCl,
    ClL2,
    ClKl,
    ClBoth,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::WoContext,
        Mode::WContext,
        Mode::JointNoCl,
        Mode::ClL2,
        Mode::ClKl,
        Mode::ClBoth,
    ];

    pub fn uses_original_nll(self) -> bool {
        self != Mode::WContext
    }

    pub fn uses_retrieval_nll(self) -> bool {
        self != Mode::WoContext
    }

    pub fn uses_l2(self) -> bool {
        matches!(self, Mode::ClL2 | Mode::ClBoth)
    }

    pub fn uses_kl(self) -> bool {
        matches!(self, Mode::ClKl | Mode::ClBoth)
    }

    pub fn is_cl(self) -> bool {
        self.uses_l2() || self.uses_kl()
    }

    pub fn needs_context(self) -> bool {
        self != Mode::WoContext
    }

    /// View used for dev-set model selection.
    pub fn selection_view(self) -> ViewTag {
        match self {
            Mode::WContext => ViewTag::Retrieval,
            _ => ViewTag::Original,
        }
    }

    pub fn cl_kind(self) -> ClKind {
        match (self.uses_l2(), self.uses_kl()) {
            (true, true) => ClKind::L2Kl,
            (true, false) => ClKind::L2,
            (false, true) => ClKind::Kl,
            (false, false) => ClKind::None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::WoContext => "wo_context",
            Mode::WContext => "w_context",
            Mode::JointNoCl => "joint_no_cl",
            Mode::ClL2 => "cl_l2",
            Mode::ClKl => "cl_kl",
            Mode::ClBoth => "cl_both",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClKind {
    #[default]
    None,
    L2,
    Kl,
    #[serde(rename = "l2+kl")]
    L2Kl,
}

/// Multipliers on the loss components; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nll: f64,
    pub nll_ext: f64,
    pub cl_l2: f64,
    pub cl_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 1.0,
            nll_ext: 1.0,
            cl_l2: 1.0,
            cl_kl: 1.0,
        }
    }
}

/// Labeled and unlabeled batches per round of the semi-supervised schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternation {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for Alternation {
    fn default() -> Self {
        Self {
            labeled: 1,
            unlabeled: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub encoder_lr: f64,
    pub crf_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub alternation: Alternation,
    pub weights: LossWeights,
    pub clip_norm: Option<f64>,
    pub hidden: usize,
    pub init_scale: f64,
    pub bio_mask: bool,
    pub stop_row: bool,
    /// Fail instead of using an empty context when a sentence has none.
    pub strict_contexts: bool,
    pub spec: HashFeatureSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ClKl,
            encoder_lr: 5e-6,
            crf_lr: 0.05,
            batch_size: 4,
            epochs: 10,
            weight_decay: 0.01,
            seed: 42,
            alternation: Alternation::default(),
            weights: LossWeights::default(),
            clip_norm: None,
            hidden: 32,
            init_scale: 0.1,
            bio_mask: false,
            stop_row: false,
            strict_contexts: false,
            spec: HashFeatureSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Preset with fewer epochs for large corpora.
    pub fn large_corpus() -> Self {
        Self {
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.encoder_lr > 0.0 && self.crf_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be at least 1".into()));
        }
        if self.alternation.labeled == 0 {
            return Err(Error::Config("alternation needs at least one labeled batch".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("weight decay and clip norm must be non-negative".into()));
        }
        self.spec.validate()
    }
}

/// Source of token representations.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Hash(EncoderParams),
    /// Frozen representations looked up by sentence id and view.
    External(Arc<EmbeddingStore>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub crf: CrfParams,
    pub labels: Vec<String>,
}

impl Model {
    /// Randomly initialized model with the hash encoder.
    pub fn init(labels: Vec<String>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::random(
            config.spec.clone(),
            config.hidden,
            config.init_scale,
            config.seed,
        )?;
        let crf = init_crf(&labels, config.hidden, config)?;
        Ok(Self {
            encoder: Encoder::Hash(encoder),
            crf,
            labels,
        })
    }

    /// Model over frozen external representations.
    pub fn init_external(labels: Vec<String>, store: Arc<EmbeddingStore>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let hidden = store
            .dim
            .ok_or_else(|| Error::Config("embedding dump is empty".into()))?;
        let crf = init_crf(&labels, hidden, config)?;
        Ok(Self {
            encoder: Encoder::External(store),
            crf,
            labels,
        })
    }

    pub fn label_index(&self) -> HashMap<&str, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    pub fn hash_params(&self) -> Option<&EncoderParams> {
        match &self.encoder {
            Encoder::Hash(p) => Some(p),
            Encoder::External(_) => None,
        }
    }

    pub fn hash_params_mut(&mut self) -> Option<&mut EncoderParams> {
        match &mut self.encoder {
            Encoder::Hash(p) => Some(p),
            Encoder::External(_) => None,
        }
    }
}

fn init_crf(labels: &[String], hidden: usize, config: &TrainConfig) -> Result<CrfParams> {
    let mut crf = CrfParams::zeros(labels.len(), hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0ff_ee00);
    let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::Config(e.to_string()))?;
    crf.emission
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = normal.sample(&mut rng));
    if config.stop_row {
        crf = crf.with_stop();
    }
    if config.bio_mask {
        crf = crf.with_bio_mask(labels);
    }
    Ok(crf)
}

/// One sentence prepared for the loss: tokens, optional gold label indices and
/// the assembled context of the retrieval view.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub id: &'a str,
    pub tokens: &'a [Token],
    pub gold: Option<&'a [usize]>,
    pub context: Option<&'a [Token]>,
}

/// Both views' representations of the sentence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub original: EmbeddingMatrix,
    pub retrieval: EmbeddingMatrix,
}

/// `sum_i ||v'_i - v_i||^2` and its gradient with respect to the original view only.
pub fn cl_l2_loss(pair: &ViewPair) -> Result<(f64, Matrix)> {
    let (v, vt) = (&pair.original.rows, &pair.retrieval.rows);
    if v.shape() != vt.shape() {
        return Err(Error::Shape(format!(
            "views differ in shape: {:?} vs {:?}",
            v.shape(),
            vt.shape()
        )));
    }
    let mut grad = Matrix::zeros(v.rows(), v.cols());
    let mut loss = 0.0;
    for ((g, a), b) in grad.as_mut_slice().iter_mut().zip(v.as_slice()).zip(vt.as_slice()) {
        let diff = a - b;
        loss += diff * diff;
        *g = 2.0 * diff;
    }
    Ok((loss, grad))
}

/// Cross-entropy of the student's marginals against fixed teacher marginals,
/// with the gradient on the student's lattice scores.
pub fn cl_kl_loss(teacher: &MarginalTable, student: &ScoreLattice) -> Result<(f64, LatticeGrad)> {
    student.marginal_cross_entropy(teacher)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub nll_ext: f64,
    /// Consistency loss actually optimized (L2 part plus cross-entropy part).
    pub cl: f64,
    pub cl_l2: f64,
    /// Cross-entropy form of the KL term.
    pub cl_kl: f64,
    /// `cl_kl` minus the teacher entropy: the KL divergence itself.
    pub kl_divergence: f64,
    pub cl_kind: ClKind,
    pub total: f64,
}

impl LossReport {
    fn add(&mut self, other: &LossReport) {
        self.nll += other.nll;
        self.nll_ext += other.nll_ext;
        self.cl += other.cl;
        self.cl_l2 += other.cl_l2;
        self.cl_kl += other.cl_kl;
        self.kl_divergence += other.kl_divergence;
        self.cl_kind = other.cl_kind;
        self.total += other.total;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.nll *= c;
        self.nll_ext *= c;
        self.cl *= c;
        self.cl_l2 *= c;
        self.cl_kl *= c;
        self.kl_divergence *= c;
        self.total *= c;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emission: Matrix,
    pub transition: Matrix,
    pub stop: Option<Vec<f64>>,
}

impl CrfGrad {
    fn zeros(crf: &CrfParams) -> Self {
        Self {
            emission: Matrix::zeros(crf.labels(), crf.hidden()),
            transition: Matrix::zeros(crf.labels() + 1, crf.labels()),
            stop: crf.stop.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }

    fn axpy(&mut self, c: f64, other: &CrfGrad) {
        self.emission.axpy(c, &other.emission);
        self.transition.axpy(c, &other.transition);
        if let (Some(a), Some(b)) = (&mut self.stop, &other.stop) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.emission.squared_norm()
            + self.transition.squared_norm()
            + self.stop.iter().flatten().map(|v| v * v).sum::<f64>()
    }
}

/// Gradients for both parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Option<EncoderGrad>,
    pub crf: CrfGrad,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Self {
            encoder: model.hash_params().map(|p| EncoderGrad::new(p.hidden())),
            crf: CrfGrad::zeros(&model.crf),
        }
    }

    pub fn axpy(&mut self, c: f64, other: &Gradients) {
        self.crf.axpy(c, &other.crf);
        if let (Some(a), Some(b)) = (&mut self.encoder, &other.encoder) {
            a.axpy(c, b);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.crf.squared_norm() + self.encoder.as_ref().map_or(0.0, EncoderGrad::squared_norm)
    }
}

/// A view's representations and what is needed to backpropagate into them.
struct ViewState {
    features: Option<Vec<FeatureVector>>,
    reps: EmbeddingMatrix,
    lattice: ScoreLattice,
}

fn view_state(model: &Model, ex: &Example<'_>, view: ViewTag) -> Result<ViewState> {
    let context = match view {
        ViewTag::Original => None,
        ViewTag::Retrieval => Some(ex.context.ok_or_else(|| {
            Error::Config(format!("sentence {} has no context for the retrieval view", ex.id))
        })?),
    };
    let (features, reps) = match &model.encoder {
        Encoder::Hash(params) => {
            let feats = featurize_all(ex.tokens, context, &params.spec);
            let reps = encode_features(&feats, params, view);
            (Some(feats), reps)
        }
        Encoder::External(store) => {
            let reps = store.get(ex.id, view).cloned().ok_or_else(|| {
                Error::Data(format!("no {view:?} representations for sentence {}", ex.id))
            })?;
            if reps.len() < ex.tokens.len() {
                return Err(Error::Shape(format!(
                    "sentence {} has {} tokens but {} representation rows",
                    ex.id,
                    ex.tokens.len(),
                    reps.len()
                )));
            }
            // Only the sentence positions enter the losses.
            let rows = Matrix::from_vec(
                ex.tokens.len(),
                reps.dim(),
                reps.rows.as_slice()[..ex.tokens.len() * reps.dim()].to_vec(),
            );
            (None, EmbeddingMatrix::new(rows, view))
        }
    };
    let lattice = score_lattice(&reps, &model.crf)?;
    Ok(ViewState {
        features,
        reps,
        lattice,
    })
}

/// Pushes a lattice gradient (plus any direct gradient on the representations)
/// back into the parameter groups.
fn backprop_view(
    model: &Model,
    state: &ViewState,
    lattice_grad: &LatticeGrad,
    rep_grad: Option<&Matrix>,
    grads: &mut Gradients,
) {
    let (n, t) = lattice_grad.emit.shape();
    let d = model.crf.hidden();
    let mut dv = rep_grad.cloned().unwrap_or_else(|| Matrix::zeros(n, d));
    for i in 0..n {
        let vi = state.reps.rows.row(i);
        for y in 0..t {
            let g = lattice_grad.emit.get(i, y);
            if g == 0.0 {
                continue;
            }
            let w = model.crf.emission.row(y);
            for k in 0..d {
                grads.crf.emission.add_at(y, k, g * vi[k]);
                dv.add_at(i, k, g * w[k]);
            }
        }
    }
    grads.crf.transition.axpy(1.0, &lattice_grad.trans);
    if let (Some(a), Some(b)) = (&mut grads.crf.stop, &lattice_grad.stop) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    if let (Some(enc), Some(feats)) = (&mut grads.encoder, &state.features) {
        enc.accumulate(feats, &dv, 1.0);
    }
}

fn zero_lattice_grad(lattice: &ScoreLattice) -> LatticeGrad {
    LatticeGrad {
        emit: Matrix::zeros(lattice.len(), lattice.labels()),
        trans: Matrix::zeros(lattice.labels() + 1, lattice.labels()),
        stop: lattice.stop.as_ref().map(|s| vec![0.0; s.len()]),
    }
}

/// Loss and gradients with the consistency teacher computed from `teacher`
/// and treated as a constant. With `teacher == model` this is the training
/// objective; holding `teacher` fixed while perturbing `model` gives the
/// function whose derivative the returned gradients are.
pub fn loss_with_teacher(
    model: &Model,
    teacher: &Model,
    ex: &Example<'_>,
    mode: Mode,
    weights: &LossWeights,
    supervised: bool,
) -> Result<(LossReport, Gradients)> {
    if !supervised && !mode.is_cl() {
        return Err(Error::Config(format!(
            "mode {mode} has no consistency loss for unlabeled data"
        )));
    }
    if supervised && ex.gold.is_none() {
        return Err(Error::Data(format!("sentence {} has no gold labels", ex.id)));
    }
    if mode.needs_context() && ex.context.is_none() {
        return Err(Error::Config(format!(
            "mode {mode} needs a context bundle for sentence {}",
            ex.id
        )));
    }
    let mut report = LossReport {
        cl_kind: mode.cl_kind(),
        ..LossReport::default()
    };
    let mut grads = Gradients::zeros(model);

    let original = (supervised && mode.uses_original_nll() || mode.is_cl())
        .then(|| view_state(model, ex, ViewTag::Original))
        .transpose()?;
    let retrieval = (supervised && mode.uses_retrieval_nll())
        .then(|| view_state(model, ex, ViewTag::Retrieval))
        .transpose()?;

    if let Some(orig) = &original {
        let mut lat_grad = zero_lattice_grad(&orig.lattice);
        let mut rep_grad = None;
        if supervised && mode.uses_original_nll() {
            let (loss, g) = orig.lattice.nll_with_grad(ex.gold.expect("checked"))?;
            report.nll = loss;
            lat_grad.axpy(weights.nll, &g);
        }
        if mode.is_cl() {
            let teacher_view = view_state(teacher, ex, ViewTag::Retrieval)?;
            if mode.uses_l2() {
                let pair = ViewPair {
                    original: orig.reps.clone(),
                    retrieval: teacher_view.reps.clone(),
                };
                let (loss, mut g) = cl_l2_loss(&pair)?;
                g.scale(weights.cl_l2);
                report.cl_l2 = loss;
                rep_grad = Some(g);
            }
            if mode.uses_kl() {
                let target = teacher_view.lattice.marginals();
                let (loss, g) = cl_kl_loss(&target, &orig.lattice)?;
                report.cl_kl = loss;
                report.kl_divergence = loss - marginal_entropy(&target);
                lat_grad.axpy(weights.cl_kl, &g);
            }
        }
        backprop_view(model, orig, &lat_grad, rep_grad.as_ref(), &mut grads);
    }
    if let Some(ret) = &retrieval {
        let (loss, mut g) = ret.lattice.nll_with_grad(ex.gold.expect("checked"))?;
        report.nll_ext = loss;
        g.emit.scale(weights.nll_ext);
        g.trans.scale(weights.nll_ext);
        if let Some(s) = &mut g.stop {
            s.iter_mut().for_each(|v| *v *= weights.nll_ext);
        }
        backprop_view(model, ret, &g, None, &mut grads);
    }

    report.cl = report.cl_l2 + report.cl_kl;
    report.total = weights.nll * report.nll
        + weights.nll_ext * report.nll_ext
        + weights.cl_l2 * report.cl_l2
        + weights.cl_kl * report.cl_kl;
    Ok((report, grads))
}

/// Supervised loss for one labeled sentence under `config.mode`.
pub fn total_loss(model: &Model, ex: &Example<'_>, config: &TrainConfig) -> Result<(LossReport, Gradients)> {
    loss_with_teacher(model, model, ex, config.mode, &config.weights, true)
}

/// Consistency-only loss for an unlabeled sentence.
pub fn unlabeled_loss(model: &Model, ex: &Example<'_>, config: &TrainConfig) -> Result<(LossReport, Gradients)> {
    loss_with_teacher(model, model, ex, config.mode, &config.weights, false)
}

/// One optimizer step on a single unlabeled sentence; returns the loss before the step.
pub fn unlabeled_step(
    model: &mut Model,
    opt: &mut AdamW,
    ex: &Example<'_>,
    config: &TrainConfig,
) -> Result<LossReport> {
    let (report, grads) = unlabeled_loss(model, ex, config)?;
    opt.step(model, &grads);
    Ok(report)
}

/// Decoupled-weight-decay Adam with separate learning rates for the encoder
/// and CRF parameter groups.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub encoder_lr: f64,
    pub crf_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    enc_m: Vec<f64>,
    enc_v: Vec<f64>,
    crf_m: Vec<f64>,
    crf_v: Vec<f64>,
}

impl AdamW {
    pub fn new(model: &Model, encoder_lr: f64, crf_lr: f64, weight_decay: f64) -> Self {
        let enc = model.hash_params().map_or(0, |p| p.as_slice().len());
        let crf = crf_param_count(&model.crf);
        Self {
            encoder_lr,
            crf_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            enc_m: vec![0.0; enc],
            enc_v: vec![0.0; enc],
            crf_m: vec![0.0; crf],
            crf_v: vec![0.0; crf],
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let hp = (self.beta1, self.beta2, self.eps, self.weight_decay, bc1, bc2);

        let crf_grad = flatten_crf_grad(&grads.crf);
        let mut crf_params = flatten_crf(&model.crf);
        adam_update(&mut crf_params, &crf_grad, &mut self.crf_m, &mut self.crf_v, self.crf_lr, hp);
        unflatten_crf(&mut model.crf, &crf_params);

        if let (Some(params), Some(g)) = (model.hash_params_mut(), &grads.encoder) {
            let d = params.hidden();
            let mut dense = vec![0.0; params.as_slice().len()];
            for (&f, col) in &g.columns {
                let at = f as usize * d;
                dense[at..at + d].copy_from_slice(col);
            }
            adam_update(
                params.as_mut_slice(),
                &dense,
                &mut self.enc_m,
                &mut self.enc_v,
                self.encoder_lr,
                hp,
            );
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    (b1, b2, eps, wd, bc1, bc2): (f64, f64, f64, f64, f64, f64),
) {
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * params[i]);
    }
}

fn crf_param_count(crf: &CrfParams) -> usize {
    crf.emission.as_slice().len() + crf.transition.as_slice().len() + crf.stop.as_ref().map_or(0, Vec::len)
}

fn flatten_crf(crf: &CrfParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(crf_param_count(crf));
    out.extend_from_slice(crf.emission.as_slice());
    out.extend_from_slice(crf.transition.as_slice());
    if let Some(s) = &crf.stop {
        out.extend_from_slice(s);
    }
    out
}

fn flatten_crf_grad(g: &CrfGrad) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(g.emission.as_slice());
    out.extend_from_slice(g.transition.as_slice());
    if let Some(s) = &g.stop {
        out.extend_from_slice(s);
    }
    out
}

fn unflatten_crf(crf: &mut CrfParams, flat: &[f64]) {
    let (e, rest) = flat.split_at(crf.emission.as_slice().len());
    let (t, s) = rest.split_at(crf.transition.as_slice().len());
    crf.emission.as_mut_slice().copy_from_slice(e);
    crf.transition.as_mut_slice().copy_from_slice(t);
    if let Some(stop) = &mut crf.stop {
        stop.copy_from_slice(s);
    }
}

/// Assembled context tokens per sentence id.
pub type ContextMap = HashMap<String, Vec<Token>>;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub view: ViewTag,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss_components: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub view: ViewTag,
    pub metrics: Prf,
    pub predictions: Vec<Vec<String>>,
}

fn lattices(
    dataset: &Dataset,
    contexts: Option<&ContextMap>,
    model: &Model,
    view: ViewTag,
    sep_token: &str,
) -> Result<Vec<ScoreLattice>> {
    let empty = vec![Token::new(sep_token).ok_or_else(|| Error::Config("empty separator".into()))?];
    dataset
        .sentences
        .par_iter()
        .map(|s| {
            let context = match (view, &model.encoder) {
                (ViewTag::Original, _) => None,
                (ViewTag::Retrieval, Encoder::External(_)) => Some(
                    contexts
                        .and_then(|c| c.get(&s.id))
                        .map_or(empty.as_slice(), Vec::as_slice),
                ),
                (ViewTag::Retrieval, Encoder::Hash(_)) => Some(
                    contexts
                        .ok_or_else(|| Error::Config("the retrieval view needs contexts".into()))?
                        .get(&s.id)
                        .map_or(empty.as_slice(), Vec::as_slice),
                ),
            };
            let ex = Example {
                id: &s.id,
                tokens: &s.tokens,
                gold: None,
                context,
            };
            Ok(view_state(model, &ex, view)?.lattice)
        })
        .collect()
}

/// Label sequences the model assigns under `view`.
pub fn predict(
    dataset: &Dataset,
    contexts: Option<&ContextMap>,
    model: &Model,
    view: ViewTag,
    sep_token: &str,
) -> Result<Vec<Vec<String>>> {
    Ok(lattices(dataset, contexts, model, view, sep_token)?
        .into_iter()
        .map(|lattice| {
            let (path, _) = lattice.viterbi();
            path.into_iter().map(|y| model.labels[y].clone()).collect()
        })
        .collect())
}

/// Per-token label distribution of one sentence, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRecord {
    pub sentence_id: String,
    pub view: ViewTag,
    pub labels: Vec<String>,
    pub q: Vec<Vec<f64>>,
}

/// Posterior label marginals of every sentence under `view`.
pub fn marginals(
    dataset: &Dataset,
    contexts: Option<&ContextMap>,
    model: &Model,
    view: ViewTag,
    sep_token: &str,
) -> Result<Vec<MarginalRecord>> {
    let tables = lattices(dataset, contexts, model, view, sep_token)?;
    Ok(dataset
        .sentences
        .iter()
        .zip(tables)
        .map(|(s, lattice)| {
            let table = lattice.marginals();
            MarginalRecord {
                sentence_id: s.id.clone(),
                view,
                labels: model.labels.clone(),
                q: (0..table.len()).map(|i| table.q.row(i).to_vec()).collect(),
            }
        })
        .collect())
}

/// Entity-level scores of the model's predictions under `view`.
pub fn evaluate(
    dataset: &Dataset,
    contexts: Option<&ContextMap>,
    model: &Model,
    view: ViewTag,
    sep_token: &str,
) -> Result<EvalReport> {
    let known = model.label_index();
    let unknown: Vec<String> = dataset
        .label_set
        .iter()
        .filter(|l| !known.contains_key(l.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownLabels(unknown));
    }
    let predictions = predict(dataset, contexts, model, view, sep_token)?;
    let metrics = entity_f1(&dataset.gold(), &predictions)?;
    Ok(EvalReport {
        view,
        metrics,
        predictions,
    })
}

fn gold_indices(sentence: &LabeledSentence, index: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let labels = sentence
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sentence {} has no labels", sentence.id)))?;
    labels
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownLabels(vec![l.clone()]))
        })
        .collect()
}

/// Training inputs beyond the configuration.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub dev: Option<&'a Dataset>,
    pub contexts: Option<&'a ContextMap>,
    pub unlabeled: Option<&'a Dataset>,
    pub sep_token: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Labeled(usize),
    Unlabeled(usize),
}

/// Order of labeled and unlabeled batches in one epoch: `alternation.labeled`
/// labeled batches, then `alternation.unlabeled` unlabeled ones, repeated
/// until the labeled batches run out. Unlabeled batches cycle if needed.
pub fn epoch_schedule(labeled_batches: usize, unlabeled_batches: usize, alternation: Alternation) -> Vec<Step> {
    let mut out = Vec::new();
    let mut u = 0;
    for l in 0..labeled_batches {
        out.push(Step::Labeled(l));
        let round_done = (l + 1) % alternation.labeled == 0 || l + 1 == labeled_batches;
        if round_done && unlabeled_batches > 0 {
            for _ in 0..alternation.unlabeled {
                out.push(Step::Unlabeled(u % unlabeled_batches));
                u += 1;
            }
        }
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<MetricsRecord>,
}

struct Prepared<'a> {
    sentence: &'a LabeledSentence,
    gold: Option<Vec<usize>>,
    context: Option<&'a [Token]>,
}

impl Prepared<'_> {
    fn example(&self) -> Example<'_> {
        Example {
            id: &self.sentence.id,
            tokens: &self.sentence.tokens,
            gold: self.gold.as_deref(),
            context: self.context,
        }
    }
}

fn prepare<'a>(
    dataset: &'a Dataset,
    model: &Model,
    data: &TrainData<'a>,
    empty: &'a [Token],
    config: &TrainConfig,
    labeled: bool,
) -> Result<Vec<Prepared<'a>>> {
    let index = model.label_index();
    dataset
        .sentences
        .iter()
        .map(|s| {
            let gold = labeled.then(|| gold_indices(s, &index)).transpose()?;
            let context = if config.mode.needs_context() {
                match data.contexts.and_then(|c| c.get(&s.id)) {
                    Some(c) => Some(c.as_slice()),
                    None if config.strict_contexts => {
                        return Err(Error::Data(format!("no contexts for sentence {}", s.id)))
                    }
                    None => Some(empty),
                }
            } else {
                None
            };
            Ok(Prepared {
                sentence: s,
                gold,
                context,
            })
        })
        .collect()
}

fn batch_gradients(
    model: &Model,
    batch: &[&Prepared<'_>],
    config: &TrainConfig,
    supervised: bool,
) -> Result<(LossReport, Gradients)> {
    let parts: Vec<(LossReport, Gradients)> = batch
        .par_iter()
        .map(|p| {
            let ex = p.example();
            if supervised {
                total_loss(model, &ex, config)
            } else {
                unlabeled_loss(model, &ex, config)
            }
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut report = LossReport::default();
    let mut grads = Gradients::zeros(model);
    for (r, g) in &parts {
        report.add(r);
        grads.axpy(scale, g);
    }
    if let Some(max) = config.clip_norm {
        let norm = grads.squared_norm().sqrt();
        if norm > max {
            let c = max / norm;
            let mut clipped = Gradients::zeros(model);
            clipped.axpy(c, &grads);
            grads = clipped;
        }
    }
    Ok((report, grads))
}

/// Trains from `model`, returning the parameters with the best dev F1 under the
/// mode's selection view (the final ones when there is no dev set).
pub fn train_from(mut model: Model, data: &TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.unlabeled.is_some() && !config.mode.is_cl() {
        return Err(Error::Config(format!(
            "unlabeled data needs a consistency mode, got {}",
            config.mode
        )));
    }
    let empty = vec![Token::new(data.sep_token).ok_or_else(|| Error::Config("empty separator".into()))?];
    let labeled = prepare(data.train, &model, data, &empty, config, true)?;
    let unlabeled = match data.unlabeled {
        Some(u) => prepare(u, &model, data, &empty, config, false)?,
        None => Vec::new(),
    };

    let mut opt = AdamW::new(&model, config.encoder_lr, config.crf_lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let views: Vec<ViewTag> = if config.mode.needs_context() || data.contexts.is_some() {
        vec![ViewTag::Original, ViewTag::Retrieval]
    } else {
        vec![ViewTag::Original]
    };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
        u_order.shuffle(&mut rng);

        let l_batches: Vec<Vec<&Prepared>> = order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| &labeled[i]).collect())
            .collect();
        let u_batches: Vec<Vec<&Prepared>> = u_order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| &unlabeled[i]).collect())
            .collect();

        let mut epoch_loss = LossReport::default();
        for step in epoch_schedule(l_batches.len(), u_batches.len(), config.alternation) {
            let (report, grads) = match step {
                Step::Labeled(b) => batch_gradients(&model, &l_batches[b], config, true)?,
                Step::Unlabeled(b) => batch_gradients(&model, &u_batches[b], config, false)?,
            };
            epoch_loss.add(&report);
            opt.step(&mut model, &grads);
        }
        let epoch_loss = epoch_loss.scaled(1.0 / labeled.len() as f64);

        if let Some(dev) = data.dev {
            let mut selection_f1 = None;
            for &view in &views {
                let r = evaluate(dev, data.contexts, &model, view, data.sep_token)?;
                if view == config.mode.selection_view() {
                    selection_f1 = Some(r.metrics.f1);
                }
                log.push(MetricsRecord {
                    epoch,
                    split: dev.split.to_string(),
                    view,
                    precision: r.metrics.precision,
                    recall: r.metrics.recall,
                    f1: r.metrics.f1,
                    loss_components: epoch_loss,
                });
            }
            let f1 = selection_f1.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.clone()));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs, model),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

/// Training label set followed by any dev-only labels.
pub fn training_labels(data: &TrainData<'_>) -> Vec<String> {
    let mut labels = data.train.label_set.clone();
    if let Some(dev) = data.dev {
        for l in &dev.label_set {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    labels
}

/// Initializes a hash-encoder model over the training label set and trains it.
pub fn train(data: &TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::init(training_labels(data), config)?;
    train_from(model, data, config)
}

const MAGIC: &[u8; 8] = b"RAGTAGCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    labels: Vec<String>,
    encoder: Option<HashFeatureSpec>,
    hidden: usize,
    stop_row: bool,
    bio_mask: Option<Vec<bool>>,
    config: TrainConfig,
}

/// Saved model plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Layout: 8-byte magic `RAGTAGCK`, a version byte, a little-endian `u32`
    /// header length, a JSON header, then little-endian `f64` parameters: the
    /// encoder projection (feature-major), CRF emission, transition and stop.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = CheckpointHeader {
            labels: self.model.labels.clone(),
            encoder: self.model.hash_params().map(|p| p.spec.clone()),
            hidden: self.model.crf.hidden(),
            stop_row: self.model.crf.stop.is_some(),
            bio_mask: self.model.crf.mask.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        let mut put = |xs: &[f64]| -> Result<()> {
            for x in xs {
                out.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        if let Some(p) = self.model.hash_params() {
            put(p.as_slice())?;
        }
        put(&flatten_crf(&self.model.crf))?;
        Ok(())
    }

    /// Reads a checkpoint. Models over external representations need the
    /// embedding store they were trained with.
    pub fn read<R: Read>(mut src: R, external: Option<Arc<EmbeddingStore>>) -> Result<Self> {
        let mut magic = [0u8; 9];
        src.read_exact(&mut magic)?;
        if &magic[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if magic[8] != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", magic[8])));
        }
        let mut len = [0u8; 4];
        src.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        src.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut rest = Vec::new();
        src.read_to_end(&mut rest)?;
        if rest.len() % 8 != 0 {
            return Err(Error::Checkpoint("truncated parameter block".into()));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();

        let t = header.labels.len();
        let mut crf = CrfParams::zeros(t, header.hidden);
        if header.stop_row {
            crf = crf.with_stop();
        }
        crf.mask = header.bio_mask;
        let crf_len = crf_param_count(&crf);
        let (encoder, crf_values) = match header.encoder {
            Some(spec) => {
                let enc_len = spec.dims * header.hidden;
                if values.len() != enc_len + crf_len {
                    return Err(Error::Checkpoint("parameter count mismatch".into()));
                }
                let mut p = EncoderParams::zeros(spec, header.hidden)?;
                p.as_mut_slice().copy_from_slice(&values[..enc_len]);
                (Encoder::Hash(p), &values[enc_len..])
            }
            None => {
                let store = external.ok_or_else(|| {
                    Error::Checkpoint("model uses external representations; supply the embedding dump".into())
                })?;
                if values.len() != crf_len {
                    return Err(Error::Checkpoint("parameter count mismatch".into()));
                }
                (Encoder::External(store), &values[..])
            }
        };
        unflatten_crf(&mut crf, crf_values);
        Ok(Self {
            model: Model {
                encoder,
                crf,
                labels: header.labels,
            },
            config: header.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: 3,
            init_scale: 0.5,
            spec: HashFeatureSpec {
                dims: 64,
                window: 1,
                char_ngrams: vec![2],
                hash_seed: 3,
                context_cooccurrence: true,
            },
            ..TrainConfig::default()
        }
    }

    fn labels() -> Vec<String> {
        ["O", "B-LOC", "B-PER"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn l2_examples() {
        let v = EmbeddingMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), ViewTag::Original);
        let same = ViewPair {
            original: v.clone(),
            retrieval: EmbeddingMatrix::new(v.rows.clone(), ViewTag::Retrieval),
        };
        let (loss, g) = cl_l2_loss(&same).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        let shifted = ViewPair {
            original: v.clone(),
            retrieval: EmbeddingMatrix::new(Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap(), ViewTag::Retrieval),
        };
        let (loss, g) = cl_l2_loss(&shifted).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.row(0), &[0.0, -2.0]);

        let bad = ViewPair {
            original: v,
            retrieval: EmbeddingMatrix::new(Matrix::zeros(2, 2), ViewTag::Retrieval),
        };
        assert!(cl_l2_loss(&bad).is_err());
    }

    #[test]
    fn wo_context_reports_only_nll() {
        let config = tiny_config(Mode::WoContext);
        let model = Model::init(labels(), &config).unwrap();
        let tokens = tokenize("Rome is far");
        let gold = [1, 0, 0];
        let ex = Example {
            id: "s",
            tokens: &tokens,
            gold: Some(&gold),
            context: None,
        };
        let (r, _) = total_loss(&model, &ex, &config).unwrap();
        assert!(r.nll > 0.0);
        assert_eq!((r.nll_ext, r.cl), (0.0, 0.0));
        assert_eq!(r.total, r.nll);
    }

    #[test]
    fn context_modes_need_context() {
        let config = tiny_config(Mode::ClKl);
        let model = Model::init(labels(), &config).unwrap();
        let tokens = tokenize("Rome");
        let ex = Example {
            id: "s",
            tokens: &tokens,
            gold: Some(&[1]),
            context: None,
        };
        assert!(matches!(total_loss(&model, &ex, &config), Err(Error::Config(_))));
        let wo = tiny_config(Mode::WoContext);
        assert!(matches!(unlabeled_loss(&model, &ex, &wo), Err(Error::Config(_))));
    }

    #[test]
    fn collapsed_views_zero_l2_and_entropy_kl() {
        let mut config = tiny_config(Mode::ClBoth);
        config.spec.context_cooccurrence = false;
        let model = Model::init(labels(), &config).unwrap();
        let tokens = tokenize("Rome is far");
        let ctx = tokenize("[SEP] rome is a city");
        let gold = [1, 0, 0];
        let ex = Example {
            id: "s",
            tokens: &tokens,
            gold: Some(&gold),
            context: Some(&ctx),
        };
        let (r, _) = total_loss(&model, &ex, &config).unwrap();
        assert_eq!(r.cl_l2, 0.0);
        assert!(r.kl_divergence.abs() < 1e-10);
        assert!((r.nll - r.nll_ext).abs() < 1e-12);
    }

    #[test]
    fn schedule_alternates() {
        use Step::*;
        let s = epoch_schedule(4, 4, Alternation::default());
        assert_eq!(
            s,
            vec![Labeled(0), Unlabeled(0), Labeled(1), Unlabeled(1), Labeled(2), Unlabeled(2), Labeled(3), Unlabeled(3)]
        );
        let s = epoch_schedule(3, 1, Alternation { labeled: 2, unlabeled: 1 });
        assert_eq!(s, vec![Labeled(0), Labeled(1), Unlabeled(0), Labeled(2), Unlabeled(0)]);
        assert_eq!(epoch_schedule(2, 0, Alternation::default()), vec![Labeled(0), Labeled(1)]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("cl_xx".parse::<Mode>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut config = tiny_config(Mode::ClKl);
        config.stop_row = true;
        config.bio_mask = true;
        let model = Model::init(labels(), &config).unwrap();
        let ck = Checkpoint { model, config };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read(buf.as_slice(), None).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
        buf[8] = 9;
        assert!(Checkpoint::read(buf.as_slice(), None).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            crf_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::large_corpus().epochs, 5);
    }
}
