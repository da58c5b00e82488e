//! Symmetric InfoNCE, the learning-rate schedule, and the training loops.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, GradError, Param, Tape, Var};
use crate::matrix::{norm, Matrix};
use crate::projector::{ProjectorError, ProjectorStack, TokenBundle};

/// Largest tolerated deviation of an input row norm from 1.
pub const UNIT_ROW_TOLERANCE: f64 = 1e-3;
pub const MIN_LOGIT_SCALE: f64 = 1.0;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("row {row} of the {side} batch has norm {norm}, expected 1")]
    NonUnitRows {
        side: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("batch needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("corpus has {count} pairs, fewer than batch size {batch}")]
    CorpusTooSmall { count: usize, batch: usize },
    #[error("vision and text sides have {0} and {1} items")]
    UnpairedCorpus(usize, usize),
    #[error("stack has no trainable parameters")]
    NothingToTrain,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step}: {source}")]
    NonFinite {
        epoch: usize,
        step: usize,
        source: GradError,
        /// Parameters and temperature at the end of the last completed epoch.
        last_good: Box<(ProjectorStack, TemperatureParam)>,
    },
    #[error("linear fit diverged at iteration {iteration}: {source}")]
    Diverged { iteration: usize, source: GradError },
}

/// Learnable logit scale, stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParam {
    pub log_scale: f64,
}

impl Default for TemperatureParam {
    /// Temperature 0.07.
    fn default() -> Self {
        Self::from_temperature(0.07)
    }
}

impl TemperatureParam {
    pub fn from_temperature(t: f64) -> Self {
        Self {
            log_scale: libm::log(1.0 / t),
        }
    }

    pub fn scale(&self) -> f64 {
        libm::exp(self.log_scale)
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Keeps the logit scale in `[1, 100]`; in-range values are left bit-identical.
    pub fn clamp(&mut self) {
        let s = self.scale();
        if s < MIN_LOGIT_SCALE {
            self.log_scale = 0.0;
        } else if s > MAX_LOGIT_SCALE {
            self.log_scale = libm::log(MAX_LOGIT_SCALE);
        }
    }
}

/// `½ [CE(rows → diagonal) + CE(columns → diagonal)]` of `scale · img · txtᵀ`.
pub fn infonce_on_tape(tape: &mut Tape, img: Var, txt: Var, scale: Var) -> Var {
    let txt_t = tape.transpose(txt);
    let sim = tape.matmul(img, txt_t);
    let logits = tape.scale_by(sim, scale);
    let rows = tape.cross_entropy_diag(logits);
    let logits_t = tape.transpose(logits);
    let cols = tape.cross_entropy_diag(logits_t);
    let both = tape.add(rows, cols);
    tape.scale(both, 0.5)
}

fn check_unit_rows(m: &Matrix, side: &'static str) -> Result<(), TrainError> {
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !((n - 1.0).abs() <= UNIT_ROW_TOLERANCE) {
            return Err(TrainError::NonUnitRows {
                side,
                row: i,
                norm: n,
            });
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over unit-norm, index-paired rows.
pub fn infonce_loss(
    img: &Matrix,
    txt: &Matrix,
    temp: &TemperatureParam,
) -> Result<f64, TrainError> {
    if img.shape() != txt.shape() {
        return Err(TrainError::ShapeMismatch(img.shape(), txt.shape()));
    }
    if img.rows() < 2 {
        return Err(TrainError::TooFewRows(img.rows()));
    }
    check_unit_rows(img, "image")?;
    check_unit_rows(txt, "text")?;
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let t = tape.constant(txt.clone());
    let s = tape.constant(Matrix::filled(1, 1, temp.scale()));
    let loss = infonce_on_tape(&mut tape, i, t, s);
    tape.check_finite().map_err(|source| TrainError::Diverged {
        iteration: 0,
        source,
    })?;
    Ok(tape.scalar(loss))
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    peak_lr * 0.5 * (1.0 + libm::cos(PI * progress))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub freeze_temperature: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            peak_lr: 1e-3,
            warmup_epochs: 1,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
            freeze_temperature: false,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "peak_lr must be finite and non-negative",
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::InvalidConfig("warmup longer than training"));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch size must be at least 2"));
        }
        Ok(())
    }
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &[Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            kind,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// `decay[i]` selects which parameters get decoupled weight decay.
    fn step(&mut self, params: &mut [Param], decay: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    for (w, g) in p.value.as_mut_slice().iter_mut().zip(p.grad.as_slice()) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - libm::pow(cfg.beta1, f64::from(self.t));
                let bc2 = 1.0 - libm::pow(cfg.beta2, f64::from(self.t));
                for (i, p) in params.iter_mut().enumerate() {
                    let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
                    let m = self.m[i].as_mut_slice();
                    let v = self.v[i].as_mut_slice();
                    for (k, (w, &g)) in p
                        .value
                        .as_mut_slice()
                        .iter_mut()
                        .zip(p.grad.as_slice())
                        .enumerate()
                    {
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        *w -= lr * (mh / (libm::sqrt(vh) + cfg.adam_eps) + wd * *w);
                    }
                }
            }
        }
    }
}

/// Paired vision/text bundles for projector training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCorpus {
    pub vision: Vec<TokenBundle>,
    pub text: Vec<TokenBundle>,
}

impl TrainCorpus {
    pub fn new(vision: Vec<TokenBundle>, text: Vec<TokenBundle>) -> Result<Self, TrainError> {
        if vision.len() != text.len() {
            return Err(TrainError::UnpairedCorpus(vision.len(), text.len()));
        }
        Ok(Self { vision, text })
    }

    /// Pooled-only corpus from two `count × dim` matrices.
    pub fn pooled(vision: &Matrix, text: &Matrix) -> Result<Self, TrainError> {
        Self::new(
            (0..vision.rows())
                .map(|i| TokenBundle::pooled_vision(vision.row(i)))
                .collect(),
            (0..text.rows())
                .map(|i| TokenBundle::pooled_text(text.row(i)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vision.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vision.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub temperature: f64,
    pub last_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub stack: ProjectorStack,
    pub temperature: TemperatureParam,
    /// Snapshot of the epoch with the lowest mean loss.
    pub best: (ProjectorStack, TemperatureParam),
    pub report: TrainReport,
}

/// One symmetric-InfoNCE forward/backward over a batch. The last entry of
/// `params` is the temperature's log-scale.
pub fn batch_loss_and_grads(
    stack: &ProjectorStack,
    params: &mut [Param],
    corpus: &TrainCorpus,
    batch: &[usize],
) -> Result<Result<f64, GradError>, ProjectorError> {
    let vis: Vec<&TokenBundle> = batch.iter().map(|&i| &corpus.vision[i]).collect();
    let txt: Vec<&TokenBundle> = batch.iter().map(|&i| &corpus.text[i]).collect();
    let vb = stack.vision_batch(&vis)?;
    let tb = stack.text_batch(&txt)?;
    let k = params.len() - 1;
    Ok(grad::forward_backward(params, |tape, vars| {
        let bound = stack.bind(&vars[..k]);
        let img = bound.vision(tape, &vb);
        let t = bound.text(tape, &tb);
        let scale = tape.exp(vars[k]);
        infonce_on_tape(tape, img, t, scale)
    }))
}

/// Trains projector parameters and temperature with symmetric InfoNCE.
pub fn train_projectors(
    corpus: &TrainCorpus,
    stack: ProjectorStack,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_projectors_with(corpus, stack, cfg, |_, _, _| {})
}

/// [`train_projectors`] with a hook called after each epoch.
pub fn train_projectors_with<F>(
    corpus: &TrainCorpus,
    mut stack: ProjectorStack,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochSummary, &ProjectorStack, &TemperatureParam),
{
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(TrainError::CorpusTooSmall {
            count: corpus.len(),
            batch: cfg.batch_size,
        });
    }
    if stack.num_params() == 0 {
        return Err(TrainError::NothingToTrain);
    }

    let mut temp = TemperatureParam::default();
    let mut params = stack.to_params();
    params.push(Param::new(
        "log_scale",
        Matrix::filled(1, 1, temp.log_scale),
    ));
    let k = params.len() - 1;
    let decay: Vec<bool> = params
        .iter()
        .map(|p| p.value.rows() > 1 && p.name != "log_scale")
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, &params);

    let steps_per_epoch = corpus.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        best_epoch: 0,
        best_loss: f64::INFINITY,
    };
    let mut best = (stack.clone(), temp);
    let mut last_good = (stack.clone(), temp);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks_exact(cfg.batch_size) {
            let result = batch_loss_and_grads(&stack, &mut params, corpus, batch)?;
            let loss = result.map_err(|source| TrainError::NonFinite {
                epoch,
                step,
                source,
                last_good: Box::new(last_good.clone()),
            })?;
            loss_sum += loss;
            lr = cosine_lr_at(step, total_steps, warmup_steps, cfg.peak_lr);
            if cfg.freeze_temperature {
                params[k].zero_grad();
            }
            opt.step(&mut params, &decay, lr, cfg);
            temp.log_scale = params[k].value[(0, 0)];
            temp.clamp();
            params[k].value[(0, 0)] = temp.log_scale;
            stack.load_params(&params[..k]);
            step += 1;
        }

        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            temperature: temp.temperature(),
            last_lr: lr,
        };
        if summary.mean_loss < report.best_loss {
            report.best_loss = summary.mean_loss;
            report.best_epoch = epoch;
            best = (stack.clone(), temp);
        }
        on_epoch(&summary, &stack, &temp);
        report.epochs.push(summary);
        last_good = (stack.clone(), temp);
    }
    report.steps = step;
    Ok(TrainOutcome {
        stack,
        temperature: temp,
        best,
        report,
    })
}

/// Starting point of the linear map in [`fit_linear_map`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearInit {
    Identity,
    /// Entries drawn from `Uniform[−1/√d, 1/√d]`.
    Uniform {
        seed: u64,
    },
    Given(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub temperature: f64,
    pub init: LinearInit,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.01,
            temperature: 0.07,
            init: LinearInit::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub w: Matrix,
    pub initial_loss: f64,
    /// Loss at the returned `w`, after the last update.
    pub final_loss: f64,
    /// Running minimum over every evaluated iterate.
    pub min_loss: f64,
}

fn linear_map_loss_on_tape(
    tape: &mut Tape,
    a: &Matrix,
    b_unit: &Matrix,
    w: Var,
    scale: f64,
) -> Var {
    let a = tape.constant(a.clone());
    let mapped = tape.matmul(a, w);
    let img = tape.l2_normalize_rows(mapped);
    let txt = tape.constant(b_unit.clone());
    let s = tape.constant(Matrix::filled(1, 1, scale));
    infonce_on_tape(tape, img, txt, s)
}

/// Symmetric InfoNCE between `normalize(A·W)` and `normalize(B)` at a fixed temperature.
pub fn linear_map_loss(
    a: &Matrix,
    b: &Matrix,
    w: &Matrix,
    temperature: f64,
) -> Result<f64, GradError> {
    let b_unit = b.normalize_rows(grad::NORM_EPS);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let loss = linear_map_loss_on_tape(&mut tape, a, &b_unit, wv, 1.0 / temperature);
    tape.check_finite()?;
    Ok(tape.scalar(loss))
}

/// Full-batch SGD on a single `d × d` map sending `A` towards `B` under the CLIP loss.
pub fn fit_linear_map(
    a: &Matrix,
    b: &Matrix,
    cfg: &LinearFitConfig,
) -> Result<LinearFit, TrainError> {
    if a.shape() != b.shape() {
        return Err(TrainError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.rows() < 2 {
        return Err(TrainError::TooFewRows(a.rows()));
    }
    let d = a.cols();
    let w0 = match &cfg.init {
        LinearInit::Identity => Matrix::identity(d),
        LinearInit::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let bound = 1.0 / libm::sqrt(d as f64);
            Matrix::from_vec(
                d,
                d,
                (0..d * d)
                    .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                    .collect(),
            )
        }
        LinearInit::Given(w) => {
            if w.shape() != (d, d) {
                return Err(TrainError::ShapeMismatch(w.shape(), (d, d)));
            }
            w.clone()
        }
    };
    let b_unit = b.normalize_rows(grad::NORM_EPS);
    let scale = 1.0 / cfg.temperature;
    let mut params = [Param::new("w", w0)];
    let mut initial = f64::NAN;
    let mut min_loss = f64::INFINITY;
    for it in 0..cfg.iterations {
        let loss = grad::forward_backward(&mut params, |tape, v| {
            linear_map_loss_on_tape(tape, a, &b_unit, v[0], scale)
        })
        .map_err(|source| TrainError::Diverged {
            iteration: it,
            source,
        })?;
        if it == 0 {
            initial = loss;
        }
        min_loss = min_loss.min(loss);
        let p = &mut params[0];
        for (w, g) in p.value.as_mut_slice().iter_mut().zip(p.grad.as_slice()) {
            *w -= cfg.lr * g;
        }
    }
    let [p] = params;
    let final_loss = linear_map_loss(a, b, &p.value, cfg.temperature).map_err(|source| {
        TrainError::Diverged {
            iteration: cfg.iterations,
            source,
        }
    })?;
    if cfg.iterations == 0 {
        initial = final_loss;
    }
    Ok(LinearFit {
        w: p.value,
        initial_loss: initial,
        final_loss,
        min_loss: min_loss.min(final_loss),
    })
}
