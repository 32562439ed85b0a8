//! Optimizers and the joint `S`/`W` training loop.
//!
//! Training runs in two phases: `main`, where the kernel, biases and the
//! scheme are updated together (the scheme projected back onto its
//! constraints after every step), then `finetune`, where the scheme is
//! frozen and only kernels and biases move.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, ParamKind};
use crate::real::Real;
use crate::scheme::{project_slice, ConstraintFlags};
use crate::seed::named_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![F::zero(); len], v: vec![F::zero(); len], t: 0 }
    }
}

fn check_finite<F: Real>(grads: &[F], step: u64) -> Result<()> {
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training { step: step as usize, message: format!("non-finite gradient at index {pos}") });
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Real>(params: &mut [F], grads: &[F], state: &mut AdamState<F>, hyper: &AdamHyper, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    check_finite(grads, state.t + 1)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::from_f64(hyper.beta1), F::from_f64(hyper.beta2));
    let c1 = F::from_f64(1.0 - hyper.beta1.powi(t));
    let c2 = F::from_f64(1.0 - hyper.beta2.powi(t));
    let (lr, eps) = (F::from_f64(lr), F::from_f64(hyper.epsilon));
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain SGD with optional heavy-ball momentum; `velocity` is the state.
pub fn sgd_step<F: Real>(params: &mut [F], grads: &[F], velocity: &mut [F], momentum: f64, lr: f64, step: u64) -> Result<()> {
    if params.len() != grads.len() || velocity.len() != params.len() {
        return Err(Error::shape("sgd: parameter, gradient and velocity lengths differ"));
    }
    check_finite(grads, step)?;
    let (mu, lr) = (F::from_f64(momentum), F::from_f64(lr));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamHyper),
    Sgd { momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `initial * gamma^(epoch / every)`, epochs counted from 0.
    StepDecay { initial: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::StepDecay { initial, gamma, every } => initial * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub flags: ConstraintFlags,
    /// Root seed for batch order and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam(AdamHyper::default()),
            schedule: LrSchedule::Constant(1e-3),
            batch_size: 64,
            epochs_main: 10,
            epochs_finetune: 5,
            flags: ConstraintFlags::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BestModel<F> {
    pub epoch: usize,
    pub test_error: f64,
    pub model: Classifier<F>,
}

#[derive(Debug, Clone)]
pub struct TrainReport<F> {
    pub history: Vec<EpochMetrics>,
    /// Lowest test error seen at the end of an epoch (first one on ties).
    pub best: Option<BestModel<F>>,
    pub steps: usize,
}

/// Hooks into the training loop. All methods default to doing nothing.
pub trait TrainObserver<F> {
    fn after_step(&mut self, _step: usize, _phase: Phase, _model: &Classifier<F>) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _metrics: &EpochMetrics, _model: &Classifier<F>) -> Result<()> {
        Ok(())
    }

    fn after_phase(&mut self, _phase: Phase, _model: &Classifier<F>) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver<F> for () {}

enum SlotState<F> {
    Adam(AdamState<F>),
    Sgd(Vec<F>, u64),
}

/// Copies the given samples into a batch matrix.
pub fn gather_batch<F: Real>(data: &Dataset, indices: &[usize]) -> (Array2<F>, Vec<usize>) {
    let n = data.features();
    let images = data.images();
    let mut x = Array2::<F>::zeros((indices.len(), n));
    for (mut row, &i) in x.rows_mut().into_iter().zip(indices) {
        row.iter_mut().zip(images.row(i)).for_each(|(d, &s)| *d = F::from_f64(s as f64));
    }
    (x, indices.iter().map(|&i| data.labels()[i]).collect())
}

/// Fraction of misclassified samples.
pub fn evaluate<F: Real>(model: &Classifier<F>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, labels) = gather_batch::<F>(data, chunk);
        let pred = model.predict(x.view())?;
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Trains `model` in place for `epochs_main` joint epochs then
/// `epochs_finetune` epochs with the scheme frozen.
pub fn train<F: Real>(
    model: &mut Classifier<F>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainReport<F>> {
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    config.flags.validate()?;
    if train_set.features() != model.input.in_features() {
        return Err(Error::shape(format!(
            "model expects {} features, dataset has {}",
            model.input.in_features(),
            train_set.features()
        )));
    }
    if let Some(&bad) = train_set.labels().iter().find(|&&l| l >= model.classes()) {
        return Err(Error::invalid(format!("label {bad} out of range for a {}-class model", model.classes())));
    }

    let mut order_rng = named_rng(config.seed, "batch-order");
    let mut dropout_rng = named_rng(config.seed, "dropout");
    let mut states: Vec<SlotState<F>> = model
        .params_mut()
        .iter()
        .map(|s| match config.optimizer {
            OptimizerKind::Adam(_) => SlotState::Adam(AdamState::new(s.values.len())),
            OptimizerKind::Sgd { .. } => SlotState::Sgd(vec![F::zero(); s.values.len()], 0),
        })
        .collect();
    let omega = model.receptive().map(|l| l.scheme.omega());
    let project = config.flags.positive || config.flags.normalized;

    let mut report = TrainReport { history: Vec::new(), best: None, steps: 0 };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let phases = [(Phase::Main, config.epochs_main), (Phase::Finetune, config.epochs_finetune)];
    let mut epoch = 0;
    for (phase, epochs) in phases {
        if epochs == 0 {
            continue;
        }
        if phase == Phase::Finetune {
            if let Some(l) = model.receptive_mut() {
                l.scheme.frozen = true;
            }
        }
        for _ in 0..epochs {
            let lr = config.schedule.at(epoch);
            epoch += 1;
            order.shuffle(&mut order_rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let (x, labels) = gather_batch::<F>(train_set, chunk);
                let (loss, mut grads) = model.loss_and_grads(x.view(), &labels, Some(&mut dropout_rng))?;
                report.steps += 1;
                if !loss.is_finite() {
                    return Err(Error::Training { step: report.steps, message: format!("non-finite loss {loss}") });
                }
                loss_sum += loss.to_f64() * chunk.len() as f64;
                apply_step(model, &mut grads.slots, &mut states, config, lr, omega, project, report.steps)?;
                observer.after_step(report.steps, phase, model)?;
            }
            let metrics = EpochMetrics {
                epoch,
                phase,
                train_loss: loss_sum / train_set.len() as f64,
                test_error: test_set.map(|t| evaluate(model, t, 256)).transpose()?,
            };
            if let Some(err) = metrics.test_error {
                if report.best.as_ref().is_none_or(|b| err < b.test_error) {
                    report.best = Some(BestModel { epoch, test_error: err, model: model.clone() });
                }
            }
            observer.after_epoch(&metrics, model)?;
            report.history.push(metrics);
        }
        observer.after_phase(phase, model)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn apply_step<F: Real>(
    model: &mut Classifier<F>,
    grads: &mut [Vec<F>],
    states: &mut [SlotState<F>],
    config: &TrainConfig,
    lr: f64,
    omega: Option<usize>,
    project: bool,
    step: usize,
) -> Result<()> {
    let frozen = model.input.scheme_frozen();
    let l2 = F::from_f64(config.flags.l2_weight);
    for ((slot, grad), state) in model.params_mut().into_iter().zip(grads.iter_mut()).zip(states.iter_mut()) {
        if slot.kind == ParamKind::InputScheme && frozen {
            continue;
        }
        if slot.kind == ParamKind::InputKernel && config.flags.l2_weight > 0.0 {
            grad.iter_mut().zip(slot.values.iter()).for_each(|(g, &w)| *g += l2 * w);
        }
        let result = match (state, config.optimizer) {
            (SlotState::Adam(s), OptimizerKind::Adam(h)) => adam_step(slot.values, grad, s, &h, lr),
            (SlotState::Sgd(v, t), OptimizerKind::Sgd { momentum }) => {
                *t += 1;
                sgd_step(slot.values, grad, v, momentum, lr, *t)
            }
            _ => unreachable!("optimizer state matches config"),
        };
        result.map_err(|e| match e {
            Error::Training { message, .. } => Error::Training { step, message: format!("{:?}: {message}", slot.kind) },
            other => other,
        })?;
        if slot.kind == ParamKind::InputScheme && project {
            project_slice(slot.values, omega.expect("scheme slot implies receptive layer"), &config.flags);
        }
    }
    Ok(())
}

/// Writes `epoch,phase,train_loss,test_error_rate` rows.
pub fn write_metrics_csv<W: Write>(history: &[EpochMetrics], mut w: W) -> Result<()> {
    writeln!(w, "epoch,phase,train_loss,test_error_rate")?;
    for m in history {
        let err = m.test_error.map(|e| format!("{e:.6}")).unwrap_or_default();
        writeln!(w, "{},{},{:.9},{}", m.epoch, m.phase, m.train_loss, err)?;
    }
    Ok(())
}
