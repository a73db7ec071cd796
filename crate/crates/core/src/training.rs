//! The two-stage scheme: unsupervised flow-matching pretraining, then joint
//! fine-tuning of backbone and classifier through the unrolled reverse solve,
//! with a frozen-backbone mode for the head-only baseline.
//!
//! All epoch-level randomness is re-derived from (seed, purpose, epoch), so a
//! run resumed from a checkpoint takes exactly the steps the uninterrupted
//! run would have taken.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, NodeId};
use crate::likelihood::{mi_proxy, DivergenceMode, ProbeLaw};
use crate::net::{BoundNet, ParamNet};
use crate::odeint::{integrate_graph, integrate_steps, Direction, SolverKind, TimeGrid};
use crate::optim::{adam_step, scaled_lr, AdamParams, AdamState, LrSchedule};
use crate::paths::{sample_batch, PathSample, PathSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Wall-clock source; the core never touches system time directly.
pub trait Clock {
    fn now_secs(&self) -> f64;
}

/// No-op clock for clockless (or no_std) callers; epochs report 0 elapsed.
pub struct NoClock;

impl Clock for NoClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub path: PathSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    pub fn new(path: PathSpec, seed: u64) -> Self {
        PretrainConfig {
            path,
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-4,
            seed,
            checkpoint_every: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(String::from("batch_size must be >= 1")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config(String::from("checkpoint_every must be >= 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Mixes the one-hot target with uniform mass alpha.
    LabelSmoothing { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub grid: TimeGrid,
    pub solver: SolverKind,
    /// Weight of the flow-matching regularizer in the total loss.
    pub beta: f64,
    pub loss_kind: LossKind,
    /// Update only the classifier head, leaving the flow untouched.
    pub freeze_backbone: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    /// Apply the (batch / 512) learning-rate portability rule.
    pub lr_batch_scaling: bool,
    pub path: PathSpec,
    pub seed: u64,
    /// Evaluate validation accuracy every this many epochs (0 = off).
    pub eval_every: usize,
    /// Log the MI proxy every this many epochs (0 = off).
    pub mi_every: usize,
    pub mi_mode: DivergenceMode,
    pub checkpoint_every: usize,
}

impl FinetuneConfig {
    pub fn new(grid: TimeGrid, path: PathSpec, seed: u64) -> Self {
        FinetuneConfig {
            grid,
            solver: SolverKind::Euler,
            beta: 1.0,
            loss_kind: LossKind::LabelSmoothing { alpha: 0.1 },
            freeze_backbone: false,
            epochs: 100,
            batch_size: 256,
            base_lr: 1.25e-4,
            warmup_epochs: 5,
            min_lr: 1e-6,
            lr_batch_scaling: true,
            path,
            seed,
            eval_every: 1,
            mi_every: 0,
            mi_mode: DivergenceMode::Hutchinson { probes: 8, law: ProbeLaw::Rademacher },
            checkpoint_every: 25,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid.direction != Direction::Infer {
            return Err(Error::Config(String::from("fine-tuning grid must run in the infer direction")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(String::from("batch_size must be >= 1")));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if let LossKind::LabelSmoothing { alpha } = self.loss_kind {
            if !(0.0 < alpha && alpha < 1.0) {
                return Err(Error::Config(format!("label smoothing alpha {alpha} outside (0,1)")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config(String::from("checkpoint_every must be >= 1")));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        let base = if self.lr_batch_scaling {
            scaled_lr(self.base_lr, self.batch_size)
        } else {
            self.base_lr
        };
        let min = if self.lr_batch_scaling {
            scaled_lr(self.min_lr, self.batch_size)
        } else {
            self.min_lr
        };
        LrSchedule {
            base_lr: base,
            warmup_lr: base * 1e-3,
            min_lr: min,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number (resumed runs continue the numbering).
    pub epoch: usize,
    pub fm_loss: f64,
    pub ce_loss: Option<f64>,
    pub total_loss: f64,
    /// Training-split accuracy over the epoch's batches.
    pub accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub mi_train: Option<f64>,
    pub mi_val: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Periodic view of training state for persistence; fires every
/// `checkpoint_every` epochs and at the final epoch.
pub struct Snapshot<'a> {
    pub epoch: usize,
    pub net: &'a ParamNet,
    pub adam: &'a AdamState,
    pub is_final: bool,
}

/// Flow-matching loss node: 1/2 * mean over samples of the squared residual
/// between the recorded velocity and the conditional target.
pub fn fm_loss(g: &mut Graph, net: &BoundNet, samples: &[PathSample]) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::Contract(String::from("fm_loss on an empty sample list")));
    }
    let b = samples.len();
    let d = samples[0].x_t.numel();
    let mut xs = Vec::with_capacity(b * d);
    let mut vs = Vec::with_capacity(b * d);
    let mut ts = Vec::with_capacity(b);
    for s in samples {
        xs.extend_from_slice(s.x_t.data());
        vs.extend_from_slice(s.v_target.data());
        ts.push(s.t);
    }
    let x = g.leaf(Tensor::new(vec![b, d], xs)?);
    let target = g.leaf(Tensor::new(vec![b, d], vs)?);
    let v = net.velocity_rows(g, x, &ts)?;
    let diff = g.sub(v, target)?;
    let sq = g.hadamard(diff, diff)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 0.5 / b as f64)
}

/// The same quantity recomputed on the inference path (no graph); pairs with
/// `fm_loss` as two independent routes to one number.
pub fn fm_loss_value(net: &ParamNet, samples: &[PathSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract(String::from("fm_loss on an empty sample list")));
    }
    let b = samples.len();
    let d = samples[0].x_t.numel();
    let mut xs = Vec::with_capacity(b * d);
    let mut ts = Vec::with_capacity(b);
    for s in samples {
        xs.extend_from_slice(s.x_t.data());
        ts.push(s.t);
    }
    let x = Tensor::new(vec![b, d], xs)?;
    let v = net.velocity_rows(&x, &ts)?;
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut sq = 0.0;
        for (a, t) in v.row(i).iter().zip(s.v_target.data()) {
            sq += (a - t) * (a - t);
        }
        total += sq;
    }
    Ok(0.5 * total / b as f64)
}

/// Mean NLL of the labels under softmax logits, optionally label-smoothed.
pub fn classification_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    class_count: usize,
    kind: LossKind,
) -> Result<NodeId> {
    let (b, c) = g.value(logits).dims2()?;
    if c != class_count {
        return Err(Error::Dim(format!("logits have {c} columns, expected {class_count}")));
    }
    if labels.len() != b {
        return Err(Error::Dim(format!("{b} logit rows vs {} labels", labels.len())));
    }
    let mut targets = Tensor::zeros(vec![b, class_count]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(Error::Contract(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        match kind {
            LossKind::CrossEntropy => {
                targets.data_mut()[i * class_count + y] = 1.0;
            }
            LossKind::LabelSmoothing { alpha } => {
                for j in 0..class_count {
                    targets.data_mut()[i * class_count + j] = alpha / class_count as f64;
                }
                targets.data_mut()[i * class_count + y] += 1.0 - alpha;
            }
        }
    }
    g.cross_entropy(logits, targets)
}

fn batch_rows(points: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = points.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(points.row(i));
    }
    Tensor::new(vec![indices.len(), d], data)
}

fn grads_for(
    grads: &crate::graph::GradMap,
    net: &ParamNet,
    bound: &BoundNet,
    head_only: bool,
) -> Vec<Option<Tensor>> {
    let params = net.params();
    bound
        .param_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if head_only && !net.is_head_param(i) {
                None
            } else {
                Some(grads.get_or_zeros(id, params[i].shape()))
            }
        })
        .collect()
}

/// Unsupervised flow-matching pretraining. Emits snapshots through `sink`
/// every `checkpoint_every` epochs and at the end; `resume` continues a run
/// from (optimizer state, epochs already done).
pub fn pretrain(
    net: &mut ParamNet,
    data: &Tensor,
    cfg: &PretrainConfig,
    resume: Option<(AdamState, usize)>,
    clock: &dyn Clock,
    sink: &mut dyn FnMut(Snapshot<'_>),
) -> Result<TrainReport> {
    cfg.validate()?;
    let (n, _) = data.dims2()?;
    if n == 0 {
        return Err(Error::Contract(String::from("pretrain on empty data")));
    }
    let hyper = AdamParams { learning_rate: cfg.learning_rate, ..AdamParams::default() };
    let (mut adam, start_epoch) = match resume {
        Some((state, done)) => (state, done),
        None => (AdamState::for_params(&net.params(), hyper), 0),
    };
    let names = net.param_names();
    let mut report = TrainReport::default();

    for epoch in start_epoch..cfg.epochs {
        let t0 = clock.now_secs();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let mut sample_rng = Rng::derive(cfg.seed, "path", epoch as u64);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_rows(data, chunk)?;
            let samples = sample_batch(&cfg.path, &batch, &mut sample_rng)?;

            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let loss = fm_loss(&mut g, &bound, &samples)?;
            let loss_value = g.value(loss).item()?;
            let grad_map = g.backward(loss)?;
            let grads = grads_for(&grad_map, net, &bound, false);
            let mut params = net.params_mut();
            adam_step(&mut params, &names, &grads, &mut adam, None)?;

            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
        }

        let epoch_1based = epoch + 1;
        report.epochs.push(EpochRecord {
            epoch: epoch_1based,
            fm_loss: loss_sum / seen as f64,
            ce_loss: None,
            total_loss: loss_sum / seen as f64,
            accuracy: None,
            val_accuracy: None,
            mi_train: None,
            mi_val: None,
            wall_secs: clock.now_secs() - t0,
        });

        let is_final = epoch_1based == cfg.epochs;
        if epoch_1based % cfg.checkpoint_every == 0 || is_final {
            sink(Snapshot { epoch: epoch_1based, net, adam: &adam, is_final });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

fn predict_labels(
    net: &ParamNet,
    points: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
) -> Result<Vec<usize>> {
    let (n, d) = points.dims2()?;
    let chunk = 512usize;
    let mut preds = Vec::with_capacity(n);
    let mut row = 0;
    while row < n {
        let hi = (row + chunk).min(n);
        let batch = Tensor::new(vec![hi - row, d], points.data()[row * d..hi * d].to_vec())?;
        let feats = integrate_steps(solver, net, &batch, grid, grid.cutoff_index)?;
        let logits = net.classify(&feats)?;
        let (b, c) = logits.dims2()?;
        for i in 0..b {
            let row_l = logits.row(i);
            let mut best = 0usize;
            for j in 1..c {
                if row_l[j] > row_l[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
        row = hi;
    }
    Ok(preds)
}

/// Argmax-logit accuracy and confusion matrix on labeled data, with features
/// taken at the grid cutoff.
pub fn evaluate(
    net: &ParamNet,
    data: &LabeledDataset,
    grid: &TimeGrid,
    solver: SolverKind,
) -> Result<EvalResult> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract(String::from("evaluate needs labels")))?;
    let classes = net
        .classes()
        .ok_or_else(|| Error::Config(String::from("evaluate needs a classifier head")))?;
    let preds = predict_labels(net, &data.points, grid, solver)?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for (&truth, &pred) in labels.iter().zip(&preds) {
        if truth >= classes {
            return Err(Error::Contract(format!(
                "label {truth} out of range for {classes}-way head"
            )));
        }
        confusion[truth][pred] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    Ok(EvalResult { accuracy: correct as f64 / labels.len() as f64, confusion })
}

/// Joint fine-tuning: each step integrates x0 to the cutoff feature in
/// differentiable mode, applies the classifier, and optimizes cross-entropy
/// plus beta times a fresh flow-matching regularizer over theta and phi (phi
/// alone when the backbone is frozen). Cosine learning-rate decay with
/// linear warmup.
pub fn finetune(
    net: &mut ParamNet,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &FinetuneConfig,
    clock: &dyn Clock,
    sink: &mut dyn FnMut(Snapshot<'_>),
) -> Result<TrainReport> {
    cfg.validate()?;
    let labels_all = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract(String::from("fine-tuning needs labels")))?;
    let classes = net
        .classes()
        .ok_or_else(|| Error::Config(String::from("fine-tuning needs a classifier head")))?;
    if train.class_count > classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the head outputs {classes}",
            train.class_count
        )));
    }
    let n = train.len();
    let hyper = AdamParams { learning_rate: cfg.base_lr, ..AdamParams::default() };
    let mut adam = AdamState::for_params(&net.params(), hyper);
    let names = net.param_names();
    let schedule = cfg.schedule();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let t0 = clock.now_secs();
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(cfg.seed, "ft-shuffle", epoch as u64).shuffle(&mut order);
        let mut sample_rng = Rng::derive(cfg.seed, "ft-path", epoch as u64);

        let mut fm_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut total_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_rows(&train.points, chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels_all[i]).collect();

            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x0 = g.leaf(batch.clone());
            let states = integrate_graph(&mut g, &bound, x0, &cfg.grid, cfg.solver, cfg.grid.cutoff_index)?;
            let feature = *states.last().unwrap();
            let logits = bound.classify(&mut g, feature)?;
            let ce = classification_loss(&mut g, logits, &batch_labels, classes, cfg.loss_kind)?;

            // fresh path samples (fresh uniform t) for the regularizer
            let samples = sample_batch(&cfg.path, &batch, &mut sample_rng)?;
            let fm = fm_loss(&mut g, &bound, &samples)?;
            let fm_scaled = g.scale(fm, cfg.beta)?;
            let total = g.add(ce, fm_scaled)?;

            let fm_value = g.value(fm).item()?;
            let ce_value = g.value(ce).item()?;
            let total_value = g.value(total).item()?;
            let grad_map = g.backward(total)?;
            let grads = grads_for(&grad_map, net, &bound, cfg.freeze_backbone);
            {
                let mut params = net.params_mut();
                adam_step(&mut params, &names, &grads, &mut adam, Some(lr))?;
            }

            let w = chunk.len() as f64;
            fm_sum += fm_value * w;
            ce_sum += ce_value * w;
            total_sum += total_value * w;
            let logit_values = g.value(logits);
            for (i, &y) in batch_labels.iter().enumerate() {
                let row = logit_values.row(i);
                let mut best = 0usize;
                for j in 1..classes {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == y {
                    correct += 1;
                }
            }
        }

        let epoch_1based = epoch + 1;
        let val_accuracy = match (val, cfg.eval_every) {
            (Some(v), every) if every > 0 && (epoch_1based % every == 0 || epoch_1based == cfg.epochs) => {
                Some(evaluate(net, v, &cfg.grid, cfg.solver)?.accuracy)
            }
            _ => None,
        };
        let (mi_train, mi_val) = if cfg.mi_every > 0
            && (epoch_1based % cfg.mi_every == 0 || epoch_1based == cfg.epochs)
        {
            let full = TimeGrid::infer(cfg.grid.t_span, cfg.grid.t_span)?;
            let mut mi_rng = Rng::derive(cfg.seed, "ft-mi", epoch as u64);
            let mt = mi_proxy(net, &train.points, &full, cfg.solver, &cfg.mi_mode, &mut mi_rng)?;
            let mv = match val {
                Some(v) => Some(mi_proxy(net, &v.points, &full, cfg.solver, &cfg.mi_mode, &mut mi_rng)?),
                None => None,
            };
            (Some(mt), mv)
        } else {
            (None, None)
        };

        report.epochs.push(EpochRecord {
            epoch: epoch_1based,
            fm_loss: fm_sum / n as f64,
            ce_loss: Some(ce_sum / n as f64),
            total_loss: total_sum / n as f64,
            accuracy: Some(correct as f64 / n as f64),
            val_accuracy,
            mi_train,
            mi_val,
            wall_secs: clock.now_secs() - t0,
        });

        let is_final = epoch_1based == cfg.epochs;
        if epoch_1based % cfg.checkpoint_every == 0 || is_final {
            sink(Snapshot { epoch: epoch_1based, net, adam: &adam, is_final });
        }
    }
    Ok(report)
}

/// Softmax probabilities for a feature batch, for callers that need more
/// than the argmax.
pub fn predict_proba(
    net: &ParamNet,
    points: &Tensor,
    grid: &TimeGrid,
    solver: SolverKind,
) -> Result<Tensor> {
    let feats = integrate_steps(solver, net, points, grid, grid.cutoff_index)?;
    softmax_rows(&net.classify(&feats)?)
}
