//! Text and driving losses, the two training strategies, the optimizer loop
//! and the finite-difference gradient checker.

pub mod gradcheck;
pub mod loss;
pub mod optim;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{LmadError, Result};
use crate::lm::argmax;
use crate::model::{LmadModel, Sample};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, check_gradients, GradCheckConfig, GradCheckReport, ParamCheck};
pub use loss::{e2e_loss, e2e_truth, greedy_match, predict, text_loss, text_loss_value, E2EPrediction, E2ETruth, MATCH_GATE};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// End-to-end tokens detached; text supervision only.
    FrozenE2e,
    /// Text loss plus the weighted driving loss; backbone heads train too.
    Joint,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FrozenE2e => "frozen_e2e",
            Strategy::Joint => "joint",
        })
    }
}

impl FromStr for Strategy {
    type Err = LmadError;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "frozen_e2e" => Ok(Strategy::FrozenE2e),
            "joint" => Ok(Strategy::Joint),
            _ => Err(LmadError::Config(format!("unknown strategy {s:?} (expected frozen-e2e or joint)"))),
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Weight of the driving loss; unset means [`DEFAULT_LAMBDA`].
    pub lambda: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Total optimizer steps; overrides `epochs` and cycles the data.
    pub steps: Option<usize>,
    pub grad_clip: f64,
    /// Checkpoint period in steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FrozenE2e,
            lambda: None,
            lr: 1e-2,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            epochs: 1,
            batch_size: 4,
            seed: 0,
            steps: None,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LmadError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LmadError::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(LmadError::Config(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(LmadError::Config(format!("invalid lambda {l}")));
            }
        }
        Ok(())
    }

    /// Lambda in effect: the frozen strategy ignores it, with a warning.
    pub fn effective_lambda(&self) -> f64 {
        match self.strategy {
            Strategy::FrozenE2e => {
                if self.lambda.is_some() {
                    log::warn!("lambda is ignored by the frozen_e2e strategy");
                }
                0.0
            }
            Strategy::Joint => self.lambda.unwrap_or(DEFAULT_LAMBDA),
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or(self.epochs * dataset_len.div_ceil(self.batch_size))
    }
}

/// Loss components for one step, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_txt: f64,
    pub l_det: f64,
    pub l_mot: f64,
    pub l_plan: f64,
    pub l_e2e: f64,
    pub total: f64,
    pub lambda: f64,
    /// Teacher-forced accuracy over the scored answer tokens.
    pub token_acc: f64,
    /// Set when some sample had no scored text position.
    pub empty_mask: bool,
}

impl LossReport {
    fn from_components(l_txt: f64, l_det: f64, l_mot: f64, l_plan: f64, lambda: f64, token_acc: f64, empty_mask: bool) -> Self {
        let l_e2e = l_det + l_mot + l_plan;
        Self { l_txt, l_det, l_mot, l_plan, l_e2e, total: l_txt + lambda * l_e2e, lambda, token_acc, empty_mask }
    }
}

/// Graph nodes of one sample's objective.
#[derive(Clone, Debug)]
pub struct SampleObjective {
    pub total: Var,
    pub l_txt: Option<Var>,
    pub l_det: Option<Var>,
    pub l_mot: Option<Var>,
    pub l_plan: Option<Var>,
    pub correct: usize,
    pub scored: usize,
}

impl SampleObjective {
    fn values(&self, g: &Graph) -> [f64; 4] {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        [v(self.l_txt), v(self.l_det), v(self.l_mot), v(self.l_plan)]
    }
}

/// Builds `l_txt + λ·(l_det + l_mot + l_plan)` for one sample. The driving
/// terms are only built under the joint strategy.
pub fn sample_objective(g: &mut Graph, model: &LmadModel, sample: &Sample, strategy: Strategy, lambda: f64) -> Result<SampleObjective> {
    let fwd = model.forward(g, sample)?;
    let (rows, targets) = sample.loss_targets();
    let l_txt = text_loss(g, fwd.logits, &rows, &targets);
    let logits = g.value(fwd.logits);
    let correct = rows.iter().zip(&targets).filter(|&(&r, &t)| argmax(logits.row(r)) == t).count();
    let mut total = match l_txt {
        Some(l) => l,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let (mut l_det, mut l_mot, mut l_plan) = (None, None, None);
    if strategy == Strategy::Joint {
        let data = &sample.data;
        let rows: Vec<usize> = data.selection.real().collect();
        let feats = match fwd.features {
            Some(f) => f,
            None => model.heads.features(g, &model.store, &data.backbone, &rows),
        };
        let pred = predict(g, &model.store, &model.heads, &data.backbone, &rows, &feats);
        let l = e2e_loss(g, &pred, &e2e_truth(&data.scene));
        let mut e2e = l.plan;
        for part in [l.det, l.mot].into_iter().flatten() {
            e2e = g.add(e2e, part);
        }
        let weighted = g.scale(e2e, lambda);
        total = g.add(total, weighted);
        (l_det, l_mot, l_plan) = (l.det, l.mot, Some(l.plan));
    }
    Ok(SampleObjective { total, l_txt, l_det, l_mot, l_plan, correct, scored: rows.len() })
}

/// Parameters updated under `strategy`.
pub fn trainable_params(model: &LmadModel, strategy: Strategy) -> Vec<ParamId> {
    let mut set: BTreeSet<ParamId> = model.language_trainable().into_iter().collect();
    if strategy == Strategy::Joint {
        set.extend(model.backbone_params());
    }
    set.into_iter().collect()
}

/// Mean batch loss and its gradient restricted to `trainable`.
pub fn batch_gradients(
    model: &LmadModel,
    batch: &[&Sample],
    strategy: Strategy,
    lambda: f64,
    trainable: &[ParamId],
) -> Result<(LossReport, BTreeMap<ParamId, Tensor>)> {
    if batch.is_empty() {
        return Err(LmadError::Input("empty batch".into()));
    }
    let wanted: BTreeSet<ParamId> = trainable.iter().copied().collect();
    let per: Vec<([f64; 4], usize, usize, bool, BTreeMap<ParamId, Tensor>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let obj = sample_objective(&mut g, model, s, strategy, lambda)?;
            let grads = g.backward(obj.total).into_params();
            let grads = grads.into_iter().filter(|(id, _)| wanted.contains(id)).collect();
            Ok((obj.values(&g), obj.correct, obj.scored, obj.l_txt.is_none(), grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut sums = [0.0; 4];
    let (mut correct, mut scored, mut empty) = (0, 0, false);
    let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for (vals, c, s, e, gr) in per {
        for k in 0..4 {
            sums[k] += vals[k];
        }
        correct += c;
        scored += s;
        empty |= e;
        for (id, t) in gr {
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(id, t);
                }
            }
        }
    }
    for t in grads.values_mut() {
        *t = t.scale(1.0 / n);
    }
    let acc = if scored == 0 { 0.0 } else { correct as f64 / scored as f64 };
    let report = LossReport::from_components(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, lambda, acc, empty);
    Ok((report, grads))
}

/// Optimizer state, schedule and trainable set for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamW,
    pub trainable: Vec<ParamId>,
    pub lambda: f64,
    pub step: usize,
}

impl Trainer {
    /// Prepares `model` for the strategy: the frozen strategy forces the
    /// bridge to detach its inputs.
    pub fn new(model: &mut LmadModel, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.strategy == Strategy::FrozenE2e {
            model.bridge.cfg.detach = true;
        }
        let lambda = cfg.effective_lambda();
        let optimizer = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
        let schedule = LrSchedule::new(cfg.lr, total_steps, cfg.warmup_ratio);
        let trainable = trainable_params(model, cfg.strategy);
        Ok(Self { cfg, schedule, optimizer, trainable, lambda, step: 0 })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, model: &mut LmadModel, batch: &[&Sample]) -> Result<(LossReport, f64)> {
        if self.cfg.strategy == Strategy::FrozenE2e && !model.bridge.cfg.detach {
            return Err(LmadError::Config("frozen_e2e requires detached end-to-end tokens".into()));
        }
        let (report, mut grads) = batch_gradients(model, batch, self.cfg.strategy, self.lambda, &self.trainable)?;
        if !report.total.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(LmadError::NonFinite { step: self.step });
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.schedule.lr(self.step);
        self.optimizer.step(&mut model.store, &self.trainable, &grads, lr);
        self.step += 1;
        Ok((report, lr))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub l_txt: f64,
    pub l_det: f64,
    pub l_mot: f64,
    pub l_plan: f64,
    pub l_e2e: f64,
    pub total: f64,
    pub lambda: f64,
    pub token_acc: f64,
}

impl LogEntry {
    fn new(step: usize, lr: f64, r: &LossReport) -> Self {
        Self {
            step,
            lr,
            l_txt: r.l_txt,
            l_det: r.l_det,
            l_mot: r.l_mot,
            l_plan: r.l_plan,
            l_e2e: r.l_e2e,
            total: r.total,
            lambda: r.lambda,
            token_acc: r.token_acc,
        }
    }
}

/// Receives progress from [`fit`]. Checkpoint failures abort the run.
pub trait FitObserver {
    fn on_step(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _model: &LmadModel, _step: usize) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;
impl FitObserver for Silent {}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub last_checkpoint: Option<usize>,
}

/// Trains on `data` with shuffled batches reshuffled every epoch. A
/// non-finite loss stops the run; the most recent checkpoint stays valid.
pub fn fit(model: &mut LmadModel, data: &[Sample], cfg: &TrainConfig, observer: &mut dyn FitObserver) -> Result<FitSummary> {
    if data.is_empty() {
        return Err(LmadError::Input("training set is empty".into()));
    }
    cfg.validate()?;
    let total = cfg.total_steps(data.len());
    let mut trainer = Trainer::new(model, cfg.clone(), total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut summary = FitSummary::default();
    while trainer.step < total {
        if cursor >= order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&Sample> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        let step = trainer.step;
        let (report, lr) = match trainer.train_step(model, &batch) {
            Ok(r) => r,
            Err(e @ LmadError::NonFinite { .. }) => {
                log::error!("{e}; last checkpoint at step {:?}", summary.last_checkpoint);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let entry = LogEntry::new(step, lr, &report);
        observer.on_step(&entry)?;
        summary.log.push(entry);
        let done = trainer.step;
        if done == total || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            observer.on_checkpoint(model, done)?;
            summary.last_checkpoint = Some(done);
        }
    }
    summary.steps = trainer.step;
    Ok(summary)
}

/// Teacher-forced accuracy over the scored answer tokens of `data`.
pub fn token_accuracy(model: &LmadModel, data: &[Sample]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, s)?;
            let (rows, targets) = s.loss_targets();
            let logits = g.value(fwd.logits);
            let c = rows.iter().zip(&targets).filter(|&(&r, &t)| argmax(logits.row(r)) == t).count();
            Ok((c, rows.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, n) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
}
