use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AgentModel, StepInput, Trace, TrainState};
use crate::actions::{Action, ActionHistory};
use crate::evalkit::{match_step, MatchConfig, StepVerdict};
use crate::numerics::{Adam, Fault, GradBuffer, Graph};
use crate::synthgui::Episode;
use crate::vision::{Rect, Screen};
use crate::{Error, Result};

/// One training or evaluation example with its gold history.
#[derive(Clone, Debug)]
pub struct StepSample<'a> {
    pub episode: usize,
    pub step: usize,
    pub subset: &'a str,
    pub task: &'a str,
    pub screen: &'a Screen,
    pub history: ActionHistory,
    pub gold: &'a Action,
    pub rect: Option<Rect>,
}

impl StepSample<'_> {
    pub fn input(&self) -> StepInput<'_> {
        StepInput {
            task: self.task,
            screen: self.screen,
            history: &self.history,
        }
    }
}

/// Every step of every episode, conditioned on the gold actions before it.
pub fn flatten_episodes(episodes: &[Episode], history_len: usize) -> Vec<StepSample<'_>> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let mut history = ActionHistory::new(history_len);
        for (s, st) in ep.steps.iter().enumerate() {
            out.push(StepSample {
                episode: e,
                step: s,
                subset: &ep.subset,
                task: &ep.goal,
                screen: &st.screen,
                history: history.clone(),
                gold: &st.action,
                rect: st.rect,
            });
            history.push(st.action.clone());
        }
    }
    out
}

/// Adam plus a reusable gradient buffer.
#[derive(Debug)]
pub struct Trainer {
    pub adam: Adam,
    pub grads: GradBuffer,
    pub fault: Option<Fault>,
}

impl Trainer {
    pub fn new(model: &AgentModel) -> Self {
        Self {
            adam: Adam::new(&model.store, model.cfg.lr),
            grads: GradBuffer::new(&model.store),
            fault: None,
        }
    }

    pub fn resume(model: &AgentModel, state: &TrainState) -> Result<Self> {
        let mut t = Self::new(model);
        t.adam.restore(state.adam_step, state.m.clone(), state.v.clone())?;
        Ok(t)
    }

    pub fn state(&self, epoch: u64, best_metric: f64) -> TrainState {
        let (adam_step, m, v) = self.adam.state();
        TrainState {
            epoch,
            best_metric,
            adam_step,
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }

    /// Gradients of the token-level mean cross-entropy over `batch`, left in `self.grads`.
    pub fn accumulate(&mut self, model: &AgentModel, batch: &[&StepSample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDimension("training batch"));
        }
        let lens = batch
            .iter()
            .map(|s| model.teacher_forcing_ids(s.gold).map(|(_, t)| t.len()))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = lens.iter().sum();
        self.grads.zero();
        let mut loss = 0.0;
        for (s, n) in batch.iter().zip(lens) {
            let mut g = Graph::with_params(&model.store);
            g.set_fault(self.fault);
            let mut trace = Trace::default();
            let (logits, targets) = model.teacher_forced(&mut g, s.input(), s.gold, &mut trace)?;
            let l = g.cross_entropy(logits, &targets)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    loss: value,
                    diagnostics: trace.describe(&g),
                });
            }
            g.backward(l)?;
            let w = n as f64 / total as f64;
            self.grads.accumulate(&g, w);
            loss += w * value;
        }
        Ok(loss)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, model: &mut AgentModel, batch: &[&StepSample<'_>]) -> Result<f64> {
        let loss = self.accumulate(model, batch)?;
        self.adam.update(&mut model.store, &self.grads);
        Ok(loss)
    }
}

/// Mean teacher-forced loss, token weighted, without updates.
pub fn mean_loss(model: &AgentModel, samples: &[StepSample<'_>]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        let mut g = Graph::inference(&model.store);
        let (logits, targets) = model.teacher_forced(&mut g, s.input(), s.gold, &mut Trace::default())?;
        let l = g.cross_entropy(logits, &targets)?;
        sum += g.value(l).item() * targets.len() as f64;
        count += targets.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Greedy prediction and verdict for every sample.
pub fn evaluate_steps(model: &AgentModel, samples: &[StepSample<'_>], cfg: &MatchConfig) -> Result<Vec<StepVerdict>> {
    samples
        .iter()
        .map(|s| {
            let out = model.predict(s.input())?;
            Ok(match_step(&out.decoded, s.gold, s.rect.as_ref(), cfg))
        })
        .collect()
}

pub fn step_accuracy(verdicts: &[StepVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| v.matched).count() as f64 / verdicts.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs already completed (resume).
    pub start_epoch: usize,
    /// Emit an epoch-0 report before any update.
    pub initial_report: bool,
    pub validate: bool,
    pub match_cfg: MatchConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_step_acc: f64,
}

/// Shuffled minibatch training; `on_epoch` sees each report with the updated model.
pub fn train_epochs(
    model: &mut AgentModel,
    trainer: &mut Trainer,
    train: &[StepSample<'_>],
    val: &[StepSample<'_>],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochReport, &AgentModel, &Trainer) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    if train.is_empty() {
        return Err(Error::EmptyDimension("training set"));
    }
    let batch = opts.batch_size.max(1);
    let mut reports = Vec::new();
    let val_acc = |model: &AgentModel| -> Result<f64> {
        if !opts.validate || val.is_empty() {
            return Ok(0.0);
        }
        Ok(step_accuracy(&evaluate_steps(model, val, &opts.match_cfg)?))
    };
    if opts.initial_report && opts.start_epoch == 0 {
        let r = EpochReport {
            epoch: 0,
            step: trainer.adam.steps(),
            loss: mean_loss(model, train)?,
            val_step_acc: val_acc(model)?,
        };
        on_epoch(&r, model, trainer)?;
        reports.push(r);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in opts.start_epoch + 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let items: Vec<&StepSample<'_>> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = trainer.train_step(model, &items)?;
            sum += loss * items.len() as f64;
            n += items.len();
        }
        let r = EpochReport {
            epoch,
            step: trainer.adam.steps(),
            loss: sum / n as f64,
            val_step_acc: val_acc(model)?,
        };
        log::info!("epoch {epoch}: loss {:.4} val_step_acc {:.4}", r.loss, r.val_step_acc);
        on_epoch(&r, model, trainer)?;
        reports.push(r);
    }
    Ok(reports)
}
