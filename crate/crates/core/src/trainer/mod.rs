//! Cross-entropy objective, Adagrad and the mini-batch loop.

mod adagrad;
mod checkpoint;

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adagrad::OptimizerState;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::features::EncodedExample;
use crate::model::{bind, forward, Batch, Model, ModelKind};
use crate::rng::stream;
use crate::tensor::{Float, Mode, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adagrad_initial_accumulator: f64,
    pub adagrad_epsilon: f64,
    pub seed: u64,
    pub model: ModelKind,
    pub shuffle: bool,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Prepared batches allowed in flight ahead of the optimizer; 0 builds
    /// batches inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 256,
            epochs: 1,
            adagrad_initial_accumulator: 0.1,
            adagrad_epsilon: 1e-7,
            seed: 0,
            model: ModelKind::Bst,
            shuffle: true,
            clip_norm: None,
            prefetch: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.adagrad_initial_accumulator < 0.0 || self.adagrad_epsilon < 0.0 {
            return Err(Error::Config("adagrad accumulator and epsilon must be non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between predicted probabilities and labels.
pub fn cross_entropy_loss<T: Float>(tape: &mut Tape<'_, T>, p: Var, labels: &[T]) -> Result<Var> {
    tape.binary_cross_entropy(p, labels)
}

/// `(step, loss)` pairs, one per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog(pub Vec<(u64, f32)>);

impl LossLog {
    pub fn losses(&self) -> impl Iterator<Item = f32> + '_ {
        self.0.iter().map(|&(_, l)| l)
    }

    /// Trailing mean over `window` steps ending at index `at`.
    pub fn smoothed(&self, at: usize, window: usize) -> f32 {
        let lo = (at + 1).saturating_sub(window);
        let xs = &self.0[lo..=at];
        xs.iter().map(|&(_, l)| l).sum::<f32>() / xs.len() as f32
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "step\tloss").expect("in-memory write");
        for (s, l) in &self.0 {
            writeln!(out, "{s}\t{l}").expect("in-memory write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Training state: model weights, accumulators and the step counter. The
/// batch order and dropout masks of every step are derived from the seed
/// and the step number, so a run can be checkpointed and resumed exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params, config.adagrad_initial_accumulator as f32);
        Ok(Trainer {
            model,
            config,
            optimizer,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps_per_epoch(n) * self.config.epochs as u64
    }

    fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            order.shuffle(&mut stream(self.config.seed, "shuffle", epoch));
        }
        order
    }

    /// Example indices of global step `step`; the last batch of an epoch may
    /// be partial.
    fn batch_plan(&self, n: usize, from: u64, to: u64) -> Vec<Vec<usize>> {
        let per_epoch = self.steps_per_epoch(n);
        let mut plan = Vec::new();
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for step in from..to {
            let epoch = step / per_epoch;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(n, epoch)));
            }
            let order = &cached.as_ref().expect("filled above").1;
            let k = (step % per_epoch) as usize * self.config.batch_size;
            plan.push(order[k..(k + self.config.batch_size).min(n)].to_vec());
        }
        plan
    }

    /// One forward/backward/update on `batch`; returns the batch loss.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<f32> {
        let step = self.optimizer.step;
        let grads = {
            let mut tape = Tape::<f32>::new();
            let vars = bind(&mut tape, &self.model.params, &self.model.schema)?;
            let mut rng = stream(self.config.seed, "dropout", step);
            let p = forward(
                self.model.kind,
                &mut tape,
                &vars,
                batch,
                &self.model.config,
                Mode::Train,
                &mut rng,
            )?;
            let loss = cross_entropy_loss(&mut tape, p, &batch.labels_as())?;
            let value = tape.value(loss).data()[0];
            (tape.backward(loss)?, value)
        };
        let (mut grads, loss) = grads;
        if let Some(clip) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        self.optimizer.apply(
            &mut self.model.params,
            &grads,
            self.config.learning_rate as f32,
            self.config.adagrad_epsilon as f32,
        )?;
        for (name, t) in self.model.params.iter() {
            t.check_finite(name)?;
        }
        Ok(loss)
    }

    /// Runs up to `max_steps` further steps (all remaining epochs when
    /// `None`) and returns their losses.
    pub fn run(&mut self, data: &[EncodedExample], max_steps: Option<u64>) -> Result<LossLog> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training examples".into()));
        }
        let total = self.total_steps(data.len());
        let from = self.step();
        let to = max_steps.map_or(total, |m| (from + m).min(total));
        let plan = self.batch_plan(data.len(), from, to);
        let build = |idx: &[usize]| Batch::new(idx.iter().map(|&i| &data[i]));

        let mut log = LossLog::default();
        if self.config.prefetch == 0 {
            for idx in &plan {
                let step = self.step();
                log.0.push((step, self.train_batch(&build(idx)?)?));
            }
            return Ok(log);
        }
        // Batches are produced in plan order, so the queue never changes
        // what the optimizer sees.
        let capacity = self.config.prefetch.min(plan.len()).max(1);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(capacity);
            let plan = &plan;
            scope.spawn(move || {
                for idx in plan {
                    if tx.send(build(idx)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx.iter() {
                let step = self.step();
                log.0.push((step, self.train_batch(&batch?)?));
            }
            Ok(())
        })?;
        Ok(log)
    }
}

/// Trains a freshly initialized or resumed model over all epochs.
pub fn train(data: &[EncodedExample], model: Model, config: TrainConfig) -> Result<(Model, LossLog)> {
    let mut trainer = Trainer::new(model, config)?;
    let log = trainer.run(data, None)?;
    Ok((trainer.model, log))
}
