//! Language-model training: truncated BPTT with a phased sparsifier
//! schedule, global-norm clipping, SGD and perplexity evaluation.
//!
//! The hidden and cell states are carried (detached) from one minibatch to
//! the next and reset to zero at every epoch boundary. The MAC counts in the
//! metrics cover the four LSTM backward matmuls per layer and timestep,
//! which are the only products the sparsifier affects.

mod checkpoint;
mod model;
mod schedule;

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_digest, read_header, Checkpoint, CheckpointHeader, RngState, TensorInfo, MAGIC, VERSION};
pub use model::{clip_gradients, EvalResult, LanguageModel, ModelConfig, ModelGrads, StepResult};
pub use schedule::{Phase, TrainSchedule};

use crate::data::{batch_iterate, Batch, BatchStream, DataConfig};
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::tensor::{MacCounter, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub seed: u64,
    /// Validation perplexity is logged every `eval_every` steps (0: only at
    /// the end).
    pub eval_every: u64,
    /// Adds `wall_ms` to every step record. Off by default because wall
    /// time makes metrics files differ between otherwise identical runs.
    pub wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate(self.model.batch, 4 * self.model.hidden)
    }
}

/// One metrics line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: usize,
    pub sparsifier: String,
    pub lr: f64,
    pub loss: f64,
    pub ppl: f64,
    pub grad_norm: f64,
    pub dense_macs: u64,
    pub executed_macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Metrics line for a validation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval: String,
    pub step: u64,
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Exponential of the mean token NLL, carrying state across batches.
pub fn evaluate_perplexity<T: Scalar>(model: &LanguageModel<T>, batches: impl IntoIterator<Item = Batch>) -> Result<f64> {
    Ok(evaluate(model, batches)?.1)
}

/// Returns `(mean NLL, perplexity, tokens)`.
fn evaluate<T: Scalar>(model: &LanguageModel<T>, batches: impl IntoIterator<Item = Batch>) -> Result<(f64, f64, usize)> {
    let mut state: Option<LstmState<T>> = None;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for batch in batches {
        let s = state.take().unwrap_or_else(|| model.lstm.zero_state(batch.batch));
        let r = model.evaluate_batch(&batch, &s)?;
        nll += r.nll_sum;
        tokens += r.tokens;
        state = Some(r.final_state);
    }
    if tokens == 0 {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let mean = nll / tokens as f64;
    Ok((mean, mean.exp(), tokens))
}

/// Stateful training loop over one training stream.
pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: LanguageModel<T>,
    stream: BatchStream,
    state: LstmState<T>,
    step: u64,
    epoch: u64,
    rng: ChaCha8Rng,
    phase_macs: Vec<MacCounter>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, train_ids: &[u32]) -> Result<Self> {
        config.validate()?;
        if config.model.precision.name() != T::NAME {
            return Err(Error::Parameter(format!(
                "config asks for {} but the trainer runs in {}",
                config.model.precision.name(),
                T::NAME
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = LanguageModel::init(&config.model, &mut rng)?;
        let stream = batch_iterate(train_ids, config.model.batch, config.model.unroll)?;
        let state = model.lstm.zero_state(config.model.batch);
        let phase_macs = vec![MacCounter::new(); config.schedule.phases.len()];
        Ok(Trainer {
            config,
            model,
            stream,
            state,
            step: 0,
            epoch: 0,
            rng,
            phase_macs,
        })
    }

    pub fn model(&self) -> &LanguageModel<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.schedule.total_steps()
    }

    /// Backward-pass MAC totals per schedule phase.
    pub fn phase_macs(&self) -> &[MacCounter] {
        &self.phase_macs
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let schedule = &self.config.schedule;
        let (phase, _) = schedule
            .position(self.step)
            .ok_or_else(|| Error::State("training schedule already finished".into()))?;
        let sparsifier = schedule.phases[phase].sparsifier;
        let batch = match self.stream.next() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                self.stream.reset();
                self.state = self.model.lstm.zero_state(self.config.model.batch);
                self.stream.next().expect("stream holds at least one batch")
            }
        };
        let lr = schedule.lr_at_epoch(self.epoch);
        let clip_norm = schedule.clip_norm;
        let start = self.config.wall_time.then(Instant::now);
        let mut macs = MacCounter::new();
        let StepResult {
            loss,
            mut grads,
            final_state,
        } = self.model.train_batch(&batch, &self.state, &sparsifier, &mut macs)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                phase,
                loss,
            });
        }
        let grad_norm = clip_gradients(&mut grads.buffers_mut(), clip_norm)?;
        self.model.sgd_update(&mut grads, lr);
        self.state = final_state;
        self.step += 1;
        self.phase_macs[phase].merge(&macs);
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch,
            phase,
            sparsifier: sparsifier.kind().to_string(),
            lr,
            loss,
            ppl: loss.exp(),
            grad_norm,
            dense_macs: macs.dense_macs,
            executed_macs: macs.executed_macs,
            wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let (phase, phase_step) = self
            .config
            .schedule
            .position(self.step)
            .unwrap_or((self.config.schedule.phases.len(), 0));
        let tensors = self
            .model
            .tensors()
            .into_iter()
            .map(|(name, rows, cols, _)| TensorInfo { name, rows, cols })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config: self.config.clone(),
                step: self.step,
                epoch: self.epoch,
                lr: self.config.schedule.lr_at_epoch(self.epoch),
                phase,
                phase_step,
                rng: RngState::of(&self.rng),
                precision: self.config.model.precision,
                tensors,
            },
            model: self.model.clone(),
        }
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub final_loss: f64,
    pub valid_ppl: Option<f64>,
    pub phase_macs: Vec<MacCounter>,
}

fn write_line(out: &mut dyn Write, record: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Runs the whole schedule, writing one JSON line per step (and per
/// validation pass when `valid_ids` is given) to `metrics`.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_ids: &[u32],
    valid_ids: Option<&[u32]>,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(config.clone(), train_ids)?;
    let (n, t) = (config.model.batch, config.model.unroll);
    let valid = valid_ids.map(|ids| batch_iterate(ids, n, t)).transpose()?;
    let validate = |trainer: &Trainer<T>, out: &mut dyn Write| -> Result<Option<f64>> {
        let Some(stream) = &valid else { return Ok(None) };
        let mut s = stream.clone();
        s.reset();
        let (loss, ppl, tokens) = evaluate(trainer.model(), s)?;
        write_line(
            out,
            &EvalRecord {
                eval: "valid".into(),
                step: trainer.steps_done(),
                loss,
                ppl,
                tokens,
            },
        )?;
        Ok(Some(ppl))
    };
    let mut final_loss = f64::NAN;
    let mut valid_ppl = None;
    while !trainer.is_finished() {
        let record = trainer.step()?;
        final_loss = record.loss;
        write_line(metrics, &record)?;
        let done = trainer.is_finished();
        if done || (config.eval_every > 0 && record.step % config.eval_every == 0) {
            valid_ppl = validate(&trainer, metrics)?;
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        final_loss,
        valid_ppl,
        phase_macs: trainer.phase_macs().to_vec(),
    })
}
