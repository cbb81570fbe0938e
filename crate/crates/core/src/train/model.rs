//! Embedding, stacked LSTM and untied softmax output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::lstm::{LayerGrads, LstmLayerParams, LstmStack, LstmState};
use crate::sparsify::SparsifierConfig;
use crate::tensor::{gemm, MacCounter, Matrix, Precision, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub unroll: usize,
    pub batch: usize,
    pub precision: Precision,
    /// Parameters start uniform in `[-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl ModelConfig {
    /// H = D = 128, N = 16, T = 20, two layers.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embedding_dim: 128,
            hidden: 128,
            layers: 2,
            unroll: 20,
            batch: 16,
            precision: Precision::F32,
            init_scale: 0.1,
        }
    }

    /// H = D = 512, N = 64, T = 20, two layers.
    pub fn large(vocab_size: usize) -> Self {
        ModelConfig {
            embedding_dim: 512,
            hidden: 512,
            batch: 64,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("unroll", self.unroll),
            ("batch", self.batch),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Parameter(format!("init_scale {} is not a finite non-negative number", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T: Scalar> {
    /// `V x D`.
    pub embedding: Matrix<T>,
    pub lstm: LstmStack<T>,
    /// `V x H`, not tied to the embedding.
    pub out_w: Matrix<T>,
    pub out_b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T: Scalar> {
    pub embedding: Matrix<T>,
    pub lstm: Vec<LayerGrads<T>>,
    pub out_w: Matrix<T>,
    pub out_b: Vec<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Every gradient buffer, in checkpoint tensor order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.embedding.data_mut()];
        for g in &mut self.lstm {
            out.push(g.dw.data_mut());
            out.push(g.du.data_mut());
            out.push(&mut g.db);
        }
        out.push(self.out_w.data_mut());
        out.push(&mut self.out_b);
        out
    }
}

/// Result of one forward/backward pass over a minibatch.
pub struct StepResult<T: Scalar> {
    /// Mean cross-entropy per token.
    pub loss: f64,
    pub grads: ModelGrads<T>,
    pub final_state: LstmState<T>,
}

/// Summed negative log-likelihood of a forward-only pass.
pub struct EvalResult<T: Scalar> {
    pub nll_sum: f64,
    pub tokens: usize,
    pub final_state: LstmState<T>,
}

impl<T: Scalar> LanguageModel<T> {
    /// Draws embedding, LSTM layers and output layer in that order.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.init_scale;
        let draw = |rng: &mut dyn rand::RngCore| -> T {
            if s == 0.0 {
                T::ZERO
            } else {
                T::from_f64(rng.gen_range(-s..s))
            }
        };
        let embedding = Matrix::from_fn(cfg.vocab_size, cfg.embedding_dim, |_, _| draw(rng));
        let lstm = LstmStack::uniform(cfg.embedding_dim, cfg.hidden, cfg.layers, s, rng);
        let out_w = Matrix::from_fn(cfg.vocab_size, cfg.hidden, |_, _| draw(rng));
        let out_b = (0..cfg.vocab_size).map(|_| draw(rng)).collect();
        Ok(LanguageModel {
            embedding,
            lstm,
            out_w,
            out_b,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            lstm: self.lstm.zero_grads(),
            out_w: Matrix::zeros(self.out_w.rows(), self.out_w.cols()),
            out_b: vec![T::ZERO; self.out_b.len()],
        }
    }

    /// Named parameter tensors as `(name, rows, cols, data)`.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[T])> {
        let mut out = vec![("embedding".to_string(), self.embedding.rows(), self.embedding.cols(), self.embedding.data())];
        for (l, p) in self.lstm.layers.iter().enumerate() {
            out.push((format!("layer{l}.W"), p.w.rows(), p.w.cols(), p.w.data()));
            out.push((format!("layer{l}.U"), p.u.rows(), p.u.cols(), p.u.data()));
            out.push((format!("layer{l}.b"), 1, p.b.len(), &p.b[..]));
        }
        out.push(("out.W".to_string(), self.out_w.rows(), self.out_w.cols(), self.out_w.data()));
        out.push(("out.b".to_string(), 1, self.out_b.len(), &self.out_b[..]));
        out
    }

    /// Mutable counterpart of [`LanguageModel::tensors`], same order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.embedding.data_mut()];
        for p in &mut self.lstm.layers {
            out.push(p.w.data_mut());
            out.push(p.u.data_mut());
            out.push(&mut p.b);
        }
        out.push(self.out_w.data_mut());
        out.push(&mut self.out_b);
        out
    }

    /// Builds a model with the shapes of `cfg` and every parameter zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LanguageModel {
            embedding: Matrix::zeros(cfg.vocab_size, cfg.embedding_dim),
            lstm: LstmStack {
                layers: (0..cfg.layers)
                    .map(|l| LstmLayerParams::zeros(if l == 0 { cfg.embedding_dim } else { cfg.hidden }, cfg.hidden))
                    .collect(),
            },
            out_w: Matrix::zeros(cfg.vocab_size, cfg.hidden),
            out_b: vec![T::ZERO; cfg.vocab_size],
        })
    }

    fn check_batch(&self, batch: &Batch, state: &LstmState<T>) -> Result<()> {
        let v = self.vocab_size() as u32;
        if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&id| id >= v) {
            return Err(Error::Parameter(format!("token id {bad} outside vocabulary of {v}")));
        }
        if state.h.len() != self.lstm.layers.len() || state.h.iter().any(|h| h.shape() != (batch.batch, self.hidden())) {
            return Err(Error::State("carried state does not match batch and model".into()));
        }
        Ok(())
    }

    fn embed(&self, batch: &Batch) -> Vec<Matrix<T>> {
        let d = self.embedding.cols();
        (0..batch.steps)
            .map(|t| {
                let ids = batch.inputs_at(t);
                let mut x = Matrix::zeros(batch.batch, d);
                for (n, &id) in ids.iter().enumerate() {
                    x.row_mut(n).copy_from_slice(self.embedding.row(id as usize));
                }
                x
            })
            .collect()
    }

    /// Logits for time-major stacked outputs: row `t * N + n`.
    fn logits(&self, outputs: &[Matrix<T>]) -> Result<(Matrix<T>, Matrix<T>)> {
        let n = outputs[0].rows();
        let h = self.hidden();
        let mut stacked = Vec::with_capacity(outputs.len() * n * h);
        for o in outputs {
            stacked.extend_from_slice(o.data());
        }
        let stacked = Matrix::from_vec(outputs.len() * n, h, stacked)?;
        let mut logits = Matrix::zeros(stacked.rows(), self.vocab_size());
        for r in 0..logits.rows() {
            logits.row_mut(r).copy_from_slice(&self.out_b);
        }
        gemm(&stacked, &self.out_w, &mut logits, false, true, &mut MacCounter::new())?;
        Ok((stacked, logits))
    }

    fn targets_time_major(batch: &Batch) -> Vec<u32> {
        (0..batch.steps).flat_map(|t| batch.targets_at(t)).collect()
    }

    /// Forward only; returns the summed NLL over `N * T` tokens.
    pub fn evaluate_batch(&self, batch: &Batch, state: &LstmState<T>) -> Result<EvalResult<T>> {
        self.check_batch(batch, state)?;
        let xs = self.embed(batch);
        let (outputs, final_state, _) = self.lstm.forward(&xs, state)?;
        let (_, logits) = self.logits(&outputs)?;
        let targets = Self::targets_time_major(batch);
        let mut nll_sum = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let (lse, _) = log_softmax_row(logits.row(r));
            nll_sum += lse - logits.row(r)[y as usize].to_f64();
        }
        Ok(EvalResult {
            nll_sum,
            tokens: targets.len(),
            final_state,
        })
    }

    /// Forward, mean cross-entropy and full backward pass. Only the LSTM
    /// backward matmuls use `sparsifier`; they are the ones counted in
    /// `macs`.
    pub fn train_batch(
        &self,
        batch: &Batch,
        state: &LstmState<T>,
        sparsifier: &SparsifierConfig,
        macs: &mut MacCounter,
    ) -> Result<StepResult<T>> {
        self.check_batch(batch, state)?;
        sparsifier.validate(batch.batch, 4 * self.hidden())?;
        let xs = self.embed(batch);
        let targets = Self::targets_time_major(batch);
        let scale = 1.0 / targets.len() as f64;
        let mut grads = self.zero_grads();
        let mut out_grads = None;
        let bptt = self.lstm.run_bptt(&xs, state, sparsifier, macs, |outputs| {
            let (stacked, mut logits) = self.logits(outputs)?;
            let mut loss = 0.0;
            for (r, &y) in targets.iter().enumerate() {
                let row = logits.row_mut(r);
                let (lse, max) = log_softmax_row(row);
                loss += lse - row[y as usize].to_f64();
                let norm = lse - max;
                for (j, v) in row.iter_mut().enumerate() {
                    let p = (v.to_f64() - max - norm).exp();
                    let onehot = if j == y as usize { 1.0 } else { 0.0 };
                    *v = T::from_f64((p - onehot) * scale);
                }
            }
            let dlogits = logits;
            let mut dw = Matrix::zeros(self.out_w.rows(), self.out_w.cols());
            gemm(&dlogits, &stacked, &mut dw, true, false, &mut MacCounter::new())?;
            let db = dlogits.column_sums();
            let mut dh = Matrix::zeros(stacked.rows(), stacked.cols());
            gemm(&dlogits, &self.out_w, &mut dh, false, false, &mut MacCounter::new())?;
            out_grads = Some((dw, db));
            let n = batch.batch;
            let h = self.hidden();
            let dh_top = (0..outputs.len())
                .map(|t| Matrix::from_vec(n, h, dh.data()[t * n * h..(t + 1) * n * h].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok((loss * scale, dh_top))
        })?;
        let (dw, db) = out_grads.expect("loss closure ran");
        grads.out_w = dw;
        grads.out_b = db;
        grads.lstm = bptt.grads;
        for (t, dx) in bptt.dxs.iter().enumerate() {
            for (n, id) in batch.inputs_at(t).into_iter().enumerate() {
                for (g, &d) in grads.embedding.row_mut(id as usize).iter_mut().zip(dx.row(n)) {
                    *g += d;
                }
            }
        }
        Ok(StepResult {
            loss: bptt.loss,
            grads,
            final_state: bptt.final_state,
        })
    }

    /// Plain SGD: `p -= lr * g`.
    pub fn sgd_update(&mut self, grads: &mut ModelGrads<T>, lr: f64) {
        let lr = T::from_f64(lr);
        for (p, g) in self.buffers_mut().into_iter().zip(grads.buffers_mut()) {
            for (p, &g) in p.iter_mut().zip(g.iter()) {
                *p -= lr * g;
            }
        }
    }
}

/// Returns `(logsumexp, max)` of a row, accumulated in `f64`.
fn log_softmax_row<T: Scalar>(row: &[T]) -> (f64, f64) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    (max + sum.ln(), max)
}

/// Scales every buffer by `clip_norm / g` when the global L2 norm `g`
/// exceeds `clip_norm`. Returns `g`.
pub fn clip_gradients<T: Scalar>(buffers: &mut [&mut [T]], clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::Parameter(format!("clip norm must be positive, got {clip_norm}")));
    }
    let norm = buffers
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let s = T::from_f64(clip_norm / norm);
        for b in buffers.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
