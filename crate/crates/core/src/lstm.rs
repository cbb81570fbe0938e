//! Stacked LSTM with cached forward activations and a manual backward pass.
//!
//! The gate axis (`4H` columns) is laid out as `[i, f, o, g]`: input gate,
//! forget gate, output gate, block input. Each gate occupies `H` consecutive
//! columns.
//!
//! The backward pass forms the gate gradient `dnet` with element-wise
//! operations only, hands it to the sparsifier, and then runs the four
//! matmuls (`dx`, `dh_prev`, `dW`, `dU`) and the bias reduction on whatever
//! the sparsifier returned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::SparsifierConfig;
use crate::tensor::{gemm, gemm_gate, GemmMode, MacCounter, Matrix, Scalar};

pub use crate::sparsify::GateGradient;

/// Weights of one layer: `w` is `4H x D`, `u` is `4H x H`, `b` has `4H`
/// entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams<T: Scalar> {
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LstmLayerParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmLayerParams {
            w: Matrix::zeros(4 * hidden, input_dim),
            u: Matrix::zeros(4 * hidden, hidden),
            b: vec![T::ZERO; 4 * hidden],
        }
    }

    /// Every parameter drawn from `U(-scale, scale)`; `scale == 0` gives zeros.
    pub fn uniform(input_dim: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || if scale == 0.0 { T::ZERO } else { T::from_f64(rng.gen_range(-scale..scale)) };
        let w = Matrix::from_fn(4 * hidden, input_dim, |_, _| draw());
        let u = Matrix::from_fn(4 * hidden, hidden, |_, _| draw());
        let b = (0..4 * hidden).map(|_| draw()).collect();
        LstmLayerParams { w, u, b }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.rows() != 4 * h || self.w.rows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::shape("lstm params", "w", self.w.shape(), "u", self.u.shape()));
        }
        Ok(())
    }
}

/// Accumulated parameter gradients for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T: Scalar> {
    pub dw: Matrix<T>,
    pub du: Matrix<T>,
    pub db: Vec<T>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn zeros_like(p: &LstmLayerParams<T>) -> Self {
        LayerGrads {
            dw: Matrix::zeros(p.w.rows(), p.w.cols()),
            du: Matrix::zeros(p.u.rows(), p.u.cols()),
            db: vec![T::ZERO; p.b.len()],
        }
    }
}

/// Activations saved by the forward pass for one layer at one timestep.
#[derive(Clone, Debug)]
pub struct CacheEntry<T: Scalar> {
    pub x: Matrix<T>,
    pub h_prev: Matrix<T>,
    pub c_prev: Matrix<T>,
    /// Pre-activations, `N x 4H`.
    pub net: Matrix<T>,
    /// Gate activations `[i, f, o, g]`, `N x 4H`.
    pub gates: Matrix<T>,
    pub c: Matrix<T>,
    pub tanh_c: Matrix<T>,
}

fn check_rows<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::shape(op, "x_t", a.shape(), "state", b.shape()));
    }
    Ok(())
}

/// One LSTM cell step.
pub fn forward_step<T: Scalar>(
    params: &LstmLayerParams<T>,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
    c_prev: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, CacheEntry<T>)> {
    let h = params.hidden();
    let n = x.rows();
    check_rows("forward_step", x, h_prev)?;
    check_rows("forward_step", x, c_prev)?;
    if x.cols() != params.input_dim() {
        return Err(Error::shape("forward_step", "x_t", x.shape(), "W", params.w.shape()));
    }
    if h_prev.cols() != h || c_prev.cols() != h {
        return Err(Error::shape("forward_step", "h_prev", h_prev.shape(), "c_prev", c_prev.shape()));
    }

    let mut net = Matrix::zeros(n, 4 * h);
    for r in 0..n {
        net.row_mut(r).copy_from_slice(&params.b);
    }
    let mut scratch = MacCounter::new();
    gemm(x, &params.w, &mut net, false, true, &mut scratch)?;
    gemm(h_prev, &params.u, &mut net, false, true, &mut scratch)?;

    let mut gates = Matrix::zeros(n, 4 * h);
    let mut c = Matrix::zeros(n, h);
    let mut tanh_c = Matrix::zeros(n, h);
    let mut h_out = Matrix::zeros(n, h);
    for r in 0..n {
        let pre = net.row(r);
        let act = gates.row_mut(r);
        for j in 0..3 * h {
            act[j] = pre[j].sigmoid();
        }
        for j in 3 * h..4 * h {
            act[j] = pre[j].tanh();
        }
        let (cp, cr, tr, hr) = (c_prev.row(r), c.row_mut(r), tanh_c.row_mut(r), h_out.row_mut(r));
        for j in 0..h {
            let (i, f, o, g) = (act[j], act[h + j], act[2 * h + j], act[3 * h + j]);
            cr[j] = f * cp[j] + i * g;
            tr[j] = cr[j].tanh();
            hr[j] = o * tr[j];
        }
    }

    let entry = CacheEntry {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        net,
        gates,
        c: c.clone(),
        tanh_c,
    };
    Ok((h_out, c, entry))
}

/// Element-wise part of the backward step: returns `(dnet, dc_prev)`.
///
/// `dh` is the full gradient reaching `h_t` (loss plus recurrent), `dc` the
/// gradient reaching `c_t` from step `t + 1`.
pub fn gate_gradient<T: Scalar>(
    cache: &CacheEntry<T>,
    dh: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (n, h) = cache.c.shape();
    if dh.shape() != (n, h) || dc.shape() != (n, h) {
        return Err(Error::shape("backward_step", "dh_t", dh.shape(), "dc_t", dc.shape()));
    }
    let mut dnet = Matrix::zeros(n, 4 * h);
    let mut dc_prev = Matrix::zeros(n, h);
    for r in 0..n {
        let act = cache.gates.row(r);
        let (tc, cp) = (cache.tanh_c.row(r), cache.c_prev.row(r));
        let (dhr, dcr) = (dh.row(r), dc.row(r));
        let dcp = dc_prev.row_mut(r);
        let out = dnet.row_mut(r);
        for j in 0..h {
            let (i, f, o, g) = (act[j], act[h + j], act[2 * h + j], act[3 * h + j]);
            let d_o = dhr[j] * tc[j];
            let dcell = dcr[j] + dhr[j] * o * (T::ONE - tc[j] * tc[j]);
            let di = dcell * g;
            let dg = dcell * i;
            let df = dcell * cp[j];
            dcp[j] = dcell * f;
            out[j] = di * i * (T::ONE - i);
            out[h + j] = df * f * (T::ONE - f);
            out[2 * h + j] = d_o * o * (T::ONE - o);
            out[3 * h + j] = dg * (T::ONE - g * g);
        }
    }
    Ok((dnet, dc_prev))
}

/// Gradients flowing out of one backward step.
#[derive(Clone, Debug)]
pub struct StepGradients<T: Scalar> {
    pub dnet: GateGradient<T>,
    pub dx: Matrix<T>,
    pub dh_prev: Matrix<T>,
    pub dc_prev: Matrix<T>,
}

/// Full backward step for one layer at one timestep. Parameter gradients
/// are accumulated into `grads`; MACs of the four matmuls go to `macs`.
pub fn backward_step<T: Scalar>(
    params: &LstmLayerParams<T>,
    cache: &CacheEntry<T>,
    dh: &Matrix<T>,
    dc: &Matrix<T>,
    sparsifier: &SparsifierConfig,
    grads: &mut LayerGrads<T>,
    macs: &mut MacCounter,
) -> Result<StepGradients<T>> {
    let (dnet_dense, dc_prev) = gate_gradient(cache, dh, dc)?;
    let dnet = sparsifier.apply(dnet_dense)?;
    let n = cache.x.rows();
    let mut dx = Matrix::zeros(n, params.input_dim());
    let mut dh_prev = Matrix::zeros(n, params.hidden());
    gemm_gate(&dnet, &params.w, GemmMode::Dx, &mut dx, macs)?;
    gemm_gate(&dnet, &params.u, GemmMode::DhPrev, &mut dh_prev, macs)?;
    gemm_gate(&dnet, &cache.x, GemmMode::DW, &mut grads.dw, macs)?;
    gemm_gate(&dnet, &cache.h_prev, GemmMode::DU, &mut grads.du, macs)?;
    dnet.accumulate_bias(&mut grads.db)?;
    Ok(StepGradients {
        dnet,
        dx,
        dh_prev,
        dc_prev,
    })
}

/// Hidden and cell state of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Scalar> {
    pub h: Vec<Matrix<T>>,
    pub c: Vec<Matrix<T>>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![Matrix::zeros(batch, hidden); layers],
            c: vec![Matrix::zeros(batch, hidden); layers],
        }
    }
}

/// Forward caches of a whole unroll, indexed `[t][layer]`.
#[derive(Clone, Debug, Default)]
pub struct SequenceCache<T: Scalar> {
    pub steps: Vec<Vec<CacheEntry<T>>>,
}

/// Result of one truncated-BPTT window.
#[derive(Clone, Debug)]
pub struct BpttOutput<T: Scalar> {
    pub loss: f64,
    pub outputs: Vec<Matrix<T>>,
    pub final_state: LstmState<T>,
    pub grads: Vec<LayerGrads<T>>,
    /// Gradient with respect to each timestep's input.
    pub dxs: Vec<Matrix<T>>,
}

/// A stack of LSTM layers; layer `l + 1` consumes the hidden output of `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmStack<T: Scalar> {
    pub layers: Vec<LstmLayerParams<T>>,
}

impl<T: Scalar> LstmStack<T> {
    pub fn uniform(input_dim: usize, hidden: usize, layers: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|l| LstmLayerParams::uniform(if l == 0 { input_dim } else { hidden }, hidden, scale, rng))
            .collect();
        LstmStack { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads<T>> {
        self.layers.iter().map(LayerGrads::zeros_like).collect()
    }

    pub fn zero_state(&self, batch: usize) -> LstmState<T> {
        LstmState::zeros(self.layers.len(), batch, self.hidden())
    }

    /// Runs all layers over `xs`, returning top-layer outputs, the final
    /// state and the caches needed by [`LstmStack::backward`].
    pub fn forward(
        &self,
        xs: &[Matrix<T>],
        state: &LstmState<T>,
    ) -> Result<(Vec<Matrix<T>>, LstmState<T>, SequenceCache<T>)> {
        if state.h.len() != self.layers.len() || state.c.len() != self.layers.len() {
            return Err(Error::State(format!(
                "state has {} layers, model has {}",
                state.h.len(),
                self.layers.len()
            )));
        }
        let mut h = state.h.clone();
        let mut c = state.c.clone();
        let mut outputs = Vec::with_capacity(xs.len());
        let mut cache = SequenceCache {
            steps: Vec::with_capacity(xs.len()),
        };
        for x in xs {
            let mut input = x.clone();
            let mut entries = Vec::with_capacity(self.layers.len());
            for (l, params) in self.layers.iter().enumerate() {
                let (h_new, c_new, entry) = forward_step(params, &input, &h[l], &c[l])?;
                entries.push(entry);
                input = h_new.clone();
                h[l] = h_new;
                c[l] = c_new;
            }
            outputs.push(input);
            cache.steps.push(entries);
        }
        Ok((outputs, LstmState { h, c }, cache))
    }

    /// Backward over a cached unroll. `dh_top[t]` is the loss gradient with
    /// respect to the top layer's output at `t`. The initial state is a
    /// constant: nothing flows past `t = 0`.
    pub fn backward(
        &self,
        cache: &SequenceCache<T>,
        dh_top: &[Matrix<T>],
        sparsifier: &SparsifierConfig,
        grads: &mut [LayerGrads<T>],
        macs: &mut MacCounter,
    ) -> Result<Vec<Matrix<T>>> {
        let steps = cache.steps.len();
        if dh_top.len() != steps {
            return Err(Error::State(format!(
                "{} output gradients for {steps} cached timesteps",
                dh_top.len()
            )));
        }
        if grads.len() != self.layers.len() {
            return Err(Error::State("gradient buffers do not match layer count".into()));
        }
        let layers = self.layers.len();
        let mut dh_next: Vec<Option<Matrix<T>>> = vec![None; layers];
        let mut dc_next: Vec<Option<Matrix<T>>> = vec![None; layers];
        let mut dxs = vec![Matrix::zeros(0, 0); steps];
        for t in (0..steps).rev() {
            let entries = &cache.steps[t];
            if entries.len() != layers {
                return Err(Error::State(format!("missing cache entries at timestep {t}")));
            }
            let mut from_above = dh_top[t].clone();
            for l in (0..layers).rev() {
                let entry = &entries[l];
                let mut dh = from_above;
                if let Some(rec) = &dh_next[l] {
                    dh.axpy(T::ONE, rec)?;
                }
                let dc = dc_next[l]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(entry.c.rows(), entry.c.cols()));
                let step = backward_step(&self.layers[l], entry, &dh, &dc, sparsifier, &mut grads[l], macs)?;
                dh_next[l] = Some(step.dh_prev);
                dc_next[l] = Some(step.dc_prev);
                from_above = step.dx;
            }
            dxs[t] = from_above;
        }
        Ok(dxs)
    }

    /// Forward, loss, backward over one window. `loss_grad` maps the
    /// top-layer outputs to `(loss, dloss/doutput per timestep)`.
    pub fn run_bptt(
        &self,
        xs: &[Matrix<T>],
        initial: &LstmState<T>,
        sparsifier: &SparsifierConfig,
        macs: &mut MacCounter,
        loss_grad: impl FnOnce(&[Matrix<T>]) -> Result<(f64, Vec<Matrix<T>>)>,
    ) -> Result<BpttOutput<T>> {
        if xs.is_empty() {
            return Err(Error::Parameter("unroll length must be at least 1".into()));
        }
        let (outputs, final_state, cache) = self.forward(xs, initial)?;
        let (loss, dh_top) = loss_grad(&outputs)?;
        let mut grads = self.zero_grads();
        let dxs = self.backward(&cache, &dh_top, sparsifier, &mut grads, macs)?;
        Ok(BpttOutput {
            loss,
            outputs,
            final_state,
            grads,
            dxs,
        })
    }
}
