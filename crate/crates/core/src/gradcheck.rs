//! Central finite-difference check of the dense backward pass in `f64`.
//! The analytic gradients come from the `f64` backward pass; the loss
//! differences are taken in double-double so that forward rounding noise
//! (about 1e-11 absolute at the default step) cannot mask small entries.

mod dd;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lstm::{LstmStack, LstmState};
use crate::sparsify::SparsifierConfig;
use crate::tensor::{MacCounter, Matrix};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GradCheckDims {
    pub batch: usize,
    pub hidden: usize,
    pub input: usize,
    pub steps: usize,
    pub layers: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            batch: 3,
            hidden: 5,
            input: 4,
            steps: 3,
            layers: 2,
        }
    }
}

/// A complete gradient-check problem: `L = 0.5 * sum_t |h_top_t - y_t|^2`.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub stack: LstmStack<f64>,
    pub xs: Vec<Matrix<f64>>,
    pub initial: LstmState<f64>,
    pub targets: Vec<Matrix<f64>>,
}

impl GradCheckInstance {
    pub fn random(dims: GradCheckDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = LstmStack::uniform(dims.input, dims.hidden, dims.layers, 0.5, &mut rng);
        let mut mat = |r: usize, c: usize, s: f64| Matrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
        let xs = (0..dims.steps).map(|_| mat(dims.batch, dims.input, 1.0)).collect();
        let initial = LstmState {
            h: (0..dims.layers).map(|_| mat(dims.batch, dims.hidden, 0.5)).collect(),
            c: (0..dims.layers).map(|_| mat(dims.batch, dims.hidden, 0.5)).collect(),
        };
        let targets = (0..dims.steps).map(|_| mat(dims.batch, dims.hidden, 0.5)).collect();
        GradCheckInstance {
            stack,
            xs,
            initial,
            targets,
        }
    }

    /// All weights and inputs zero; the state and targets stay random.
    pub fn zeroed(mut self) -> Self {
        for layer in &mut self.stack.layers {
            layer.w.fill(0.0);
            layer.u.fill(0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        self.xs.iter_mut().for_each(|x| x.fill(0.0));
        self
    }

    pub fn loss(&self) -> Result<f64> {
        let (outputs, _, _) = self.stack.forward(&self.xs, &self.initial)?;
        Ok(squared_error(&outputs, &self.targets).0)
    }
}

fn squared_error(outputs: &[Matrix<f64>], targets: &[Matrix<f64>]) -> (f64, Vec<Matrix<f64>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (h, y) in outputs.iter().zip(targets) {
        let mut d = h.clone();
        d.axpy(-1.0, y).expect("matching shapes");
        loss += 0.5 * d.sum_squares();
        grads.push(d);
    }
    (loss, grads)
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err <= threshold
    }

    pub fn get(&self, name: &str) -> Option<&TensorReport> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares every entry of dW, dU, db (per layer) and dx against central
/// differences of the loss.
pub fn check_instance(instance: &GradCheckInstance, step: f64) -> Result<GradCheckReport> {
    let targets = instance.targets.clone();
    let out = instance.stack.run_bptt(
        &instance.xs,
        &instance.initial,
        &SparsifierConfig::Identity,
        &mut MacCounter::new(),
        move |outputs| Ok(squared_error(outputs, &targets)),
    )?;

    let mut probe = instance.clone();
    // The divisor is the exact spacing of the two perturbed values.
    let inputs = dd::layer_inputs(instance);
    let mut numeric = |first: usize, slot: &mut dyn for<'a> FnMut(&'a mut GradCheckInstance) -> &'a mut f64| -> Result<f64> {
        let orig = *slot(&mut probe);
        let (up, down) = (orig + step, orig - step);
        *slot(&mut probe) = up;
        let plus = dd::loss(&probe, first, &inputs);
        *slot(&mut probe) = down;
        let minus = dd::loss(&probe, first, &inputs);
        *slot(&mut probe) = orig;
        Ok(((plus - minus) / (dd::Dd::from_f64(up) - dd::Dd::from_f64(down))).to_f64())
    };

    let mut tensors = Vec::new();
    for (l, grads) in out.grads.iter().enumerate() {
        let mut worst = [0.0f64; 3];
        for (idx, &a) in grads.dw.data().iter().enumerate() {
            let n = numeric(l, &mut |p| &mut p.stack.layers[l].w.data_mut()[idx])?;
            worst[0] = worst[0].max(relative_error(a, n));
        }
        for (idx, &a) in grads.du.data().iter().enumerate() {
            let n = numeric(l, &mut |p| &mut p.stack.layers[l].u.data_mut()[idx])?;
            worst[1] = worst[1].max(relative_error(a, n));
        }
        for (idx, &a) in grads.db.iter().enumerate() {
            let n = numeric(l, &mut |p| &mut p.stack.layers[l].b[idx])?;
            worst[2] = worst[2].max(relative_error(a, n));
        }
        let sizes = [grads.dw.data().len(), grads.du.data().len(), grads.db.len()];
        for ((suffix, err), entries) in ["W", "U", "b"].iter().zip(worst).zip(sizes) {
            tensors.push(TensorReport {
                name: format!("layer{l}.{suffix}"),
                entries,
                max_rel_err: err,
            });
        }
    }
    let mut worst_x = 0.0f64;
    let mut entries = 0;
    for (t, dx) in out.dxs.iter().enumerate() {
        for (idx, &a) in dx.data().iter().enumerate() {
            let n = numeric(0, &mut |p| &mut p.xs[t].data_mut()[idx])?;
            worst_x = worst_x.max(relative_error(a, n));
            entries += 1;
        }
    }
    tensors.push(TensorReport {
        name: "x".into(),
        entries,
        max_rel_err: worst_x,
    });
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_err })
}

pub fn grad_check(dims: GradCheckDims, seed: u64) -> Result<GradCheckReport> {
    if dims.batch == 0 || dims.hidden == 0 || dims.input == 0 || dims.steps == 0 || dims.layers == 0 {
        return Err(Error::Parameter("gradient check dimensions must be positive".into()));
    }
    check_instance(&GradCheckInstance::random(dims, seed), DEFAULT_STEP)
}
