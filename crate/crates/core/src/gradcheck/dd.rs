//! Double-double arithmetic (about 106 significant bits) and an
//! independent LSTM forward pass built on it. Used only to evaluate the
//! loss for finite differences, where plain `f64` rounding noise would
//! otherwise dominate small gradient entries.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

use super::GradCheckInstance;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `1/2!, 1/3!, ...` up to `1/12!`.
fn inverse_factorials() -> &'static [Dd] {
    static TABLE: OnceLock<Vec<Dd>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut f = Dd::ONE;
        (2..=12)
            .map(|n| {
                f = f / Dd::from_f64(n as f64);
                f
            })
            .collect()
    })
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_pow2(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        // exp(x) = 2^k * exp(r)^(2^9) with |r| <= ln2 / 2^10.
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN2 * Dd::from_f64(k)).mul_pow2(-9);
        let inv = inverse_factorials();
        let mut power = r;
        let mut sum = r;
        for c in inv {
            power = power * r;
            let term = power * *c;
            sum = sum + term;
            if term.hi.abs() <= 1e-33 * sum.hi.abs() {
                break;
            }
        }
        // sum = exp(r) - 1; square nine times keeping the "- 1" form.
        for _ in 0..9 {
            sum = sum * Dd::from_f64(2.0) + sum * sum;
        }
        (sum + Dd::ONE).mul_pow2(k as i32)
    }

    pub fn sigmoid(self) -> Dd {
        Dd::ONE / (Dd::ONE + (-self).exp())
    }

    pub fn tanh(self) -> Dd {
        if self.hi < 0.0 {
            return -(-self).tanh();
        }
        let e = (self * Dd::from_f64(-2.0)).exp();
        (Dd::ONE - e) / (Dd::ONE + e)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

fn to_dd(m: &crate::tensor::Matrix<f64>) -> Vec<Dd> {
    m.data().iter().map(|&v| Dd::from_f64(v)).collect()
}

/// Runs layer `l` of `instance` over the whole sequence `inputs`.
fn run_layer(instance: &GradCheckInstance, l: usize, inputs: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    let p = &instance.stack.layers[l];
    let (hid, d) = (p.hidden(), p.input_dim());
    let w: Vec<Dd> = to_dd(&p.w);
    let u: Vec<Dd> = to_dd(&p.u);
    let mut h = to_dd(&instance.initial.h[l]);
    let mut c = to_dd(&instance.initial.c[l]);
    let n = h.len() / hid;
    let mut outputs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut h_new = vec![Dd::ZERO; n * hid];
        for r in 0..n {
            let (xr, hr) = (&x[r * d..(r + 1) * d], &h[r * hid..(r + 1) * hid]);
            let net = |j: usize| {
                let mut acc = Dd::from_f64(p.b[j]);
                for (a, b) in xr.iter().zip(&w[j * d..(j + 1) * d]) {
                    acc = acc + *a * *b;
                }
                for (a, b) in hr.iter().zip(&u[j * hid..(j + 1) * hid]) {
                    acc = acc + *a * *b;
                }
                acc
            };
            for k in 0..hid {
                let i = net(k).sigmoid();
                let f = net(hid + k).sigmoid();
                let o = net(2 * hid + k).sigmoid();
                let g = net(3 * hid + k).tanh();
                let cc = f * c[r * hid + k] + i * g;
                c[r * hid + k] = cc;
                h_new[r * hid + k] = o * cc.tanh();
            }
        }
        h = h_new.clone();
        outputs.push(h_new);
    }
    outputs
}

/// Per-layer input sequences of the unperturbed instance; entry `l` holds
/// what layer `l` sees at every step.
pub fn layer_inputs(instance: &GradCheckInstance) -> Vec<Vec<Vec<Dd>>> {
    let mut seqs = vec![instance.xs.iter().map(to_dd).collect::<Vec<_>>()];
    for l in 0..instance.stack.layers.len() - 1 {
        let next = run_layer(instance, l, &seqs[l]);
        seqs.push(next);
    }
    seqs
}

/// `0.5 * sum_t |h_top_t - y_t|^2` in double-double, recomputing layers
/// from `first` upwards on top of the cached `inputs[first]`. Layer 0 always
/// reads `instance.xs`.
pub fn loss(instance: &GradCheckInstance, first: usize, inputs: &[Vec<Vec<Dd>>]) -> Dd {
    let mut seq = if first == 0 {
        instance.xs.iter().map(to_dd).collect()
    } else {
        inputs[first].clone()
    };
    for l in first..instance.stack.layers.len() {
        seq = run_layer(instance, l, &seq);
    }
    let mut total = Dd::ZERO;
    for (h, y) in seq.iter().zip(&instance.targets) {
        for (hv, &yv) in h.iter().zip(y.data()) {
            let diff = *hv - Dd::from_f64(yv);
            total = total + diff * diff;
        }
    }
    total * Dd::from_f64(0.5)
}
