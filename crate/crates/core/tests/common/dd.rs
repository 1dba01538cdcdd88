//! Double-double arithmetic (about 32 significant digits) and a reference
//! controller objective evaluated with it. Written independently of the
//! library forward pass so finite differences of it can check the analytic
//! gradient without f64 round-off swamping small elements.

use std::ops::{Add, Div, Mul, Neg, Sub};

use taml::policy::{ControllerParams, RecurrentLayer, TaskInput, Tensor};
use taml::space::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
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

const LN2: Dd = Dd {
    hi: 0.6931471805599453,
    lo: 2.3190468138462996e-17,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn scale(self, s: f64) -> Dd {
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).scale(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=24 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    pub fn ln(self) -> Dd {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        let neg = self.hi < 0.0;
        let e = (self.scale(if neg { 2.0 } else { -2.0 })).exp();
        let t = (Dd::ONE - e) / (Dd::ONE + e);
        if neg {
            -t
        } else {
            t
        }
    }

    pub fn sigmoid(self) -> Dd {
        Dd::ONE / (Dd::ONE + (-self).exp())
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
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
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

fn lift(x: &[f64]) -> Vec<Dd> {
    x.iter().map(|&v| Dd::new(v)).collect()
}

/// `bias + weight * x` for a row-major weight.
fn affine(weight: &Tensor, bias: Option<&Tensor>, x: &[Dd]) -> Vec<Dd> {
    let cols = weight.cols();
    (0..weight.rows())
        .map(|r| {
            let row = &weight.data()[r * cols..(r + 1) * cols];
            let mut acc = bias.map_or(Dd::ZERO, |b| Dd::new(b.data()[r]));
            for (w, v) in row.iter().zip(x) {
                acc = acc + Dd::new(*w) * *v;
            }
            acc
        })
        .collect()
}

fn cell(layer: &RecurrentLayer, input: &[Dd], h: &[Dd], c: &[Dd]) -> (Vec<Dd>, Vec<Dd>) {
    let n = h.len();
    let joint: Vec<Dd> = input.iter().chain(h).copied().collect();
    let z = affine(&layer.weight, Some(&layer.bias), &joint);
    let mut c_next = Vec::with_capacity(n);
    let mut h_next = Vec::with_capacity(n);
    for k in 0..n {
        let i = z[k].sigmoid();
        let f = z[n + k].sigmoid();
        let o = z[2 * n + k].sigmoid();
        let g = z[3 * n + k].tanh();
        let ck = f * c[k] + i * g;
        h_next.push(o * ck.tanh());
        c_next.push(ck);
    }
    (h_next, c_next)
}

/// `coefficient * log pi(spec) + entropy_weight * sum of step entropies`.
pub fn reference_objective(
    params: &ControllerParams,
    task: TaskInput,
    spec: &ModelSpec,
    coefficient: f64,
    entropy_weight: f64,
) -> Dd {
    let p = params.tensors();
    let e = params.architecture().embedding_size;
    let hs = params.architecture().hidden_size;
    let mut h = [vec![Dd::ZERO; hs], vec![Dd::ZERO; hs]];
    let mut c = [vec![Dd::ZERO; hs], vec![Dd::ZERO; hs]];
    let mut log_prob = Dd::ZERO;
    let mut entropy = Dd::ZERO;
    for (d, &a) in spec.choices.iter().enumerate() {
        let mut input = match task {
            TaskInput::Task(t) => lift(p.task_embeddings.row(t)),
            TaskInput::Blank => vec![Dd::ZERO; e],
        };
        if d == 0 {
            input.extend(lift(p.start_embedding.row(0)));
        } else {
            input.extend(lift(p.action_embeddings[d - 1].row(spec.choices[d - 1])));
        }
        let (h0, c0) = cell(&p.layers[0], &input, &h[0], &c[0]);
        let (h1, c1) = cell(&p.layers[1], &h0, &h[1], &c[1]);
        let skip = affine(&p.skip, None, &input);
        let top: Vec<Dd> = h1.iter().zip(&skip).map(|(a, b)| *a + *b).collect();
        let logits = affine(&p.output_weights[d], Some(&p.output_biases[d]), &top);
        let max = logits.iter().map(|z| z.hi).fold(f64::NEG_INFINITY, f64::max);
        let mut total = Dd::ZERO;
        for z in &logits {
            total = total + (*z - Dd::new(max)).exp();
        }
        let lse = Dd::new(max) + total.ln();
        let logp: Vec<Dd> = logits.iter().map(|z| *z - lse).collect();
        log_prob = log_prob + logp[a];
        for l in &logp {
            entropy = entropy - l.exp() * *l;
        }
        h = [h0, h1];
        c = [c0, c1];
    }
    Dd::new(coefficient) * log_prob + Dd::new(entropy_weight) * entropy
}

/// Spot checks of the elementary functions against known values.
pub fn self_check() -> bool {
    let x = Dd::new(0.7);
    let third = Dd::ONE / Dd::new(3.0);
    (x.exp().ln() - x).to_f64().abs() < 1e-27
        && (Dd::new(1.0).exp().to_f64() - std::f64::consts::E).abs() < 1e-15
        && (Dd::new(0.3).tanh().to_f64() - 0.3f64.tanh()).abs() < 1e-16
        && ((third * Dd::new(3.0)) - Dd::ONE).to_f64().abs() < 1e-31
}
