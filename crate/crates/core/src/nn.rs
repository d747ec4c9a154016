//! Small building blocks shared by the query encoder and the generator.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// LeCun-normal weights (`std = gain / sqrt(fan_in)`), zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.normal(&format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng);
        let b = bias.then(|| store.zeros(&format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn zero_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.zeros(&format!("{name}.w"), fan_in, fan_out);
        let b = Some(store.zeros(&format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.var(tape, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = p.var(tape, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer norm with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self { gamma: store.ones(&format!("{name}.gamma"), 1, dim), beta: store.zeros(&format!("{name}.beta"), 1, dim) }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var) -> Var {
        let n = tape.layer_norm(x, T::of(LN_EPS));
        let g = p.var(tape, self.gamma);
        let b = p.var(tape, self.beta);
        tape.row_affine(n, g, b, T::zero())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention width must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, 1.0, rng),
            heads,
        }
    }

    /// Self-attention; returns the projected output and the per-head probabilities.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var, causal: bool) -> (Var, Var) {
        let q = self.q.forward(tape, p, x);
        let k = self.k.forward(tape, p, x);
        let v = self.v.forward(tape, p, x);
        let probs = tape.attn_scores(q, k, self.heads, causal);
        let mixed = tape.attn_mix(probs, v, self.heads);
        (self.o.forward(tape, p, mixed), probs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim_in, hidden, true, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim_out, true, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var) -> Var {
        let h = self.fc1.forward(tape, p, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Sinusoidal code of a scalar position or timestep, `dim` wide.
pub fn sinusoidal<T: Scalar>(pos: f64, dim: usize, max_period: f64) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of((pos * freq).cos());
        out[half + i] = T::of((pos * freq).sin());
    }
    out
}
