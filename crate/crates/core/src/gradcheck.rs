//! Finite-difference checks of the three training objectives in 64-bit arithmetic.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dit::{gaussian_noise, DitConfig};
use crate::error::Result;
use crate::mgsa::MgsaConfig;
use crate::model::{ModelConfig, PreparedSample, TryOnModel};
use crate::params::{Binder, ParamId};
use crate::pipeline::{sample_loss, LossWeights};
use crate::tensor::Matrix;
use crate::toyworld::{make_task_sample, Canvas, Task};

pub const FD_STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Align,
    Focus,
    Diff,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::Align, Term::Focus, Term::Diff];

    fn weights(self) -> LossWeights {
        let pick = |t: Term| if t == self { 1.0 } else { 0.0 };
        LossWeights { diff: pick(Term::Diff), align: pick(Term::Align), focus: pick(Term::Focus) }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::Align => "align",
            Term::Focus => "focus",
            Term::Diff => "diff",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub term: Term,
    /// Parameter entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter entry with the largest error.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

/// A model small enough to difference every parameter group quickly.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        canvas: Canvas { height: 16, width: 16 },
        patch: 8,
        mgsa: MgsaConfig { d_q: 8, heads: 2, layers: 1, max_seq: 64, d_v: 8 },
        dit: DitConfig { d_model: 8, heads: 2, layers: 2, mlp_ratio: 2 },
    }
}

/// `|a - n| / max(|a|, |n|)`, or the plain difference when both are below the floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn loss(model: &TryOnModel<f64>, prep: &PreparedSample<f64>, t: f64, eps: &Matrix<f64>, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::inference(&model.store);
    let l = sample_loss(&mut tape, &mut binder, model, prep, t, eps, w)?;
    Ok(tape.scalar(l.total))
}

/// Compares the tape gradient of one term with central differences on up to
/// `per_param` seeded entries of every parameter.
pub fn check_term(term: Term, seed: u64, per_param: usize) -> Result<GradCheck> {
    let config = tiny_config();
    let mut model = TryOnModel::<f64>::new(config.clone(), seed)?;
    let sample = make_task_sample(Task::SingleGarment, seed, config.canvas)?;
    let prep = model.prepare(&sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6EAD);
    let t = 0.2 + 0.6 * rng.random::<f64>();
    let eps = gaussian_noise(model.dit.n_tokens, model.dit.d_in, &mut rng);
    let w = term.weights();

    let analytic: Vec<(ParamId, Matrix<f64>)> = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let l = sample_loss(&mut tape, &mut binder, &model, &prep, t, &eps, &w)?;
        let mut g = tape.backward(l.total);
        binder.collect(&mut g)
    };

    let mut report = GradCheck { term, checked: 0, max_rel_err: 0.0, worst: String::new() };
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).len();
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone());
        let picks: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.random_range(0..n)).collect() };
        for k in picks {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = loss(&model, &prep, t, &eps, &w)?;
            model.store.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = loss(&model, &prep, t, &eps, &w)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[k]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{k}] analytic {a:.6e} numeric {numeric:.6e}", model.store.name(id));
            }
        }
    }
    Ok(report)
}

/// All three terms.
pub fn run_suite(seed: u64, per_param: usize) -> Result<Vec<GradCheck>> {
    Term::ALL.iter().map(|&t| check_term(t, seed, per_param)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }

    #[test]
    fn every_term_matches_finite_differences() {
        for r in run_suite(3, 4).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }
}
