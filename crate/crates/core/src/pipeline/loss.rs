use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dit::{flow_interpolate, flow_loss};
use crate::error::Result;
use crate::focus::{focus_loss_tape, focus_score, response_maps};
use crate::mgsa::align_loss;
use crate::model::{PreparedSample, TryOnModel};
use crate::params::Binder;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diff: f64,
    pub align: f64,
    pub focus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { diff: 1.0, align: 1.0, focus: 0.05 }
    }
}

impl LossWeights {
    pub fn combine(&self, diff: f64, align: f64, focus: f64) -> f64 {
        self.diff * diff + self.align * align + self.focus * focus
    }
}

/// Raw loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub diff: f64,
    pub align: f64,
    pub focus: f64,
}

impl LossReport {
    fn add_scaled(&mut self, o: &LossReport, w: f64) {
        self.total += w * o.total;
        self.diff += w * o.diff;
        self.align += w * o.align;
        self.focus += w * o.focus;
    }
}

/// Tape nodes of one sample's objective.
pub struct SampleLoss {
    pub total: Var,
    pub report: LossReport,
    /// Mean fraction of supervised attention mass inside the target masks.
    pub focus_score: f64,
}

/// Builds the weighted objective of one sample at time `t` with noise `eps`.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    model: &TryOnModel<T>,
    prep: &PreparedSample<T>,
    t: f64,
    eps: &Matrix<T>,
    weights: &LossWeights,
) -> Result<SampleLoss> {
    let z_t = flow_interpolate(&prep.z0, eps, T::of(t));
    let out = model.forward(tape, binder, &prep.cond, &z_t, t)?;
    let diff = flow_loss(tape, out.dit.velocity, &prep.z0, eps);
    let align = align_loss(tape, out.projected, &prep.t_v);
    let focus = focus_loss_tape(tape, &out.dit.attn, model.config.dit.heads, &out.dit.segmap, &prep.focus)?;
    let total = tape.weighted_sum(&[
        (diff, T::of(weights.diff)),
        (align, T::of(weights.align)),
        (focus, T::of(weights.focus)),
    ]);
    let report = LossReport {
        total: tape.scalar(total).f64(),
        diff: tape.scalar(diff).f64(),
        align: tape.scalar(align).f64(),
        focus: tape.scalar(focus).f64(),
    };
    let means: Vec<Matrix<T>> = out
        .dit
        .attn
        .iter()
        .map(|&a| head_mean_value(tape.value(a), model.config.dit.heads))
        .collect();
    let maps = response_maps(&means, &out.dit.segmap, &prep.focus)?;
    let mut score = 0.0;
    for (m, target) in maps.iter().zip(prep.focus.iter().cycle()) {
        score += focus_score(&m.values, &target.mask).unwrap_or(0.0);
    }
    let focus_score = score / maps.len().max(1) as f64;
    Ok(SampleLoss { total, report, focus_score })
}

pub fn head_mean_value<T: Scalar>(probs: &Matrix<T>, heads: usize) -> Matrix<T> {
    let n = probs.rows() / heads;
    let inv = T::of(1.0 / heads as f64);
    Matrix::from_fn(n, probs.cols(), |r, c| (0..heads).map(|h| probs.get(h * n + r, c)).sum::<T>() * inv)
}

/// Mean objective over a batch, with each sample's `(t, eps)` given.
pub fn total_loss<T: Scalar>(
    model: &TryOnModel<T>,
    batch: &[(&PreparedSample<T>, f64, Matrix<T>)],
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut report = LossReport::default();
    let w = 1.0 / batch.len().max(1) as f64;
    for (prep, t, eps) in batch {
        let mut tape = Tape::new();
        let mut binder = Binder::inference(&model.store);
        let l = sample_loss(&mut tape, &mut binder, model, prep, *t, eps, weights)?;
        report.add_scaled(&l.report, w);
    }
    Ok(report)
}

pub(crate) fn accumulate_report(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.add_scaled(r, w);
}
