//! Desk-scale evaluation: SSIM, masked pixel error and attention focus.
//!
//! FID, KID, LPIPS, CLIP and DISTS need pretrained networks and are not computed;
//! reports say so in their `note` field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::image::{Mask, RgbImage};
use crate::model::Generator;
use crate::toyworld::{Task, TrainingSample};

pub use crate::focus::focus_score;

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub const REPORT_NOTE: &str =
    "SSIM, masked MSE and attention focus only; FID/KID/LPIPS/CLIP/DISTS need pretrained networks and are not computed";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("size mismatch: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("mask is empty")]
    EmptyMask,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Mean SSIM over all 7×7 windows of two grayscale images (one window if smaller).
pub fn ssim_gray(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(MetricsError::SizeMismatch((a.len(), 1), (b.len(), 1)));
    }
    let wh = SSIM_WINDOW.min(height);
    let ww = SSIM_WINDOW.min(width);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - wh {
        for x0 in 0..=width - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (u, v) = (a[y * width + x], b[y * width + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of the luma channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.size() != b.size() {
        return Err(MetricsError::SizeMismatch(a.size(), b.size()));
    }
    let la: Vec<f64> = a.luma().into_iter().map(f64::from).collect();
    let lb: Vec<f64> = b.luma().into_iter().map(f64::from).collect();
    ssim_gray(&la, &lb, a.height(), a.width())
}

/// Mean squared error over masked pixels, averaged over channels.
pub fn masked_mse(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    if a.size() != b.size() {
        return Err(MetricsError::SizeMismatch(a.size(), b.size()));
    }
    if mask.size() != a.size() {
        return Err(MetricsError::SizeMismatch(mask.size(), a.size()));
    }
    if mask.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let mut sum = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.get(y, x) {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                sum += (0..3).map(|c| ((p[c] - q[c]) as f64).powi(2)).sum::<f64>() / 3.0;
            }
        }
    }
    Ok(sum / mask.count() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub ssim: f64,
    pub masked_mse: f64,
    /// Absent for generators without attention.
    pub focus_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub seed: u64,
    pub sampling_steps: usize,
    pub tasks: BTreeMap<Task, TaskMetrics>,
    pub note: String,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.tasks.get(&task)
    }
}

/// Sampling seed of one eval sample.
pub fn eval_seed(seed: u64, sample_seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample_seed
}

/// Samples every eval item and averages the metrics per task.
pub fn evaluate<G: Generator + ?Sized>(
    generator: &G,
    samples: &[TrainingSample],
    steps: usize,
    seed: u64,
    checkpoint: &str,
) -> Result<EvalReport> {
    let mut tasks: BTreeMap<Task, TaskMetrics> = Task::ALL.iter().map(|&t| (t, TaskMetrics::default())).collect();
    let mut focus_n: BTreeMap<Task, usize> = BTreeMap::new();
    for s in samples {
        let out = generator.generate(s, steps, eval_seed(seed, s.seed))?;
        let m = tasks.get_mut(&s.task).expect("all tasks present");
        m.n += 1;
        m.ssim += ssim(&out, &s.target)?;
        m.masked_mse += masked_mse(&out, &s.target, &s.target_mask)?;
        if let Some(f) = generator.focus_score(s)? {
            *m.focus_score.get_or_insert(0.0) += f;
            *focus_n.entry(s.task).or_default() += 1;
        }
    }
    for (task, m) in tasks.iter_mut() {
        if m.n > 0 {
            m.ssim /= m.n as f64;
            m.masked_mse /= m.n as f64;
        }
        if let (Some(f), Some(&k)) = (m.focus_score.as_mut(), focus_n.get(task)) {
            *f /= k as f64;
        }
    }
    Ok(EvalReport { checkpoint: checkpoint.to_string(), seed, sampling_steps: steps, tasks, note: REPORT_NOTE.into() })
}

/// Images placed left to right, for eyeballing.
pub fn side_by_side(images: &[&RgbImage]) -> Result<RgbImage> {
    let Some(first) = images.first() else { return Ok(RgbImage::filled(0, 0, [0.0; 3])) };
    let (h, w) = first.size();
    if let Some(bad) = images.iter().find(|i| i.size() != (h, w)) {
        return Err(MetricsError::SizeMismatch(bad.size(), (h, w)));
    }
    let mut out = RgbImage::filled(h, w * images.len(), [0.0; 3]);
    for (k, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.put(y, k * w + x, img.pixel(y, x));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::focus::TokenMask;
    use crate::model::OracleGenerator;
    use crate::toyworld::{make_task_sample, Canvas};
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> RgbImage {
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                img.put(y, x, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn ssim_identity_and_inverted_checker() {
        let checker = gray(14, 14, |y, x| if (y + x) % 2 == 0 { 0.8 } else { 0.2 });
        assert!((ssim(&checker, &checker).unwrap() - 1.0).abs() < 1e-12);
        let inv = gray(14, 14, |y, x| if (y + x) % 2 == 0 { 0.2 } else { 0.8 });
        // Every 7x7 window holds 25 pixels of one level and 24 of the other; the
        // inverted window mirrors the mean and negates the covariance.
        let p = 25.0 / 49.0;
        let ma = p * 0.8 + (1.0 - p) * 0.2;
        let mb = 1.0 - ma;
        let var = p * (1.0 - p) * 0.36;
        let odd = ((2.0 * ma * mb + C1) * (-2.0 * var + C2)) / ((ma * ma + mb * mb + C1) * (2.0 * var + C2));
        let s = ssim(&checker, &inv).unwrap();
        assert!(s < 0.0);
        assert!((s - odd).abs() < 1e-4, "{s} vs {odd}");
    }

    #[test]
    fn masked_mse_hand_case() {
        let a = RgbImage::filled(2, 2, [0.0; 3]);
        let b = gray(2, 2, |y, x| if (y, x) == (0, 0) { 1.0 } else { 0.0 });
        let first = Mask::from_fn(2, 2, |y, x| (y, x) == (0, 0));
        assert_eq!(masked_mse(&a, &b, &first).unwrap(), 1.0);
        assert_eq!(masked_mse(&a, &b, &Mask::full(2, 2)).unwrap(), 0.25);
        assert!(matches!(masked_mse(&a, &b, &Mask::empty(2, 2)), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn focus_score_examples() {
        let mask = TokenMask(vec![1.0, 0.0]);
        assert!((focus_score(&[0.2, 0.8], &mask).unwrap() - 0.2).abs() < 1e-12);
        let half = TokenMask(vec![1.0, 1.0, 0.0, 0.0]);
        assert!((focus_score(&[1.0; 4], &half).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_report_is_perfect_and_empty_is_zero() {
        let c = Canvas::default();
        let samples: Vec<_> = Task::ALL.iter().map(|&t| make_task_sample(t, 5, c).unwrap()).collect();
        let r = evaluate(&OracleGenerator, &samples, 4, 1, "oracle").unwrap();
        for t in Task::ALL {
            let m = r.task(t).unwrap();
            assert_eq!(m.n, 1);
            assert!((m.ssim - 1.0).abs() < 1e-12);
            assert_eq!(m.masked_mse, 0.0);
            assert_eq!(m.focus_score, None);
        }
        let empty = evaluate(&OracleGenerator, &[], 4, 1, "oracle").unwrap();
        assert!(empty.tasks.values().all(|m| m.n == 0));
    }

    proptest! {
        #[test]
        fn ssim_bounded_and_symmetric(a in prop::collection::vec(0.0f64..=1.0, 80), b in prop::collection::vec(0.0f64..=1.0, 80)) {
            let ab = ssim_gray(&a, &b, 8, 10).unwrap();
            let ba = ssim_gray(&b, &a, 8, 10).unwrap();
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ssim_gray(&a, &a, 8, 10).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn focus_score_scale_invariant(m in prop::collection::vec(0.01f64..1.0, 6), k in 0.1f64..100.0) {
            let mask = TokenMask(vec![1.0, 0.0, 0.7, 0.2, 1.0, 0.0]);
            let scaled: Vec<f64> = m.iter().map(|v| v * k).collect();
            prop_assert!((focus_score(&m, &mask).unwrap() - focus_score(&scaled, &mask).unwrap()).abs() < 1e-12);
        }
    }
}
