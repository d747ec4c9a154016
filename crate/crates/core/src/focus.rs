//! Reference↔output attention response maps and their mask supervision.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dit::SegmentMap;
use crate::error::{ModelError, Result};
use crate::image::Mask;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toyworld::{Slot, Task, TrainingSample};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Averaged over reference tokens: one value per output token.
    OutputCentric,
    /// Averaged over output tokens: one value per reference token.
    ReferenceCentric,
}

/// Which pixel mask a response map is compared with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Target,
    TargetSlot(Slot),
    RefMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupervisionEntry {
    pub ref_index: usize,
    pub kind: MapKind,
    pub mask: MaskSource,
}

/// Which reference maps are supervised for a task, and against what.
pub fn task_supervision_plan(task: Task) -> Vec<SupervisionEntry> {
    use MapKind::*;
    use MaskSource::*;
    let e = |ref_index, kind, mask| SupervisionEntry { ref_index, kind, mask };
    match task {
        Task::SingleGarment => vec![e(1, OutputCentric, Target)],
        Task::ModelFree => vec![e(0, OutputCentric, Target)],
        Task::MultiView => vec![e(0, OutputCentric, Target), e(1, OutputCentric, Target)],
        Task::MultiGarment => vec![e(0, OutputCentric, TargetSlot(Slot::Top)), e(1, OutputCentric, TargetSlot(Slot::Bottom))],
        Task::GarmentRecon => vec![e(0, ReferenceCentric, RefMask)],
        Task::ModelToModel => vec![e(0, ReferenceCentric, RefMask), e(0, OutputCentric, Target)],
    }
}

/// Per-patch coverage of a pixel mask: entry `k` is the mean of the mask over patch `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask(pub Vec<f64>);

impl TokenMask {
    pub fn from_mask(mask: &Mask, patch: usize) -> Self {
        Self(mask.patch_fractions(patch))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A supervision entry resolved against a concrete sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusTarget {
    pub ref_index: usize,
    pub kind: MapKind,
    pub mask: TokenMask,
}

/// Resolves a task's supervision plan into token masks for `sample`.
pub fn focus_targets(sample: &TrainingSample, patch: usize) -> Result<Vec<FocusTarget>> {
    let mut out = Vec::new();
    for entry in task_supervision_plan(sample.task) {
        let mask = match entry.mask {
            MaskSource::Target => sample.target_mask.clone(),
            MaskSource::RefMask => sample
                .ref_masks
                .get(entry.ref_index)
                .ok_or(ModelError::RefIndex { index: entry.ref_index, refs: sample.refs.len() })?
                .clone(),
            MaskSource::TargetSlot(slot) => {
                let sm = sample.slot_masks.as_ref().ok_or(ModelError::EmptyMask)?;
                sm.get(slot).clone()
            }
        };
        if mask.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        out.push(FocusTarget { ref_index: entry.ref_index, kind: entry.kind, mask: TokenMask::from_mask(&mask, patch) });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnResponseMap {
    pub values: Vec<f64>,
    pub kind: MapKind,
    pub layer: usize,
    pub ref_index: usize,
}

/// Rows of reference `i`'s query positions, columns of the noisy key positions.
pub fn extract_cross_block<T: Scalar>(probs: &Matrix<T>, segmap: &SegmentMap, i: usize) -> Result<Matrix<T>> {
    let r = segmap.reference(i)?;
    let c = segmap.noisy();
    if probs.shape() != (segmap.len(), segmap.len()) {
        return Err(ModelError::Validation(format!("attention {:?} does not match sequence {}", probs.shape(), segmap.len())));
    }
    Ok(probs.block(r.start, c.start, r.len(), c.len()))
}

pub fn response_map<T: Scalar>(block: &Matrix<T>, kind: MapKind) -> Vec<f64> {
    let (rows, cols) = block.shape();
    match kind {
        MapKind::OutputCentric => {
            (0..cols).map(|c| (0..rows).map(|r| block.get(r, c).f64()).sum::<f64>() / rows as f64).collect()
        }
        MapKind::ReferenceCentric => {
            (0..rows).map(|r| block.row(r).iter().map(|v| v.f64()).sum::<f64>() / cols as f64).collect()
        }
    }
}

/// L1-normalizes a response map and a token mask to unit mass.
pub fn normalize_pair(map: &[f64], mask: &TokenMask) -> Result<(Vec<f64>, Vec<f64>)> {
    if map.len() != mask.len() {
        return Err(ModelError::Validation(format!("map length {} vs mask length {}", map.len(), mask.len())));
    }
    let ms: f64 = mask.0.iter().sum();
    if ms <= 0.0 {
        return Err(ModelError::EmptyMask);
    }
    let s = map.iter().sum::<f64>().max(NORM_EPS);
    Ok((map.iter().map(|v| v / s).collect(), mask.0.iter().map(|v| v / ms).collect()))
}

/// Mean over pairs of the mean squared difference.
pub fn focus_loss(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyMaps);
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() || a.is_empty() {
            return Err(ModelError::Validation("focus pair length mismatch".into()));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Focus loss over every captured layer, built on the tape so it can be differentiated
/// back to the attention probabilities. `attn` holds head-stacked probabilities per layer.
pub fn focus_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    attn: &[Var],
    heads: usize,
    segmap: &SegmentMap,
    targets: &[FocusTarget],
) -> Result<Var> {
    if attn.is_empty() || targets.is_empty() {
        return Err(ModelError::EmptyMaps);
    }
    let noisy = segmap.noisy();
    let mut prepared = Vec::with_capacity(targets.len());
    for t in targets {
        let r = segmap.reference(t.ref_index)?;
        let expected = match t.kind {
            MapKind::OutputCentric => noisy.len(),
            MapKind::ReferenceCentric => r.len(),
        };
        if t.mask.len() != expected {
            return Err(ModelError::Validation(format!("token mask length {} expected {expected}", t.mask.len())));
        }
        let ms: f64 = t.mask.0.iter().sum();
        if ms <= 0.0 {
            return Err(ModelError::EmptyMask);
        }
        let target = Matrix::from_vec(1, expected, t.mask.0.iter().map(|&v| T::of(v / ms)).collect());
        prepared.push((r, t.kind, target));
    }
    let w = T::of(1.0 / (attn.len() * targets.len()) as f64);
    let mut terms = Vec::with_capacity(attn.len() * targets.len());
    for &probs in attn {
        let mean = tape.head_mean(probs, heads);
        for (r, kind, target) in &prepared {
            let block = tape.slice(mean, r.start, noisy.start, r.len(), noisy.len());
            let map = match kind {
                MapKind::OutputCentric => tape.mean_over_rows(block),
                MapKind::ReferenceCentric => tape.mean_over_cols(block),
            };
            let map = tape.normalize_l1(map, T::of(NORM_EPS));
            terms.push((tape.mse_const(map, target.clone()), w));
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Fraction of a response map's mass on tokens whose mask coverage exceeds one half.
pub fn focus_score(map: &[f64], mask: &TokenMask) -> Result<f64> {
    if map.len() != mask.len() {
        return Err(ModelError::Validation("focus_score length mismatch".into()));
    }
    let total: f64 = map.iter().sum();
    if total <= 0.0 {
        return Err(ModelError::ZeroMass);
    }
    Ok(map.iter().zip(&mask.0).filter(|(_, &m)| m > 0.5).map(|(v, _)| v).sum::<f64>() / total)
}

/// Response maps of every layer for every target, from head-averaged attention matrices.
pub fn response_maps<T: Scalar>(
    head_means: &[Matrix<T>],
    segmap: &SegmentMap,
    targets: &[FocusTarget],
) -> Result<Vec<AttnResponseMap>> {
    let mut out = Vec::new();
    for (layer, probs) in head_means.iter().enumerate() {
        for t in targets {
            let block = extract_cross_block(probs, segmap, t.ref_index)?;
            out.push(AttnResponseMap { values: response_map(&block, t.kind), kind: t.kind, layer, ref_index: t.ref_index });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_shapes() {
        let recon = task_supervision_plan(Task::GarmentRecon);
        assert_eq!(recon.len(), 1);
        assert_eq!(recon[0].kind, MapKind::ReferenceCentric);
        let m2m = task_supervision_plan(Task::ModelToModel);
        assert!(m2m.iter().any(|e| e.kind == MapKind::ReferenceCentric));
        assert!(m2m.iter().any(|e| e.kind == MapKind::OutputCentric));
        let multi = task_supervision_plan(Task::MultiGarment);
        assert_eq!(multi.iter().filter(|e| e.kind == MapKind::OutputCentric).count(), 2);
    }

    #[test]
    fn hand_built_cross_block() {
        // semantic 1, noisy 2, ref0 1, ref1 2 → 6 tokens.
        let seg = SegmentMap::new(1, 2, &[1, 2]);
        let probs = Matrix::<f64>::from_fn(6, 6, |r, c| (10 * r + c) as f64);
        let b = extract_cross_block(&probs, &seg, 1).unwrap();
        assert_eq!(b, Matrix::from_vec(2, 2, vec![41.0, 42.0, 51.0, 52.0]));
        let b0 = extract_cross_block(&probs, &seg, 0).unwrap();
        assert_eq!(b0, Matrix::from_vec(1, 2, vec![31.0, 32.0]));
        assert!(extract_cross_block(&probs, &seg, 2).is_err());
    }

    #[test]
    fn response_map_hand_values() {
        let b = Matrix::<f64>::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(response_map(&b, MapKind::OutputCentric), vec![0.5, 0.5, 0.0]);
        let rc = response_map(&b, MapKind::ReferenceCentric);
        assert!((rc[0] - 1.0 / 3.0).abs() < 1e-15 && (rc[1] - 1.0 / 3.0).abs() < 1e-15);
        let u = Matrix::<f64>::filled(3, 4, 0.25);
        assert!(response_map(&u, MapKind::OutputCentric).iter().all(|&v| v == 0.25));
        assert!(response_map(&u, MapKind::ReferenceCentric).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn normalization_and_loss_values() {
        let (a, b) = normalize_pair(&[0.25, 0.75, 0.0, 0.0], &TokenMask(vec![1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(a, vec![0.25, 0.75, 0.0, 0.0]);
        assert_eq!(b, vec![0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(normalize_pair(&[1.0], &TokenMask(vec![0.0])), Err(ModelError::EmptyMask)));
        assert_eq!(focus_loss(&[(vec![1.0, 0.0], vec![0.0, 1.0])]).unwrap(), 1.0);
        assert_eq!(focus_loss(&[(b.clone(), b.clone())]).unwrap(), 0.0);
        assert!(matches!(focus_loss(&[]), Err(ModelError::EmptyMaps)));
    }

    #[test]
    fn focus_score_values() {
        let m = TokenMask(vec![1.0, 0.0]);
        assert!((focus_score(&[0.2, 0.8], &m).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(focus_score(&[0.5, 0.0], &m).unwrap(), 1.0);
        let half = TokenMask(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(focus_score(&[1.0; 4], &half).unwrap(), 0.5);
        assert!(matches!(focus_score(&[0.0, 0.0], &m), Err(ModelError::ZeroMass)));
    }
}
