use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ImageError, Mask, RgbImage};
use crate::toyworld::{
    extract_attributes, flat_silhouette, linf, model_free_sample, random_garment, random_person, render_flat_garment,
    render_person, Canvas, FilterRecord, GarmentSpec, Pattern, Rgb, Slot, Task, ToyworldError, TrainingSample,
};

/// Reference value of the perceptual threshold. The stand-in distance uses [`DEFAULT_TAU`].
pub const REFERENCE_TAU: f64 = 0.35;
/// The 0.99 quantile of [`genuine_pair`] distances over seeds `0..500`, rounded to 0.15.
pub const DEFAULT_TAU: f64 = 0.15;
/// Seeds of the calibration sweep.
pub const CALIBRATION_SEEDS: std::ops::Range<u64> = 0..500;
pub const MAX_COLOR_LINF: f32 = 0.15;
/// Side of the square box that mask crops are resampled into.
pub const CROP_BOX: usize = 32;
const GRID: usize = 4;
const BINS: usize = 8;

fn size_check(a: &RgbImage, b: &RgbImage) -> Result<(), ToyworldError> {
    if a.size() != b.size() {
        return Err(ImageError::SizeMismatch(a.size(), b.size()).into());
    }
    Ok(())
}

fn grid_means(img: &RgbImage) -> Vec<f64> {
    let (h, w) = img.size();
    let mut out = vec![0.0; GRID * GRID * 3];
    let mut counts = vec![0usize; GRID * GRID];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * GRID / h) * GRID + x * GRID / w;
            counts[cell] += 1;
            for (c, v) in img.pixel(y, x).into_iter().enumerate() {
                out[cell * 3 + c] += v as f64;
            }
        }
    }
    for (cell, n) in counts.into_iter().enumerate() {
        for c in 0..3 {
            out[cell * 3 + c] /= n.max(1) as f64;
        }
    }
    out
}

fn histograms(img: &RgbImage) -> Vec<f64> {
    let mut h = vec![0.0; 3 * BINS];
    for px in img.data().chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            let bin = ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1);
            h[c * BINS + bin] += 1.0;
        }
    }
    let n = (img.data().len() / 3).max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// `0.5 * RMSE` of 4×4 block means plus `0.5 * (1 - intersection)` of 8-bin
/// per-channel histograms (intersection averaged over channels).
pub fn perceptual_distance(a: &RgbImage, b: &RgbImage) -> Result<f64, ToyworldError> {
    size_check(a, b)?;
    let (ga, gb) = (grid_means(a), grid_means(b));
    let rmse = (ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ga.len() as f64).sqrt();
    let (ha, hb) = (histograms(a), histograms(b));
    let inter = ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum::<f64>() / 3.0;
    Ok(0.5 * rmse + 0.5 * (1.0 - inter))
}

/// Crops the mask's bounding box, fills unmasked pixels from the nearest masked
/// pixel in the same row (or the nearest filled row), and resamples to `box_size²`.
pub fn masked_crop(img: &RgbImage, mask: &Mask, box_size: usize) -> Result<RgbImage, ToyworldError> {
    if img.size() != mask.size() {
        return Err(ImageError::SizeMismatch(img.size(), mask.size()).into());
    }
    let (y0, x0, y1, x1) = mask.bbox().ok_or_else(|| ToyworldError::Validation("empty region mask".into()))?;
    let (h, w) = (y1 - y0, x1 - x0);
    let mut rows: Vec<Option<Vec<[f32; 3]>>> = Vec::with_capacity(h);
    for y in y0..y1 {
        let on: Vec<usize> = (x0..x1).filter(|&x| mask.get(y, x)).collect();
        if on.is_empty() {
            rows.push(None);
            continue;
        }
        let row = (x0..x1)
            .map(|x| {
                let nearest = *on.iter().min_by_key(|&&m| m.abs_diff(x)).expect("non-empty");
                img.pixel(y, nearest)
            })
            .collect();
        rows.push(Some(row));
    }
    let filled: Vec<usize> = (0..h).filter(|&r| rows[r].is_some()).collect();
    let mut out = RgbImage::filled(box_size, box_size, [0.0; 3]);
    for oy in 0..box_size {
        let sy = oy * h / box_size;
        let r = *filled.iter().min_by_key(|&&r| r.abs_diff(sy)).expect("mask has a row");
        let row = rows[r].as_ref().expect("filled row");
        for ox in 0..box_size {
            out.put(oy, ox, row[ox * w / box_size]);
        }
    }
    Ok(out)
}

/// A garment region and the lay-flat garment it should show.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterPair {
    pub region: RgbImage,
    pub region_mask: Mask,
    pub flat: RgbImage,
    pub flat_mask: Mask,
}

impl FilterPair {
    pub fn distance(&self) -> Result<f64, ToyworldError> {
        let a = masked_crop(&self.region, &self.region_mask, CROP_BOX)?;
        let b = masked_crop(&self.flat, &self.flat_mask, CROP_BOX)?;
        perceptual_distance(&a, &b)
    }

    /// Same slot, same pattern and matching color.
    ///
    /// Colors match when the dominant colors are within [`MAX_COLOR_LINF`], or, for
    /// two-tone patterns, when both two-color palettes match as unordered pairs.
    pub fn consistent(&self) -> Result<bool, ToyworldError> {
        let a = extract_attributes(&self.region, &self.region_mask)?;
        let b = extract_attributes(&self.flat, &self.flat_mask)?;
        if a.slot != b.slot || a.pattern != b.pattern {
            return Ok(false);
        }
        if linf(a.dominant_color, b.dominant_color) <= MAX_COLOR_LINF {
            return Ok(true);
        }
        if a.pattern == Pattern::Solid {
            return Ok(false);
        }
        let (pa, pb) = (palette(&self.region, &self.region_mask)?, palette(&self.flat, &self.flat_mask)?);
        let close = |x: Rgb, y: Rgb| linf(x, y) <= MAX_COLOR_LINF;
        Ok((close(pa[0], pb[0]) && close(pa[1], pb[1])) || (close(pa[0], pb[1]) && close(pa[1], pb[0])))
    }
}

/// Two-means color clustering of the masked pixels, seeded with the channel-wise
/// median and the masked pixel farthest from it.
pub fn palette(img: &RgbImage, mask: &Mask) -> Result<[Rgb; 2], ToyworldError> {
    if img.size() != mask.size() {
        return Err(ImageError::SizeMismatch(img.size(), mask.size()).into());
    }
    let (h, w) = mask.size();
    let px: Vec<Rgb> =
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| mask.get(y, x)).map(|(y, x)| img.pixel(y, x)).collect();
    if px.is_empty() {
        return Err(ToyworldError::EmptyMask);
    }
    let d2 = |a: Rgb, b: Rgb| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f32>();
    let first = extract_attributes(img, mask)?.dominant_color;
    let far = *px.iter().max_by(|a, b| d2(**a, first).total_cmp(&d2(**b, first))).expect("non-empty");
    let mut centers = [first, far];
    for _ in 0..8 {
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for &p in &px {
            let k = (d2(p, centers[1]) < d2(p, centers[0])) as usize;
            counts[k] += 1;
            for c in 0..3 {
                sums[k][c] += p[c] as f64;
            }
        }
        for k in 0..2 {
            if counts[k] > 0 {
                centers[k] = std::array::from_fn(|c| (sums[k][c] / counts[k] as f64) as f32);
            }
        }
    }
    Ok(centers)
}

/// Region/flat pairs a synthesized sample is checked on.
///
/// Multi-garment: each worn slot of the target against its generated flat.
/// Model-to-model: the generated person's garment against the source flat.
pub fn filter_pairs(sample: &TrainingSample) -> Result<Vec<FilterPair>, ToyworldError> {
    match sample.task {
        Task::MultiGarment => {
            let masks = sample
                .slot_masks
                .as_ref()
                .ok_or_else(|| ToyworldError::Validation("multi-garment sample lacks slot masks".into()))?;
            Ok([Slot::Top, Slot::Bottom]
                .iter()
                .enumerate()
                .map(|(i, &slot)| FilterPair {
                    region: sample.target.clone(),
                    region_mask: masks.get(slot).clone(),
                    flat: sample.refs[i].clone(),
                    flat_mask: sample.ref_masks[i].clone(),
                })
                .collect())
        }
        Task::ModelToModel => {
            let g = sample
                .specs
                .garments
                .first()
                .ok_or_else(|| ToyworldError::Validation("model-to-model sample lacks its garment".into()))?;
            let canvas = sample.canvas();
            Ok(vec![FilterPair {
                region: sample.refs[0].clone(),
                region_mask: sample.ref_masks[0].clone(),
                flat: render_flat_garment(g, canvas)?,
                flat_mask: flat_silhouette(g.slot, canvas),
            }])
        }
        other => Err(ToyworldError::Validation(format!("no synthesis filter for task {other}"))),
    }
}

/// Perceptual gate: the worst pair distance must not exceed `tau`.
pub fn filter_stage1(pairs: &[FilterPair], tau: f64) -> Result<(bool, f64), ToyworldError> {
    if pairs.is_empty() {
        return Err(ToyworldError::Validation("nothing to filter".into()));
    }
    let mut worst = 0.0f64;
    for p in pairs {
        worst = worst.max(p.distance()?);
    }
    Ok((worst <= tau, worst))
}

/// Attribute gate: every pair must agree on slot, pattern and color.
pub fn filter_stage2(pairs: &[FilterPair]) -> Result<bool, ToyworldError> {
    for p in pairs {
        if !p.consistent()? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Both gates. Stage 2 runs even when stage 1 fails, so records are complete.
pub fn filter_sample(sample: &TrainingSample, tau: f64) -> Result<FilterRecord, ToyworldError> {
    let pairs = filter_pairs(sample)?;
    let (stage1_pass, distance) = filter_stage1(&pairs, tau)?;
    Ok(FilterRecord { distance, stage1_pass, stage2_pass: filter_stage2(&pairs)? })
}

fn worn_pair(g: &GarmentSpec, seed: u64, canvas: Canvas) -> Result<FilterPair, ToyworldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let person = random_person(canvas, &mut rng);
    let s = model_free_sample(&person, *g, seed, canvas)?;
    Ok(FilterPair {
        region: s.target,
        region_mask: s.target_mask,
        flat: s.refs[0].clone(),
        flat_mask: s.ref_masks[0].clone(),
    })
}

/// A person wearing a garment next to that garment lay-flat.
///
/// Even seeds show a fully dressed person, odd seeds a person wearing only the garment.
pub fn genuine_pair(seed: u64, canvas: Canvas) -> Result<FilterPair, ToyworldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F11E);
    let slot = if rng.random_bool(0.5) { Slot::Top } else { Slot::Bottom };
    if seed % 2 == 1 {
        let g = random_garment(slot, canvas, &mut rng);
        return worn_pair(&g, rng.random(), canvas);
    }
    let person = random_person(canvas, &mut rng);
    let r = render_person(&person, canvas)?;
    let g = person.garment(slot).expect("random people wear both slots");
    Ok(FilterPair {
        region: r.image.clone(),
        region_mask: r.mask(slot).clone(),
        flat: render_flat_garment(g, canvas)?,
        flat_mask: flat_silhouette(slot, canvas),
    })
}

/// [`genuine_pair`] with the flat swapped for a different random garment of the same slot.
pub fn corrupted_pair(seed: u64, canvas: Canvas) -> Result<FilterPair, ToyworldError> {
    let mut pair = genuine_pair(seed, canvas)?;
    let slot = extract_attributes(&pair.flat, &pair.flat_mask)?.slot;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBAD_F1A7);
    let original = pair.flat.clone();
    loop {
        let other = random_garment(slot, canvas, &mut rng);
        let flat = render_flat_garment(&other, canvas)?;
        if flat != original {
            pair.flat = flat;
            return Ok(pair);
        }
    }
}

/// Smallest `tau` that passes at least `quantile` of `distances`.
pub fn calibrate_tau(distances: &[f64], quantile: f64) -> f64 {
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    if d.is_empty() {
        return 0.0;
    }
    let k = ((quantile * d.len() as f64).ceil() as usize).clamp(1, d.len());
    d[k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 12 * 3).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        RgbImage::from_vec(16, 12, data)
    }

    #[test]
    fn distance_closed_forms() {
        let black = RgbImage::filled(8, 8, [0.0; 3]);
        let white = RgbImage::filled(8, 8, [1.0; 3]);
        assert_eq!(perceptual_distance(&black, &black).unwrap(), 0.0);
        assert!((perceptual_distance(&black, &white).unwrap() - 1.0).abs() < 1e-12);
        assert!(perceptual_distance(&black, &RgbImage::filled(8, 9, [0.0; 3])).is_err());
    }

    #[test]
    fn identical_crops_pass_and_tau_zero_needs_exact_match() {
        let p = genuine_pair(3, Canvas::default()).unwrap();
        let same = FilterPair { flat: p.region.clone(), flat_mask: p.region_mask.clone(), ..p.clone() };
        assert_eq!(filter_stage1(std::slice::from_ref(&same), 1e-9).unwrap().0, true);
        assert!(filter_stage1(std::slice::from_ref(&same), 0.0).unwrap().0);
        assert!(!filter_stage1(&[corrupted_pair(3, Canvas::default()).unwrap()], 0.0).unwrap().0);
    }

    #[test]
    fn solid_color_mismatch_fails_stage2() {
        let c = Canvas::default();
        let mut g = random_garment(Slot::Top, c, &mut ChaCha8Rng::seed_from_u64(1));
        g.pattern = crate::toyworld::Pattern::Solid;
        g.base_color = [1.0, 0.0, 0.0];
        let mut pair = worn_pair(&g, 4, c).unwrap();
        assert!(pair.consistent().unwrap());
        g.base_color = [0.0, 0.0, 1.0];
        pair.flat = render_flat_garment(&g, c).unwrap();
        assert!(!pair.consistent().unwrap());
    }

    #[test]
    fn empty_region_mask_is_an_error() {
        let mut p = genuine_pair(0, Canvas::default()).unwrap();
        p.region_mask = Mask::empty(64, 48);
        assert!(p.distance().is_err());
        assert!(p.consistent().is_err());
    }

    #[test]
    fn default_tau_reproduces_from_sweep() {
        let c = Canvas::default();
        let d: Vec<f64> = CALIBRATION_SEEDS.map(|s| genuine_pair(s, c).unwrap().distance().unwrap()).collect();
        assert!((calibrate_tau(&d, 0.99) - DEFAULT_TAU).abs() < 0.005);
        let pass = d.iter().filter(|&&x| x <= DEFAULT_TAU).count();
        assert!(pass * 100 >= 95 * d.len(), "{pass}");
    }

    #[test]
    fn two_tone_palette_is_order_free() {
        let c = Canvas::default();
        let mut g = random_garment(Slot::Top, c, &mut ChaCha8Rng::seed_from_u64(2));
        g.pattern = Pattern::Stripes;
        g.base_color = [0.9, 0.1, 0.1];
        g.pattern_color = [0.1, 0.1, 0.9];
        let flat = render_flat_garment(&g, c).unwrap();
        let mut p = palette(&flat, &flat_silhouette(Slot::Top, c)).unwrap();
        p.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(linf(p[0], g.pattern_color) < 1e-3 && linf(p[1], g.base_color) < 1e-3, "{p:?}");
    }

    #[test]
    fn calibration_quantile() {
        let d: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(calibrate_tau(&d, 0.95), 0.95);
        assert_eq!(calibrate_tau(&d, 1.0), 1.0);
    }

    proptest! {
        #[test]
        fn distance_symmetric(a in 0u64..1000, b in 0u64..1000) {
            let (x, y) = (random_image(a), random_image(b));
            let d1 = perceptual_distance(&x, &y).unwrap();
            prop_assert!((d1 - perceptual_distance(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!(d1 >= 0.0);
        }

        #[test]
        fn stage1_monotone(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, tau in 0.0f64..1.0) {
            // Pass is a threshold on the distance, so a smaller distance never fails where a larger passes.
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            prop_assert!(!(hi <= tau) || lo <= tau);
        }
    }
}
