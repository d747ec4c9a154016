use super::{Pattern, Result, Rgb, Slot, ToyworldError};
use crate::image::{Mask, RgbImage};

/// Coarse garment description recovered from pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarmentAttributes {
    pub dominant_color: Rgb,
    pub pattern: Pattern,
    pub slot: Slot,
}

/// Pixels farther than this (L∞) from the dominant color count as pattern pixels.
const FAR: f32 = 0.1;
/// Below this fraction of pattern pixels the garment is solid.
const SOLID_MAX_FAR: f64 = 0.03;
/// Horizontal/vertical transition ratio under which the texture is horizontal stripes.
const STRIPE_RATIO: f64 = 0.15;
/// Rows and columns need a contiguous masked run at least this long to vote on dots
/// vs checker. Any such run crosses a checker cell boundary for scales up to 8.
const MIN_RUN: usize = 9;
/// Share of voting lines free of pattern pixels above which the texture is dots.
const DOT_EMPTY_LINES: f64 = 0.15;

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Dominant color, pattern class and slot of the garment under `mask`.
///
/// The slot comes from where the region sits vertically on the canvas. The
/// pattern comes from the binary map of pixels that differ from the dominant
/// color: no such pixels means solid, transitions only along columns mean
/// horizontal stripes, and pattern-free rows or columns separate dots from checker.
pub fn extract_attributes(image: &RgbImage, mask: &Mask) -> Result<GarmentAttributes> {
    if image.size() != mask.size() {
        return Err(ToyworldError::Validation("image and mask sizes differ".into()));
    }
    let (h, w) = mask.size();
    let mut channels: [Vec<f32>; 3] = Default::default();
    let mut ysum = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let p = image.pixel(y, x);
                for c in 0..3 {
                    channels[c].push(p[c]);
                }
                ysum += y as f64 + 0.5;
            }
        }
    }
    let n = channels[0].len();
    if n == 0 {
        return Err(ToyworldError::EmptyMask);
    }
    let [r, g, b] = channels;
    let dominant_color = [median(r), median(g), median(b)];
    let slot = if ysum / n as f64 / (h as f64) < 0.55 { Slot::Top } else { Slot::Bottom };

    let far = |y: usize, x: usize| super::linf(image.pixel(y, x), dominant_color) > FAR;
    let mut n_far = 0usize;
    let (mut h_pairs, mut h_diff, mut v_pairs, mut v_diff) = (0usize, 0usize, 0usize, 0usize);
    let (mut voting_lines, mut empty_lines) = (0usize, 0usize);
    for y in 0..h {
        let (mut run, mut longest, mut row_far) = (0usize, 0usize, 0usize);
        for x in 0..w {
            if !mask.get(y, x) {
                run = 0;
                continue;
            }
            run += 1;
            longest = longest.max(run);
            let f = far(y, x);
            row_far += f as usize;
            if x + 1 < w && mask.get(y, x + 1) {
                h_pairs += 1;
                h_diff += (f != far(y, x + 1)) as usize;
            }
            if y + 1 < h && mask.get(y + 1, x) {
                v_pairs += 1;
                v_diff += (f != far(y + 1, x)) as usize;
            }
        }
        n_far += row_far;
        if longest >= MIN_RUN {
            voting_lines += 1;
            empty_lines += (row_far == 0) as usize;
        }
    }
    for x in 0..w {
        let (mut run, mut longest, mut col_far) = (0usize, 0usize, 0usize);
        for y in 0..h {
            if !mask.get(y, x) {
                run = 0;
                continue;
            }
            run += 1;
            longest = longest.max(run);
            col_far += far(y, x) as usize;
        }
        if longest >= MIN_RUN {
            voting_lines += 1;
            empty_lines += (col_far == 0) as usize;
        }
    }
    let far_frac = n_far as f64 / n as f64;
    let rate = |d: usize, p: usize| if p == 0 { 0.0 } else { d as f64 / p as f64 };
    let (rate_h, rate_v) = (rate(h_diff, h_pairs), rate(v_diff, v_pairs));
    let pattern = if far_frac < SOLID_MAX_FAR {
        Pattern::Solid
    } else if rate_h < STRIPE_RATIO * rate_v {
        Pattern::Stripes
    } else if voting_lines > 0 {
        if (empty_lines as f64 / voting_lines as f64) > DOT_EMPTY_LINES {
            Pattern::Dots
        } else {
            Pattern::Checker
        }
    } else if far_frac < 0.42 {
        Pattern::Dots
    } else {
        Pattern::Checker
    };
    Ok(GarmentAttributes { dominant_color, pattern, slot })
}
