use super::{Canvas, GarmentSpec, Pattern, PersonSpec, Point, Result, Rgb, Slot, View};
use crate::image::{Mask, RgbImage};

/// Background behind people.
pub const PERSON_BACKGROUND: Rgb = [250.0 / 255.0, 250.0 / 255.0, 250.0 / 255.0];
/// Neutral gray behind lay-flat garments (0.9, snapped to the 8-bit grid).
pub const FLAT_BACKGROUND: Rgb = [230.0 / 255.0, 230.0 / 255.0, 230.0 / 255.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PersonRender {
    pub image: RgbImage,
    pub top_mask: Mask,
    pub bottom_mask: Mask,
    pub pose: RgbImage,
}

impl PersonRender {
    pub fn mask(&self, slot: Slot) -> &Mask {
        match slot {
            Slot::Top => &self.top_mask,
            Slot::Bottom => &self.bottom_mask,
        }
    }
}

fn seg_dist2(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
    cx * cx + cy * cy
}

fn in_capsule(p: Point, a: Point, b: Point, r: f32) -> bool {
    seg_dist2(p, a, b) <= r * r
}

fn in_disk(p: Point, c: Point, r: f32) -> bool {
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    dx * dx + dy * dy <= r * r
}

/// Trapezoid with horizontal top edge at `y0` spanning `[xl0, xr0]` and bottom edge at `y1` spanning `[xl1, xr1]`.
fn in_trapezoid(p: Point, y0: f32, xl0: f32, xr0: f32, y1: f32, xl1: f32, xr1: f32) -> bool {
    if p.y < y0 || p.y > y1 {
        return false;
    }
    let t = if y1 > y0 { (p.y - y0) / (y1 - y0) } else { 0.0 };
    let xl = xl0 + (xl1 - xl0) * t;
    let xr = xr0 + (xr1 - xr0) * t;
    p.x >= xl && p.x <= xr
}

/// Garment color at a canvas pixel. The pattern is anchored to canvas coordinates,
/// so a garment shows the same texture at a pixel whether it is worn or laid flat;
/// the back view shifts the phase by half a period.
pub(crate) fn pattern_color(g: &GarmentSpec, y: usize, x: usize) -> Rgb {
    let s = g.pattern_scale.max(1) as usize;
    let phase = match g.view {
        View::Front => 0,
        View::Back => s / 2,
    };
    let (xs, ys) = (x + phase, y + phase);
    let on = match g.pattern {
        Pattern::Solid => false,
        Pattern::Stripes => (ys / s) % 2 == 1,
        Pattern::Checker => ((xs / s) + (ys / s)) % 2 == 1,
        Pattern::Dots => {
            let c = s as f32 / 2.0;
            let (u, v) = ((xs % s) as f32 + 0.5 - c, (ys % s) as f32 + 0.5 - c);
            let r = 0.3 * s as f32;
            u * u + v * v <= r * r
        }
    };
    if on {
        g.pattern_color
    } else {
        g.base_color
    }
}

struct Body {
    unit: f32,
    axis: f32,
    shoulder_y: f32,
    half_shoulder: f32,
    hip_y: f32,
    half_hip: f32,
    left_hip: Point,
    right_hip: Point,
    hip_center: Point,
}

impl Body {
    fn new(spec: &PersonSpec, canvas: Canvas) -> Self {
        let k = &spec.keypoints;
        let unit = canvas.width as f32 / 48.0;
        let axis = k.neck.x;
        let shoulder_y = 0.5 * (k.left_shoulder.y + k.right_shoulder.y);
        let half_shoulder = 0.5 * (k.right_shoulder.x - k.left_shoulder.x).abs();
        let foot_y = 0.5 * (k.left_foot.y + k.right_foot.y);
        let hip_y = shoulder_y + 0.45 * (foot_y - shoulder_y);
        let half_hip = 0.75 * half_shoulder;
        Self {
            unit,
            axis,
            shoulder_y,
            half_shoulder,
            hip_y,
            half_hip,
            left_hip: Point::new(axis - half_hip, hip_y),
            right_hip: Point::new(axis + half_hip, hip_y),
            hip_center: Point::new(axis, hip_y),
        }
    }

    fn skin(&self, k: &super::Keypoints, p: Point) -> bool {
        let u = self.unit;
        in_disk(p, k.head, 4.5 * u)
            || in_capsule(p, k.neck, k.head, 1.8 * u)
            || in_trapezoid(
                p,
                self.shoulder_y,
                self.axis - self.half_shoulder,
                self.axis + self.half_shoulder,
                self.hip_y,
                self.axis - self.half_hip,
                self.axis + self.half_hip,
            )
            || in_capsule(p, k.left_shoulder, k.left_hand, 1.8 * u)
            || in_capsule(p, k.right_shoulder, k.right_hand, 1.8 * u)
            || in_disk(p, k.left_hand, 2.0 * u)
            || in_disk(p, k.right_hand, 2.0 * u)
            || in_capsule(p, self.left_hip, k.left_foot, 2.4 * u)
            || in_capsule(p, self.right_hip, k.right_foot, 2.4 * u)
    }

    fn top(&self, k: &super::Keypoints, p: Point) -> bool {
        let u = self.unit;
        let l_elbow = k.left_shoulder.lerp(k.left_hand, 0.5);
        let r_elbow = k.right_shoulder.lerp(k.right_hand, 0.5);
        in_trapezoid(
            p,
            self.shoulder_y - 1.5 * u,
            self.axis - self.half_shoulder - 0.5 * u,
            self.axis + self.half_shoulder + 0.5 * u,
            self.hip_y + 1.0 * u,
            self.axis - self.half_hip - 1.0 * u,
            self.axis + self.half_hip + 1.0 * u,
        ) || in_capsule(p, k.left_shoulder, l_elbow, 2.4 * u)
            || in_capsule(p, k.right_shoulder, r_elbow, 2.4 * u)
    }

    fn bottom(&self, k: &super::Keypoints, p: Point) -> bool {
        let u = self.unit;
        let l_ankle = self.left_hip.lerp(k.left_foot, 0.85);
        let r_ankle = self.right_hip.lerp(k.right_foot, 0.85);
        in_trapezoid(
            p,
            self.hip_y - 1.0 * u,
            self.axis - self.half_hip - 1.0 * u,
            self.axis + self.half_hip + 1.0 * u,
            self.hip_y + 4.0 * u,
            self.axis - self.half_hip - 1.5 * u,
            self.axis + self.half_hip + 1.5 * u,
        ) || in_capsule(p, self.left_hip, l_ankle, 2.9 * u)
            || in_capsule(p, self.right_hip, r_ankle, 2.9 * u)
    }
}

const LIMB_COLORS: [Rgb; 7] = [
    [1.0, 0.0, 0.0],
    [1.0, 128.0 / 255.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
];

fn render_pose(spec: &PersonSpec, body: &Body, canvas: Canvas) -> RgbImage {
    let k = &spec.keypoints;
    let u = body.unit;
    let limbs = [
        (k.head, k.neck),
        (k.left_shoulder, k.right_shoulder),
        (k.left_shoulder, k.left_hand),
        (k.right_shoulder, k.right_hand),
        (k.neck, body.hip_center),
        (body.hip_center, k.left_foot),
        (body.hip_center, k.right_foot),
    ];
    let mut img = RgbImage::filled(canvas.height, canvas.width, [0.0; 3]);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let p = Point::new(x as f32 + 0.5, y as f32 + 0.5);
            let mut color = None;
            for (i, &(a, b)) in limbs.iter().enumerate() {
                if in_capsule(p, a, b, 0.9 * u) {
                    color = Some(LIMB_COLORS[i]);
                }
            }
            if k.all().iter().any(|&c| in_disk(p, c, 1.4 * u)) {
                color = Some([1.0; 3]);
            }
            if let Some(c) = color {
                img.put(y, x, c);
            }
        }
    }
    img
}

/// Rasterizes a person with their garments, the exact per-slot garment masks and the skeleton render.
pub fn render_person(spec: &PersonSpec, canvas: Canvas) -> Result<PersonRender> {
    spec.validate(canvas)?;
    let body = Body::new(spec, canvas);
    let k = &spec.keypoints;
    let mut image = RgbImage::filled(canvas.height, canvas.width, PERSON_BACKGROUND);
    let mut top_mask = Mask::empty(canvas.height, canvas.width);
    let mut bottom_mask = Mask::empty(canvas.height, canvas.width);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let p = Point::new(x as f32 + 0.5, y as f32 + 0.5);
            if body.skin(k, p) {
                image.put(y, x, spec.skin_color);
            }
            if let Some(g) = &spec.bottom {
                if body.bottom(k, p) {
                    image.put(y, x, pattern_color(g, y, x));
                    bottom_mask.set(y, x, true);
                }
            }
            if let Some(g) = &spec.top {
                if body.top(k, p) {
                    image.put(y, x, pattern_color(g, y, x));
                    top_mask.set(y, x, true);
                    bottom_mask.set(y, x, false);
                }
            }
        }
    }
    let pose = render_pose(spec, &body, canvas);
    Ok(PersonRender { image, top_mask, bottom_mask, pose })
}

/// Canonical lay-flat silhouette of a garment slot.
pub fn flat_silhouette(slot: Slot, canvas: Canvas) -> Mask {
    let (h, w) = (canvas.height as f32, canvas.width as f32);
    Mask::from_fn(canvas.height, canvas.width, |y, x| {
        let p = Point::new(x as f32 + 0.5, y as f32 + 0.5);
        match slot {
            Slot::Top => {
                let torso = p.x >= 0.25 * w && p.x < 0.75 * w && p.y >= 0.22 * h && p.y < 0.62 * h;
                let r = 0.06 * w;
                let ls = in_capsule(p, Point::new(0.27 * w, 0.27 * h), Point::new(0.08 * w, 0.50 * h), r);
                let rs = in_capsule(p, Point::new(0.73 * w, 0.27 * h), Point::new(0.92 * w, 0.50 * h), r);
                torso || ls || rs
            }
            Slot::Bottom => {
                let band = p.x >= 0.3 * w && p.x < 0.7 * w && p.y >= 0.55 * h && p.y < 0.64 * h;
                let r = 0.08 * w;
                let ll = in_capsule(p, Point::new(0.40 * w, 0.60 * h), Point::new(0.35 * w, 0.90 * h), r);
                let rl = in_capsule(p, Point::new(0.60 * w, 0.60 * h), Point::new(0.65 * w, 0.90 * h), r);
                band || ll || rl
            }
        }
    })
}

/// Lay-flat render of a garment on the neutral gray background.
pub fn render_flat_garment(g: &GarmentSpec, canvas: Canvas) -> Result<RgbImage> {
    g.validate(canvas)?;
    let sil = flat_silhouette(g.slot, canvas);
    let mut img = RgbImage::filled(canvas.height, canvas.width, FLAT_BACKGROUND);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            if sil.get(y, x) {
                img.put(y, x, pattern_color(g, y, x));
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{random_garment, random_person, Keypoints};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn canvas() -> Canvas {
        Canvas::default()
    }

    fn garment(pattern: Pattern, scale: u32) -> GarmentSpec {
        GarmentSpec {
            slot: Slot::Top,
            base_color: [200.0 / 255.0, 30.0 / 255.0, 30.0 / 255.0],
            pattern,
            pattern_color: [20.0 / 255.0, 40.0 / 255.0, 220.0 / 255.0],
            pattern_scale: scale,
            view: View::Front,
        }
    }

    #[test]
    fn no_garments_means_empty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_person(canvas(), &mut rng).with_garment(Slot::Top, None).with_garment(Slot::Bottom, None);
        let r = render_person(&p, canvas()).unwrap();
        assert!(r.top_mask.is_empty() && r.bottom_mask.is_empty());
    }

    #[test]
    fn rendering_is_deterministic_and_masks_disjoint() {
        for seed in 0..20 {
            let p = random_person(canvas(), &mut ChaCha8Rng::seed_from_u64(seed));
            let a = render_person(&p, canvas()).unwrap();
            let b = render_person(&p, canvas()).unwrap();
            assert_eq!(a, b);
            assert!(!a.top_mask.intersects(&a.bottom_mask));
            assert!(!a.top_mask.is_empty() && !a.bottom_mask.is_empty());
        }
    }

    #[test]
    fn solid_top_pixels_carry_base_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = garment(Pattern::Solid, 4);
        let p = random_person(canvas(), &mut rng).with_garment(Slot::Top, Some(g));
        let r = render_person(&p, canvas()).unwrap();
        let mut n = 0;
        for y in 0..64 {
            for x in 0..48 {
                if r.top_mask.get(y, x) {
                    n += 1;
                    let c = r.image.pixel(y, x);
                    assert!(crate::toyworld::linf(c, g.base_color) <= 1.0 / 255.0);
                }
            }
        }
        assert!(n > 100);
    }

    #[test]
    fn keypoints_outside_canvas_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_person(canvas(), &mut rng);
        p.keypoints.left_foot.y = 70.0;
        assert!(render_person(&p, canvas()).is_err());
    }

    #[test]
    fn asymmetric_shoulders_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_person(canvas(), &mut rng);
        let k: &mut Keypoints = &mut p.keypoints;
        k.left_shoulder.x -= 3.0;
        assert!(render_person(&p, canvas()).is_err());
    }

    #[test]
    fn front_and_back_differ_only_inside_silhouette() {
        let g = garment(Pattern::Checker, 6);
        let f = render_flat_garment(&g, canvas()).unwrap();
        let b = render_flat_garment(&g.with_view(View::Back), canvas()).unwrap();
        let sil = flat_silhouette(Slot::Top, canvas());
        let mut differ = 0;
        for y in 0..64 {
            for x in 0..48 {
                if f.pixel(y, x) != b.pixel(y, x) {
                    assert!(sil.get(y, x));
                    differ += 1;
                }
            }
        }
        assert!(differ > 0);
    }

    #[test]
    fn stripes_alternate_in_scale_sized_bands() {
        let g = garment(Pattern::Stripes, 4);
        let img = render_flat_garment(&g, canvas()).unwrap();
        let sil = flat_silhouette(Slot::Top, canvas());
        let x = 24;
        // Oracle: walk the scanline and record run lengths of each color inside the silhouette.
        let rows: Vec<usize> = (0..64).filter(|&y| sil.get(y, x)).collect();
        let mut runs = Vec::new();
        let mut run = 1;
        for w in rows.windows(2) {
            if img.pixel(w[0], x) == img.pixel(w[1], x) {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        runs.push(run);
        assert!(runs.len() >= 5, "expected several bands, got {runs:?}");
        // Interior runs are whole bands.
        assert!(runs[1..runs.len() - 1].iter().all(|&r| r == 4), "{runs:?}");
    }

    #[test]
    fn solid_flat_has_two_colors() {
        let g = garment(Pattern::Solid, 4);
        let img = render_flat_garment(&g, canvas()).unwrap();
        let colors: HashSet<[u32; 3]> =
            img.data().chunks_exact(3).map(|c| [c[0].to_bits(), c[1].to_bits(), c[2].to_bits()]).collect();
        assert_eq!(colors.len(), 2);
    }

    #[test]
    fn random_garments_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            for slot in Slot::ALL {
                random_garment(slot, canvas(), &mut rng).validate(canvas()).unwrap();
            }
        }
    }
}
