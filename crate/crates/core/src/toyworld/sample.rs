use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{flat_silhouette, render_flat_garment, render_person};
use super::vocab::{instruction_text, tokenize_text, IMG};
use super::{
    linf, Canvas, GarmentSpec, Keypoints, Pattern, PersonSpec, Point, Result, Rgb, Slot, Task, ToyworldError, View,
};
use crate::image::{Mask, RgbImage};

pub use super::vocab::InstructionSlots;

const SKIN_PALETTE: [Rgb; 3] = [
    [245.0 / 255.0, 205.0 / 255.0, 175.0 / 255.0],
    [205.0 / 255.0, 155.0 / 255.0, 115.0 / 255.0],
    [140.0 / 255.0, 95.0 / 255.0, 65.0 / 255.0],
];

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th sample of `task` in a dataset built from `base`.
pub fn sample_seed(base: u64, task: Task, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ (task.index() as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    [0, 1, 2].map(|_| rng.random_range(0..=255u32) as f32 / 255.0)
}

pub fn random_garment<R: Rng + ?Sized>(slot: Slot, canvas: Canvas, rng: &mut R) -> GarmentSpec {
    let base_color = color(rng);
    let pattern = Pattern::ALL[rng.random_range(0..4)];
    let mut pattern_color = color(rng);
    while linf(base_color, pattern_color) < 0.2 {
        pattern_color = color(rng);
    }
    let max_scale = (canvas.height / 4).clamp(2, 8) as u32;
    let pattern_scale = rng.random_range(max_scale.min(4)..=max_scale);
    GarmentSpec { slot, base_color, pattern, pattern_color, pattern_scale, view: View::Front }
}

pub fn random_person<R: Rng + ?Sized>(canvas: Canvas, rng: &mut R) -> PersonSpec {
    let u = canvas.width as f32 / 48.0;
    let v = canvas.height as f32 / 64.0;
    let dx = rng.random_range(-3.0..=3.0f32) * u;
    let dy = rng.random_range(-2.0..=2.0f32) * v;
    let axis = 24.0 * u + dx;
    let half_sw = rng.random_range(7.5..=9.5f32) * u;
    let shoulder_y = 16.5 * v + dy;
    let clamp = |p: Point| {
        Point::new(p.x.clamp(0.5, canvas.width as f32 - 0.5), p.y.clamp(0.5, canvas.height as f32 - 0.5))
    };
    let hand = |sx: f32, dir: f32, rng: &mut R| {
        let a = rng.random_range(2.0..=7.0f32) * u;
        let b = rng.random_range(17.0..=21.0f32) * v;
        clamp(Point::new(sx + dir * a, shoulder_y + b))
    };
    let left_shoulder = Point::new(axis - half_sw, shoulder_y);
    let right_shoulder = Point::new(axis + half_sw, shoulder_y);
    let left_hand = hand(left_shoulder.x, -1.0, rng);
    let right_hand = hand(right_shoulder.x, 1.0, rng);
    let foot = |dir: f32, rng: &mut R| {
        let a = rng.random_range(4.0..=7.0f32) * u;
        let y = rng.random_range(58.5..=60.5f32) * v + 0.5 * dy;
        clamp(Point::new(axis + dir * a, y))
    };
    let left_foot = foot(-1.0, rng);
    let right_foot = foot(1.0, rng);
    let keypoints = Keypoints {
        head: Point::new(axis, 8.0 * v + dy),
        neck: Point::new(axis, 14.0 * v + dy),
        left_shoulder,
        right_shoulder,
        left_hand,
        right_hand,
        left_foot,
        right_foot,
    };
    let skin_color = SKIN_PALETTE[rng.random_range(0..SKIN_PALETTE.len())];
    PersonSpec {
        skin_color,
        keypoints,
        top: Some(random_garment(Slot::Top, canvas, rng)),
        bottom: Some(random_garment(Slot::Bottom, canvas, rng)),
    }
}

fn different_garment<R: Rng + ?Sized>(g: &GarmentSpec, canvas: Canvas, rng: &mut R) -> GarmentSpec {
    loop {
        let other = random_garment(g.slot, canvas, rng);
        if other.pattern != g.pattern || linf(other.base_color, g.base_color) > 0.2 {
            return other;
        }
    }
}

/// What the target image is rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Person(PersonSpec),
    Flat(GarmentSpec),
}

/// Generating specs of a sample, kept so targets can be re-rendered and checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpecs {
    pub slot: Slot,
    pub view: View,
    pub target: TargetSpec,
    /// People appearing in the references (or supplying the pose), in reference order.
    pub persons: Vec<PersonSpec>,
    /// Garments shown lay-flat in the references, in reference order.
    pub garments: Vec<GarmentSpec>,
}

/// Per-slot garment regions of a person target.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotMasks {
    pub top: Mask,
    pub bottom: Mask,
}

impl SlotMasks {
    pub fn get(&self, slot: Slot) -> &Mask {
        match slot {
            Slot::Top => &self.top,
            Slot::Bottom => &self.bottom,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub task: Task,
    pub seed: u64,
    pub instruction_text: String,
    pub instruction: Vec<u32>,
    pub refs: Vec<RgbImage>,
    /// Task-relevant region of each reference.
    pub ref_masks: Vec<Mask>,
    pub pose: Option<RgbImage>,
    pub target: RgbImage,
    /// Region of the target the task modifies or extracts.
    pub target_mask: Mask,
    pub slot_masks: Option<SlotMasks>,
    pub specs: SampleSpecs,
}

impl TrainingSample {
    pub fn canvas(&self) -> Canvas {
        Canvas { height: self.target.height(), width: self.target.width() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ToyworldError::Validation(m.to_string()));
        if self.refs.is_empty() || self.refs.len() > 3 {
            return bad("sample needs 1..=3 references");
        }
        if self.ref_masks.len() != self.refs.len() {
            return bad("one mask per reference");
        }
        if self.instruction.iter().filter(|&&t| t == IMG).count() != self.refs.len() {
            return bad("image placeholders do not match references");
        }
        let size = self.target.size();
        let same = self.refs.iter().all(|r| r.size() == size)
            && self.ref_masks.iter().all(|m| m.size() == size)
            && self.target_mask.size() == size
            && self.pose.as_ref().is_none_or(|p| p.size() == size);
        if !same {
            return bad("all images must share the canvas size");
        }
        if self.target_mask.is_empty() {
            return bad("target mask is empty");
        }
        Ok(())
    }

    /// Renders the target again from the stored specs.
    pub fn rerender_target(&self) -> Result<RgbImage> {
        let canvas = self.canvas();
        match &self.specs.target {
            TargetSpec::Person(p) => Ok(render_person(p, canvas)?.image),
            TargetSpec::Flat(g) => render_flat_garment(g, canvas),
        }
    }
}

struct Draft {
    slots: InstructionSlots,
    refs: Vec<RgbImage>,
    ref_masks: Vec<Mask>,
    pose: Option<RgbImage>,
    target: RgbImage,
    target_mask: Mask,
    slot_masks: Option<SlotMasks>,
    target_spec: TargetSpec,
    persons: Vec<PersonSpec>,
    garments: Vec<GarmentSpec>,
}

/// Builds one sample of `task`, deterministically from `seed`.
pub fn make_task_sample(task: Task, seed: u64, canvas: Canvas) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = if rng.random_bool(0.5) { Slot::Top } else { Slot::Bottom };
    let view = if rng.random_bool(0.5) { View::Front } else { View::Back };
    let slots = InstructionSlots { slot, view };
    let person = random_person(canvas, &mut rng);

    let draft = match task {
        Task::SingleGarment => {
            let worn = *person.garment(slot).expect("random people wear both slots");
            let new = different_garment(&worn, canvas, &mut rng);
            let source = render_person(&person, canvas)?;
            let dressed = person.with_garment(slot, Some(new));
            let out = render_person(&dressed, canvas)?;
            Draft {
                slots,
                refs: vec![source.image.clone(), render_flat_garment(&new, canvas)?],
                ref_masks: vec![source.mask(slot).clone(), flat_silhouette(slot, canvas)],
                pose: None,
                target_mask: out.mask(slot).clone(),
                slot_masks: Some(SlotMasks { top: out.top_mask.clone(), bottom: out.bottom_mask.clone() }),
                target: out.image,
                target_spec: TargetSpec::Person(dressed),
                persons: vec![person],
                garments: vec![new],
            }
        }
        Task::ModelFree | Task::MultiView => {
            let g = random_garment(slot, canvas, &mut rng);
            let shown_view = if task == Task::MultiView { view } else { View::Front };
            let dressed = person
                .with_garment(Slot::Top, None)
                .with_garment(Slot::Bottom, None)
                .with_garment(slot, Some(g.with_view(shown_view)));
            let out = render_person(&dressed, canvas)?;
            let (refs, ref_masks, garments) = if task == Task::MultiView {
                (
                    vec![render_flat_garment(&g, canvas)?, render_flat_garment(&g.with_view(View::Back), canvas)?],
                    vec![flat_silhouette(slot, canvas), flat_silhouette(slot, canvas)],
                    vec![g, g.with_view(View::Back)],
                )
            } else {
                (vec![render_flat_garment(&g, canvas)?], vec![flat_silhouette(slot, canvas)], vec![g])
            };
            Draft {
                slots,
                refs,
                ref_masks,
                pose: Some(out.pose.clone()),
                target_mask: out.mask(slot).clone(),
                slot_masks: Some(SlotMasks { top: out.top_mask.clone(), bottom: out.bottom_mask.clone() }),
                target: out.image,
                target_spec: TargetSpec::Person(dressed),
                persons: vec![dressed],
                garments,
            }
        }
        Task::GarmentRecon => garment_recon_draft(&person, slots, canvas)?,
        Task::MultiGarment => multi_garment_draft(&person, slots, canvas)?,
        Task::ModelToModel => {
            let g = *person.garment(slot).expect("random people wear both slots");
            let other = random_person(canvas, &mut rng);
            let other_g = *other.garment(slot).expect("random people wear both slots");
            let other = if other_g.pattern == g.pattern && linf(other_g.base_color, g.base_color) <= 0.2 {
                other.with_garment(slot, Some(different_garment(&g, canvas, &mut rng)))
            } else {
                other
            };
            model_to_model_draft(&person, &other, slots, canvas)?
        }
    };
    finish(task, seed, slots.view, draft)
}

fn finish(task: Task, seed: u64, view: View, draft: Draft) -> Result<TrainingSample> {
    let text = instruction_text(task, draft.slots);
    let sample = TrainingSample {
        task,
        seed,
        instruction: tokenize_text(&text)?,
        instruction_text: text,
        refs: draft.refs,
        ref_masks: draft.ref_masks,
        pose: draft.pose,
        target: draft.target,
        target_mask: draft.target_mask,
        slot_masks: draft.slot_masks,
        specs: SampleSpecs {
            slot: draft.slots.slot,
            view,
            target: draft.target_spec,
            persons: draft.persons,
            garments: draft.garments,
        },
    };
    sample.validate()?;
    Ok(sample)
}

fn garment_recon_draft(person: &PersonSpec, slots: InstructionSlots, canvas: Canvas) -> Result<Draft> {
    let slot = slots.slot;
    let src = render_person(person, canvas)?;
    let g = *person.garment(slot).ok_or_else(|| ToyworldError::Validation(format!("person wears no {}", slot.name())))?;
    Ok(Draft {
        slots,
        refs: vec![src.image.clone()],
        ref_masks: vec![src.mask(slot).clone()],
        pose: None,
        target: render_flat_garment(&g, canvas)?,
        target_mask: flat_silhouette(slot, canvas),
        slot_masks: None,
        target_spec: TargetSpec::Flat(g),
        persons: vec![*person],
        garments: vec![],
    })
}

fn multi_garment_draft(person: &PersonSpec, slots: InstructionSlots, canvas: Canvas) -> Result<Draft> {
    let missing = || ToyworldError::Validation("multi-garment person needs both slots".into());
    let top = *person.top.as_ref().ok_or_else(missing)?;
    let bottom = *person.bottom.as_ref().ok_or_else(missing)?;
    let out = render_person(person, canvas)?;
    Ok(Draft {
        slots,
        refs: vec![render_flat_garment(&top, canvas)?, render_flat_garment(&bottom, canvas)?],
        ref_masks: vec![flat_silhouette(Slot::Top, canvas), flat_silhouette(Slot::Bottom, canvas)],
        pose: Some(out.pose.clone()),
        target_mask: out.top_mask.union(&out.bottom_mask),
        slot_masks: Some(SlotMasks { top: out.top_mask.clone(), bottom: out.bottom_mask.clone() }),
        target: out.image,
        target_spec: TargetSpec::Person(*person),
        persons: vec![*person],
        garments: vec![top, bottom],
    })
}

fn model_to_model_draft(a: &PersonSpec, b: &PersonSpec, slots: InstructionSlots, canvas: Canvas) -> Result<Draft> {
    let slot = slots.slot;
    let g = *a.garment(slot).ok_or_else(|| ToyworldError::Validation(format!("person A wears no {}", slot.name())))?;
    let ra = render_person(a, canvas)?;
    let rb = render_person(b, canvas)?;
    let dressed = b.with_garment(slot, Some(g));
    let out = render_person(&dressed, canvas)?;
    Ok(Draft {
        slots,
        refs: vec![ra.image.clone(), rb.image.clone()],
        ref_masks: vec![ra.mask(slot).clone(), rb.mask(slot).clone()],
        pose: None,
        target_mask: out.mask(slot).clone(),
        slot_masks: Some(SlotMasks { top: out.top_mask.clone(), bottom: out.bottom_mask.clone() }),
        target: out.image,
        target_spec: TargetSpec::Person(dressed),
        persons: vec![*a, *b],
        garments: vec![g],
    })
}

fn model_free_draft(pose_source: &PersonSpec, g: GarmentSpec, slots: InstructionSlots, canvas: Canvas) -> Result<Draft> {
    let slot = g.slot;
    let dressed = pose_source.with_garment(Slot::Top, None).with_garment(Slot::Bottom, None).with_garment(slot, Some(g));
    let out = render_person(&dressed, canvas)?;
    Ok(Draft {
        slots: InstructionSlots { slot, ..slots },
        refs: vec![render_flat_garment(&g, canvas)?],
        ref_masks: vec![flat_silhouette(slot, canvas)],
        pose: Some(out.pose.clone()),
        target_mask: out.mask(slot).clone(),
        slot_masks: Some(SlotMasks { top: out.top_mask.clone(), bottom: out.bottom_mask.clone() }),
        target: out.image,
        target_spec: TargetSpec::Person(dressed),
        persons: vec![dressed],
        garments: vec![g],
    })
}

/// Garment reconstruction of `person`'s `slot` garment.
pub fn garment_recon_sample(person: &PersonSpec, slot: Slot, seed: u64, canvas: Canvas) -> Result<TrainingSample> {
    let slots = InstructionSlots { slot, view: View::Front };
    finish(Task::GarmentRecon, seed, View::Front, garment_recon_draft(person, slots, canvas)?)
}

/// `person` dressed from their own two garments, shown lay-flat.
pub fn multi_garment_sample(person: &PersonSpec, seed: u64, canvas: Canvas) -> Result<TrainingSample> {
    let slots = InstructionSlots { slot: Slot::Top, view: View::Front };
    finish(Task::MultiGarment, seed, View::Front, multi_garment_draft(person, slots, canvas)?)
}

/// Moves `a`'s `slot` garment onto `b`.
pub fn model_to_model_sample(a: &PersonSpec, b: &PersonSpec, slot: Slot, seed: u64, canvas: Canvas) -> Result<TrainingSample> {
    let slots = InstructionSlots { slot, view: View::Front };
    finish(Task::ModelToModel, seed, View::Front, model_to_model_draft(a, b, slots, canvas)?)
}

/// A person in `pose_source`'s pose wearing only `g`.
pub fn model_free_sample(pose_source: &PersonSpec, g: GarmentSpec, seed: u64, canvas: Canvas) -> Result<TrainingSample> {
    let slots = InstructionSlots { slot: g.slot, view: View::Front };
    finish(Task::ModelFree, seed, View::Front, model_free_draft(pose_source, g, slots, canvas)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        for task in Task::ALL {
            let a = make_task_sample(task, 42, Canvas::default()).unwrap();
            let b = make_task_sample(task, 42, Canvas::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn targets_rerender_bit_exactly() {
        for task in Task::ALL {
            for seed in 0..10 {
                let s = make_task_sample(task, seed, Canvas::default()).unwrap();
                assert_eq!(s.rerender_target().unwrap(), s.target, "{task} seed {seed}");
            }
        }
    }

    #[test]
    fn single_garment_target_is_source_with_slot_replaced() {
        for seed in 0..10 {
            let s = make_task_sample(Task::SingleGarment, seed, Canvas::default()).unwrap();
            let source = s.specs.persons[0];
            let expected = source.with_garment(s.specs.slot, Some(s.specs.garments[0]));
            let oracle = render_person(&expected, Canvas::default()).unwrap().image;
            assert_eq!(oracle, s.target);
            assert_eq!(render_person(&source, Canvas::default()).unwrap().image, s.refs[0]);
        }
    }

    #[test]
    fn model_to_model_keeps_second_person_pose() {
        for seed in 0..10 {
            let s = make_task_sample(Task::ModelToModel, seed, Canvas::default()).unwrap();
            let TargetSpec::Person(target) = &s.specs.target else { panic!("person target") };
            assert_eq!(target.keypoints, s.specs.persons[1].keypoints);
        }
    }

    #[test]
    fn reference_counts_per_task() {
        let expected = [(Task::SingleGarment, 2), (Task::ModelFree, 1), (Task::GarmentRecon, 1), (Task::MultiView, 2), (Task::MultiGarment, 2), (Task::ModelToModel, 2)];
        for (task, n) in expected {
            let s = make_task_sample(task, 7, Canvas::default()).unwrap();
            assert_eq!(s.refs.len(), n);
            assert_eq!(s.pose.is_some(), matches!(task, Task::ModelFree | Task::MultiView | Task::MultiGarment));
        }
    }

    #[test]
    fn builders_agree_with_task_samples() {
        let c = Canvas::default();
        for seed in 0..5 {
            let s = make_task_sample(Task::GarmentRecon, seed, c).unwrap();
            let b = garment_recon_sample(&s.specs.persons[0], s.specs.slot, seed, c).unwrap();
            assert_eq!((b.refs, b.target, b.target_mask), (s.refs, s.target, s.target_mask));

            let s = make_task_sample(Task::MultiGarment, seed, c).unwrap();
            let b = multi_garment_sample(&s.specs.persons[0], seed, c).unwrap();
            assert_eq!((b.refs, b.pose, b.target), (s.refs, s.pose, s.target));

            let s = make_task_sample(Task::ModelToModel, seed, c).unwrap();
            let b = model_to_model_sample(&s.specs.persons[0], &s.specs.persons[1], s.specs.slot, seed, c).unwrap();
            assert_eq!((b.refs, b.target, b.target_mask), (s.refs, s.target, s.target_mask));

            let s = make_task_sample(Task::ModelFree, seed, c).unwrap();
            let b = model_free_sample(&s.specs.persons[0], s.specs.garments[0], seed, c).unwrap();
            assert_eq!((b.refs, b.pose, b.target), (s.refs, s.pose, s.target));
        }
    }

    #[test]
    fn sample_seeds_differ_across_tasks_and_indices() {
        let mut seen = std::collections::HashSet::new();
        for task in Task::ALL {
            for i in 0..100 {
                assert!(seen.insert(sample_seed(9, task, i)));
            }
        }
    }
}
