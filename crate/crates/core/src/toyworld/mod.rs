//! Procedural paper-doll world: people, garments, masks, pose maps, instructions
//! and task-structured samples with exact ground truth.

mod attributes;
mod dataset;
mod render;
mod sample;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attributes::{extract_attributes, GarmentAttributes};
pub use dataset::{
    build_dataset, load_manifest, load_sample, write_manifest, write_sample_files, DatasetConfig, FilterRecord,
    ManifestEntry, Provenance, MANIFEST_FILE,
};
pub use render::{flat_silhouette, render_flat_garment, render_person, PersonRender, PERSON_BACKGROUND, FLAT_BACKGROUND};
pub use sample::{
    garment_recon_sample, make_task_sample, model_free_sample, model_to_model_sample, multi_garment_sample,
    random_garment, random_person, sample_seed, InstructionSlots, SampleSpecs, SlotMasks,
    TargetSpec, TrainingSample,
};
pub use vocab::{detokenize, instruction_text, tokenize_instruction, tokenize_text, Vocab, BOS, EOS, IMG, VOCAB};

use crate::image::ImageError;

#[derive(Debug, Error)]
pub enum ToyworldError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

pub type Result<T, E = ToyworldError> = std::result::Result<T, E>;

/// Canvas size in pixels, height first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { height: 64, width: 48 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Top,
    Bottom,
}

impl Slot {
    pub const ALL: [Slot; 2] = [Slot::Top, Slot::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Top => "top",
            Slot::Bottom => "bottom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Solid, Pattern::Stripes, Pattern::Dots, Pattern::Checker];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Front,
    Back,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Back => "back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleGarment,
    ModelFree,
    GarmentRecon,
    MultiView,
    MultiGarment,
    ModelToModel,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::SingleGarment,
        Task::ModelFree,
        Task::GarmentRecon,
        Task::MultiView,
        Task::MultiGarment,
        Task::ModelToModel,
    ];

    /// Tasks the base model is pretrained on.
    pub const FUNDAMENTAL: [Task; 3] = [Task::SingleGarment, Task::ModelFree, Task::GarmentRecon];

    pub fn name(self) -> &'static str {
        match self {
            Task::SingleGarment => "single_garment",
            Task::ModelFree => "model_free",
            Task::GarmentRecon => "garment_recon",
            Task::MultiView => "multi_view",
            Task::MultiGarment => "multi_garment",
            Task::ModelToModel => "model_to_model",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).unwrap_or(0)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub type Rgb = [f32; 3];

pub fn linf(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f32::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub slot: Slot,
    pub base_color: Rgb,
    pub pattern: Pattern,
    pub pattern_color: Rgb,
    pub pattern_scale: u32,
    pub view: View,
}

impl GarmentSpec {
    pub fn validate(&self, canvas: Canvas) -> Result<()> {
        let in_unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.base_color) || !in_unit(&self.pattern_color) {
            return Err(ToyworldError::Validation("garment colors must lie in [0,1]".into()));
        }
        if self.pattern_scale < 2 || self.pattern_scale as usize > canvas.height / 4 {
            return Err(ToyworldError::Validation(format!(
                "pattern_scale {} outside [2, {}]",
                self.pattern_scale,
                canvas.height / 4
            )));
        }
        if self.pattern != Pattern::Solid && linf(self.base_color, self.pattern_color) < 0.2 - 1e-6 {
            return Err(ToyworldError::Validation("pattern color too close to base color".into()));
        }
        Ok(())
    }

    pub fn with_view(mut self, view: View) -> Self {
        self.view = view;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn lerp(self, other: Point, t: f32) -> Point {
        Point::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub head: Point,
    pub neck: Point,
    pub left_shoulder: Point,
    pub right_shoulder: Point,
    pub left_hand: Point,
    pub right_hand: Point,
    pub left_foot: Point,
    pub right_foot: Point,
}

impl Keypoints {
    pub fn all(&self) -> [Point; 8] {
        [
            self.head,
            self.neck,
            self.left_shoulder,
            self.right_shoulder,
            self.left_hand,
            self.right_hand,
            self.left_foot,
            self.right_foot,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub skin_color: Rgb,
    pub keypoints: Keypoints,
    pub top: Option<GarmentSpec>,
    pub bottom: Option<GarmentSpec>,
}

impl PersonSpec {
    pub fn garment(&self, slot: Slot) -> Option<&GarmentSpec> {
        match slot {
            Slot::Top => self.top.as_ref(),
            Slot::Bottom => self.bottom.as_ref(),
        }
    }

    pub fn with_garment(mut self, slot: Slot, g: Option<GarmentSpec>) -> Self {
        match slot {
            Slot::Top => self.top = g,
            Slot::Bottom => self.bottom = g,
        }
        self
    }

    pub fn validate(&self, canvas: Canvas) -> Result<()> {
        for p in self.keypoints.all() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < canvas.width as f32 && p.y < canvas.height as f32) {
                return Err(ToyworldError::Validation(format!("keypoint ({}, {}) outside canvas", p.x, p.y)));
            }
        }
        let k = &self.keypoints;
        let mid = 0.5 * (k.left_shoulder.x + k.right_shoulder.x);
        if (mid - k.neck.x).abs() > 1.0 || (k.left_shoulder.y - k.right_shoulder.y).abs() > 1.0 {
            return Err(ToyworldError::Validation("shoulders not symmetric about the torso axis".into()));
        }
        for (slot, g) in [(Slot::Top, &self.top), (Slot::Bottom, &self.bottom)] {
            if let Some(g) = g {
                if g.slot != slot {
                    return Err(ToyworldError::Validation(format!("{} garment worn in {} slot", g.slot.name(), slot.name())));
                }
                g.validate(canvas)?;
            }
        }
        Ok(())
    }
}
