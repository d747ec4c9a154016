use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{make_task_sample, sample_seed, SampleSpecs, SlotMasks, TrainingSample};
use super::vocab::tokenize_text;
use super::{Canvas, Result, Task, ToyworldError};
use crate::image::{Mask, RgbImage};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default)]
    pub canvas: Canvas,
    pub seed: u64,
    /// Samples per task; tasks not listed get none.
    pub counts: BTreeMap<Task, usize>,
}

/// Outcome of the two-step filter for a synthesized sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub distance: f64,
    pub stage1_pass: bool,
    pub stage2_pass: bool,
}

impl FilterRecord {
    pub fn accepted(&self) -> bool {
        self.stage1_pass && self.stage2_pass
    }
}

/// Where a synthesized sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Manifest id of the source person (multi-garment) or garment (model-to-model).
    pub source_id: String,
    pub source_seed: u64,
    /// Seed of the sampler noise.
    pub generation_seed: u64,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: Task,
    pub seed: u64,
    pub instruction: String,
    pub refs: Vec<String>,
    pub ref_masks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<String>,
    pub target: String,
    pub target_mask: String,
    /// Top and bottom garment masks of a person target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_masks: Option<[String; 2]>,
    pub specs: SampleSpecs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_record: Option<FilterRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ManifestEntry {
    /// Prefixes every file path with `dir/`, for merging manifests that live in different directories.
    pub fn rebased(&self, dir: &str) -> ManifestEntry {
        let join = |p: &String| format!("{}/{p}", dir.trim_end_matches('/'));
        let mut e = self.clone();
        e.refs = e.refs.iter().map(join).collect();
        e.ref_masks = e.ref_masks.iter().map(join).collect();
        e.pose = e.pose.as_ref().map(join);
        e.target = join(&e.target);
        e.target_mask = join(&e.target_mask);
        e.slot_masks = e.slot_masks.as_ref().map(|[a, b]| [join(a), join(b)]);
        e
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ToyworldError + '_ {
    move |source| ToyworldError::Io { path: path.display().to_string(), source }
}

/// Writes every array of `sample` as a PNG under `root/images/` and returns its manifest entry.
pub fn write_sample_files(sample: &TrainingSample, root: &Path, id: &str) -> Result<ManifestEntry> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let rel = |name: &str| format!("images/{id}_{name}.png");
    let save_img = |img: &RgbImage, name: &str| -> Result<String> {
        let r = rel(name);
        img.save_png(&root.join(&r))?;
        Ok(r)
    };
    let save_mask = |m: &Mask, name: &str| -> Result<String> {
        let r = rel(name);
        m.save_png(&root.join(&r))?;
        Ok(r)
    };
    let mut refs = Vec::new();
    let mut ref_masks = Vec::new();
    for (i, (r, m)) in sample.refs.iter().zip(&sample.ref_masks).enumerate() {
        refs.push(save_img(r, &format!("ref{i}"))?);
        ref_masks.push(save_mask(m, &format!("ref{i}_mask"))?);
    }
    let pose = sample.pose.as_ref().map(|p| save_img(p, "pose")).transpose()?;
    let slot_masks = match &sample.slot_masks {
        Some(sm) => Some([save_mask(&sm.top, "top_mask")?, save_mask(&sm.bottom, "bottom_mask")?]),
        None => None,
    };
    Ok(ManifestEntry {
        id: id.to_string(),
        task: sample.task,
        seed: sample.seed,
        instruction: sample.instruction_text.clone(),
        refs,
        ref_masks,
        pose,
        target: save_img(&sample.target, "target")?,
        target_mask: save_mask(&sample.target_mask, "target_mask")?,
        slot_masks,
        specs: sample.specs.clone(),
        filter_record: None,
        provenance: None,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| ToyworldError::Manifest { line: i + 1, msg: e.to_string() })?;
        out.push(e);
    }
    Ok(out)
}

/// Loads the images of a manifest entry; `root` is the manifest's directory.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<TrainingSample> {
    let img = |r: &str| RgbImage::load_png(&root.join(r));
    let mask = |r: &str| Mask::load_png(&root.join(r));
    let refs = entry.refs.iter().map(|r| img(r)).collect::<Result<Vec<_>, _>>()?;
    let ref_masks = entry.ref_masks.iter().map(|r| mask(r)).collect::<Result<Vec<_>, _>>()?;
    let pose = entry.pose.as_deref().map(img).transpose()?;
    let slot_masks = match &entry.slot_masks {
        Some([t, b]) => Some(SlotMasks { top: mask(t)?, bottom: mask(b)? }),
        None => None,
    };
    let sample = TrainingSample {
        task: entry.task,
        seed: entry.seed,
        instruction_text: entry.instruction.clone(),
        instruction: tokenize_text(&entry.instruction)?,
        refs,
        ref_masks,
        pose,
        target: img(&entry.target)?,
        target_mask: mask(&entry.target_mask)?,
        slot_masks,
        specs: entry.specs.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates the dataset described by `config` into `out_dir` and returns the manifest path.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::new();
    for task in Task::ALL {
        let n = config.counts.get(&task).copied().unwrap_or(0);
        for i in 0..n {
            let seed = sample_seed(config.seed, task, i as u64);
            let sample = make_task_sample(task, seed, config.canvas)?;
            entries.push(write_sample_files(&sample, out_dir, &format!("{task}_{i:05}"))?);
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, &entries)?;
    Ok(path)
}
