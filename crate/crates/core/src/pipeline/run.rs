use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::filter::{filter_sample, DEFAULT_TAU};
use super::synth::{synthesize_b1, synthesize_b2, SynthCandidate, SynthKind};
use super::train::{train, write_metrics, MetricsRecord, Schedule, TrainConfig, TrainState, TrainingSet, STAGE1_TASKS};
use super::{LossWeights, PipelineError};
use crate::checkpoint::{differing_keys, model_checkpoint, restore_model, Checkpoint, CheckpointError};
use crate::config::to_flat;
use crate::dit::DitConfig;
use crate::mgsa::MgsaConfig;
use crate::model::{Generator, ModelConfig, TryOnModel};
use crate::params::AdamWConfig;
use crate::toyworld::{
    build_dataset, load_manifest, load_sample, sample_seed, write_manifest, write_sample_files, Canvas, DatasetConfig,
    ManifestEntry, Task, TrainingSample, MANIFEST_FILE,
};

pub const STAGE1_DIR: &str = "stage1";
pub const STAGE2_DIR: &str = "stage2";
pub const DATA_DIR: &str = "data";
pub const SYNTH_DIR: &str = "synth";
pub const MERGED_DIR: &str = "merged";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Multi-garment candidates requested.
    pub n_b1: usize,
    /// Model-to-model candidates requested.
    pub n_b2: usize,
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_b1: 200, n_b2: 200, sampling_steps: 16, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub tau: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Seed of the held-out dataset; disjoint from the training seed.
    pub data_seed: u64,
    pub per_task: usize,
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { data_seed: 9001, per_task: 24, sampling_steps: 16, seed: 0 }
    }
}

/// Everything a two-stage run needs; serialized flat into every checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Real data: the fundamental tasks plus multi-view.
    pub data: DatasetConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

fn real_counts(per_task: usize) -> std::collections::BTreeMap<Task, usize> {
    Task::ALL
        .iter()
        .map(|&t| (t, if STAGE1_TASKS.contains(&t) || t == Task::MultiView { per_task } else { 0 }))
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 0,
            data: DatasetConfig { canvas: Canvas::default(), seed: 1, counts: real_counts(200) },
            stage1: TrainConfig::default(),
            stage2: TrainConfig { stage: 2, steps: 3000, seed: 1, ..TrainConfig::default() },
            synth: SynthConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Focus weight of the desk preset: the reference 0.05 scaled by the 48 output
/// tokens, since the focus loss averages over positions where the reference sums.
pub const DESK_FOCUS_WEIGHT: f64 = 0.05 * 48.0;

impl RunConfig {
    /// Settings sized for a single CPU core: a generator as wide as the patch
    /// dimension, a smaller query aggregator, batch 8 and a warmed-up cosine rate.
    pub fn desk() -> Self {
        let model = ModelConfig {
            mgsa: MgsaConfig { d_q: 48, layers: 2, d_v: 48, ..MgsaConfig::default() },
            dit: DitConfig { d_model: 192, layers: 3, mlp_ratio: 1, heads: 4 },
            ..ModelConfig::default()
        };
        let stage1 = TrainConfig {
            steps: 4000,
            batch_size: 8,
            weights: LossWeights { focus: DESK_FOCUS_WEIGHT, ..LossWeights::default() },
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            ..TrainConfig::default()
        };
        let stage2 = TrainConfig {
            stage: 2,
            steps: 1000,
            seed: 1,
            optimizer: AdamWConfig { lr: 3e-4, ..AdamWConfig::default() },
            ..stage1.clone()
        };
        Self { model, stage1, stage2, ..Self::default() }
    }

    pub fn stage(&self, stage: u8) -> Result<&TrainConfig, PipelineError> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(PipelineError::Validation(format!("unknown stage {s}"))),
        }
    }

    pub fn flat(&self) -> std::collections::BTreeMap<String, Value> {
        to_flat(self)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

/// Loads every sample of a manifest, keyed by id. Paths resolve against the manifest's directory.
pub fn load_split(manifest: &Path) -> Result<Vec<(String, TrainingSample)>, PipelineError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in load_manifest(manifest)? {
        out.push((e.id.clone(), load_sample(root, &e)?));
    }
    Ok(out)
}

/// Held-out samples, `per_task` for every task.
pub fn eval_samples(config: &EvalConfig, canvas: Canvas) -> Result<Vec<TrainingSample>, PipelineError> {
    let mut out = Vec::new();
    for task in Task::ALL {
        for i in 0..config.per_task {
            out.push(crate::toyworld::make_task_sample(task, sample_seed(config.data_seed, task, i as u64), canvas)?);
        }
    }
    Ok(out)
}

/// Trains one stage and writes its metrics log, checkpoint and effective config into `dir`.
///
/// `state` may come from a fresh model, the previous stage or a resumed checkpoint.
pub fn run_stage(
    state: &mut TrainState,
    samples: &[TrainingSample],
    stage: u8,
    config: &RunConfig,
    dir: &Path,
) -> Result<Vec<MetricsRecord>, PipelineError> {
    let tc = config.stage(stage)?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    let enabled = tc.tasks();
    let picked: Vec<TrainingSample> = samples.iter().filter(|s| enabled.contains(&s.task)).cloned().collect();
    let data = TrainingSet::new(&state.model, &picked)?;
    let metrics_path = dir.join(METRICS_FILE);
    let append = state.step > 0 && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(io(&metrics_path))?;
    let mut out = BufWriter::new(file);
    let mut records = Vec::new();
    train(state, &data, tc, |r| {
        write_metrics(&mut out, r).map_err(io(&metrics_path))?;
        records.push(*r);
        Ok(())
    })?;
    out.flush().map_err(io(&metrics_path))?;
    let ckpt = model_checkpoint(&state.model, Some(&state.optimizer), state.step, config.flat());
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(records)
}

/// Keys a checkpoint must agree on with the current config before training continues from it.
pub const PINNED_PREFIXES: [&str; 1] = ["model."];

fn checked(path: &Path, config: &RunConfig) -> Result<Checkpoint, PipelineError> {
    let ckpt = Checkpoint::load(path)?;
    let keys = differing_keys(&ckpt.header.config, &config.flat(), &PINNED_PREFIXES);
    if !keys.is_empty() {
        return Err(CheckpointError::ConfigMismatch(keys).into());
    }
    Ok(ckpt)
}

/// Restores model, moments and step from a checkpoint written by [`run_stage`].
pub fn resume_state(path: &Path, config: &RunConfig, stage: u8) -> Result<TrainState, PipelineError> {
    let ckpt = checked(path, config)?;
    let (model, optimizer) = restore_model(&ckpt)?;
    let mut state = TrainState::new(model, config.stage(stage)?);
    if let Some(opt) = optimizer {
        state.optimizer = opt;
    }
    state.step = ckpt.header.step;
    Ok(state)
}

/// Starts a stage from another stage's weights with fresh optimizer moments.
pub fn init_state(path: &Path, config: &RunConfig, stage: u8) -> Result<TrainState, PipelineError> {
    let (model, _) = restore_model(&checked(path, config)?)?;
    Ok(TrainState::new(model, config.stage(stage)?))
}

/// Loads only the weights of a checkpoint.
pub fn load_model(path: &Path) -> Result<TryOnModel<f32>, PipelineError> {
    Ok(restore_model(&Checkpoint::load(path)?)?.0)
}

/// Generates candidates of `kind` from `sources` and runs both filter gates on each.
pub fn synthesize_filtered<G: Generator + ?Sized>(
    generator: &G,
    sources: &[(String, TrainingSample)],
    kind: SynthKind,
    n: usize,
    synth: &SynthConfig,
    tau: f64,
) -> Result<Vec<SynthCandidate>, PipelineError> {
    let mut cands = match kind {
        SynthKind::MultiGarment => synthesize_b1(generator, sources, n, synth.sampling_steps, synth.seed)?,
        SynthKind::ModelToModel => synthesize_b2(generator, sources, n, synth.sampling_steps, synth.seed)?,
    };
    refilter(&mut cands, tau)?;
    Ok(cands)
}

/// Recomputes every candidate's filter record at `tau`.
pub fn refilter(cands: &mut [SynthCandidate], tau: f64) -> Result<(), PipelineError> {
    for c in cands {
        c.filter_record = Some(filter_sample(&c.sample, tau)?);
    }
    Ok(())
}

/// Source samples for a route: dressed people from garment reconstruction for
/// multi-garment, flat garments from model-free samples for model-to-model.
pub fn synth_sources(real: &[(String, TrainingSample)], kind: SynthKind) -> Vec<(String, TrainingSample)> {
    let task = match kind {
        SynthKind::MultiGarment => Task::GarmentRecon,
        SynthKind::ModelToModel => Task::ModelFree,
    };
    real.iter().filter(|(_, s)| s.task == task).cloned().collect()
}

/// Writes every candidate (accepted or not) with its filter record and provenance.
pub fn write_candidates(dir: &Path, cands: &[SynthCandidate]) -> Result<PathBuf, PipelineError> {
    let mut entries = Vec::with_capacity(cands.len());
    for c in cands {
        let mut e = write_sample_files(&c.sample, dir, &c.id)?;
        e.filter_record = c.filter_record;
        e.provenance = Some(c.provenance.clone());
        entries.push(e);
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Real entries plus the accepted synthetic ones, with paths rebased onto `out_dir`.
pub fn merge_manifests(real: &Path, synth: &Path, out_dir: &Path) -> Result<(PathBuf, usize, usize), PipelineError> {
    let rel = |p: &Path| -> String {
        let dir = p.parent().unwrap_or(Path::new("."));
        relative_to(dir, out_dir)
    };
    let real_entries = load_manifest(real)?;
    let accepted: Vec<ManifestEntry> =
        load_manifest(synth)?.into_iter().filter(|e| e.filter_record.is_some_and(|r| r.accepted())).collect();
    let (rr, rs) = (rel(real), rel(synth));
    let merged: Vec<ManifestEntry> =
        real_entries.iter().map(|e| e.rebased(&rr)).chain(accepted.iter().map(|e| e.rebased(&rs))).collect();
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, &merged)?;
    Ok((path, real_entries.len(), accepted.len()))
}

/// Path of `target` as seen from `base`, both given relative to the same root or both absolute.
pub fn relative_to(target: &Path, base: &Path) -> String {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(p) };
        p.components().fold(PathBuf::new(), |mut acc, c| {
            match c {
                std::path::Component::CurDir => {}
                std::path::Component::ParentDir => {
                    acc.pop();
                }
                other => acc.push(other),
            }
            acc
        })
    };
    let (t, b) = (abs(target), abs(base));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        ".".into()
    } else {
        out.to_string_lossy().replace('\\', "/")
    }
}

/// What a two-stage run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage1_checkpoint: PathBuf,
    pub stage2_checkpoint: PathBuf,
    pub synth_manifest: PathBuf,
    pub merged_manifest: PathBuf,
    pub real: usize,
    pub candidates: usize,
    pub accepted: usize,
    pub warnings: Vec<String>,
}

/// Stage-I training, self-synthesis, two-step filtering, manifest merge and
/// Stage-II training over all six tasks, with every artifact under `out_dir`.
pub fn run_two_stage(config: &RunConfig, out_dir: &Path) -> Result<RunSummary, PipelineError> {
    config.model.validate()?;
    config.stage1.validate()?;
    config.stage2.validate()?;
    if config.stage1.stage != 1 || config.stage2.stage != 2 {
        return Err(PipelineError::Validation("stage1/stage2 configs must have stage 1 and 2".into()));
    }
    let real_manifest = build_dataset(&config.data, &out_dir.join(DATA_DIR))?;
    let real = load_split(&real_manifest)?;
    let real_samples: Vec<TrainingSample> = real.iter().map(|(_, s)| s.clone()).collect();

    let model = TryOnModel::<f32>::new(config.model.clone(), config.model_seed)?;
    let mut state = TrainState::new(model, &config.stage1);
    run_stage(&mut state, &real_samples, 1, config, &out_dir.join(STAGE1_DIR))?;

    let mut cands = synthesize_filtered(
        &state.model,
        &synth_sources(&real, SynthKind::MultiGarment),
        SynthKind::MultiGarment,
        config.synth.n_b1,
        &config.synth,
        config.filter.tau,
    )?;
    cands.extend(synthesize_filtered(
        &state.model,
        &synth_sources(&real, SynthKind::ModelToModel),
        SynthKind::ModelToModel,
        config.synth.n_b2,
        &config.synth,
        config.filter.tau,
    )?);
    let synth_manifest = write_candidates(&out_dir.join(SYNTH_DIR), &cands)?;
    let (merged_manifest, n_real, accepted) = merge_manifests(&real_manifest, &synth_manifest, &out_dir.join(MERGED_DIR))?;
    let mut warnings = Vec::new();
    if accepted == 0 {
        let w = format!("no synthesized candidate passed the filter ({} generated); stage 2 trains on real data only", cands.len());
        log::warn!("{w}");
        warnings.push(w);
    }

    let merged: Vec<TrainingSample> = load_split(&merged_manifest)?.into_iter().map(|(_, s)| s).collect();
    let mut stage2 = TrainState::new(state.model, &config.stage2);
    run_stage(&mut stage2, &merged, 2, config, &out_dir.join(STAGE2_DIR))?;

    let summary = RunSummary {
        stage1_checkpoint: out_dir.join(STAGE1_DIR).join(CHECKPOINT_FILE),
        stage2_checkpoint: out_dir.join(STAGE2_DIR).join(CHECKPOINT_FILE),
        synth_manifest,
        merged_manifest,
        real: n_real,
        candidates: cands.len(),
        accepted,
        warnings,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
