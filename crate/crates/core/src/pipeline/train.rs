use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{sample_loss, LossReport, LossWeights};
use super::PipelineError;
use crate::autodiff::Tape;
use crate::dit::gaussian_noise;
use crate::model::{PreparedSample, TryOnModel};
use crate::params::{AdamW, AdamWConfig, Binder, GradBuffer};
use crate::toyworld::{Task, TrainingSample};

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 1 trains the three fundamental tasks, 2 trains all six.
    pub stage: u8,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    /// Cosine floor as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub log_every: u64,
    /// Also freeze the generator's feed-forward layers.
    pub paper_freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 5000,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            warmup_steps: 0,
            schedule: Schedule::Constant,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            log_every: 10,
            paper_freeze: false,
        }
    }
}

pub const STAGE1_TASKS: [Task; 3] = [Task::SingleGarment, Task::ModelFree, Task::GarmentRecon];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Validation(m.to_string()));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        if self.stage == 1 {
            STAGE1_TASKS.to_vec()
        } else {
            Task::ALL.to_vec()
        }
    }

    /// Rate for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.optimizer.lr;
        let warm = if self.warmup_steps > 0 { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) } else { 1.0 };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                let c = 0.5 * (1.0 + (PI * progress).cos());
                self.min_lr_ratio + (1.0 - self.min_lr_ratio) * c
            }
        };
        base * warm * decay
    }
}

/// Prepared samples grouped by task.
pub struct TrainingSet {
    by_task: BTreeMap<Task, Vec<PreparedSample<f32>>>,
}

impl TrainingSet {
    pub fn new(model: &TryOnModel<f32>, samples: &[TrainingSample]) -> Result<Self, PipelineError> {
        let mut by_task: BTreeMap<Task, Vec<_>> = BTreeMap::new();
        for s in samples {
            by_task.entry(s.task).or_default().push(model.prepare(s)?);
        }
        Ok(Self { by_task })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.by_task.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.by_task.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, task: Task) -> &[PreparedSample<f32>] {
        self.by_task.get(&task).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreparedSample<f32>> {
        self.by_task.values().flatten()
    }
}

/// One metrics-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed optimizer steps.
    pub step: u64,
    pub total: f64,
    pub diff: f64,
    pub align: f64,
    pub focus: f64,
    pub focus_score: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

pub fn write_metrics<W: Write>(out: &mut W, record: &MetricsRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Mean total loss over the records with `step` in `(at - window, at]`.
pub fn smoothed_total(records: &[MetricsRecord], at: u64, window: u64) -> Option<f64> {
    let lo = at.saturating_sub(window);
    let vals: Vec<f64> = records.iter().filter(|r| r.step > lo && r.step <= at).map(|r| r.total).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Model, optimizer and step counter of a training run.
pub struct TrainState {
    pub model: TryOnModel<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: TryOnModel<f32>, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer, &model.store);
        Self { model, optimizer, step: 0 }
    }
}

/// Applies the trainable split: the target-feature projection is always frozen.
pub fn apply_freeze(model: &mut TryOnModel<f32>, paper_freeze: bool) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id);
        let frozen = name.starts_with("mgsa.target_proj")
            || (paper_freeze && name.starts_with("dit.block") && name.contains(".mlp."));
        model.store.set_trainable(id, !frozen);
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Runs optimizer steps until `config.steps`, starting from `state.step`.
///
/// Each step's batch, times and noise derive from `(seed, step)` alone, so a resumed
/// run continues exactly where an uninterrupted one would be.
pub fn train(
    state: &mut TrainState,
    data: &TrainingSet,
    config: &TrainConfig,
    mut log: impl FnMut(&MetricsRecord) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    config.validate()?;
    let enabled = config.tasks();
    if let Some(&task) = data.tasks().iter().find(|t| !enabled.contains(t)) {
        return Err(PipelineError::TaskMismatch { task, stage: config.stage });
    }
    let tasks: Vec<Task> = enabled.into_iter().filter(|&t| !data.get(t).is_empty()).collect();
    if tasks.is_empty() && state.step < config.steps {
        return Err(PipelineError::Validation("training set is empty".into()));
    }
    apply_freeze(&mut state.model, config.paper_freeze);
    state.optimizer.config = config.optimizer;
    let w = 1.0 / config.batch_size as f64;

    while state.step < config.steps {
        let mut rng = step_rng(config.seed, state.step);
        let model = &state.model;
        let mut grads = GradBuffer::new(&model.store);
        let mut report = LossReport::default();
        let mut focus_score = 0.0;
        for _ in 0..config.batch_size {
            let task = tasks[rng.random_range(0..tasks.len())];
            let pool = data.get(task);
            let prep = &pool[rng.random_range(0..pool.len())];
            let t: f64 = rng.random();
            let eps = gaussian_noise(model.dit.n_tokens, model.dit.d_in, &mut rng);
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.store);
            let loss = sample_loss(&mut tape, &mut binder, model, prep, t, &eps, &config.weights)?;
            let mut g = tape.backward(loss.total);
            grads.accumulate(binder.collect(&mut g), w as f32);
            super::loss::accumulate_report(&mut report, &loss.report, w);
            focus_score += w * loss.focus_score;
        }
        let step = state.step + 1;
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(PipelineError::NonFinite {
                step,
                detail: format!(
                    "diff={} align={} focus={} grads_finite={}",
                    report.diff,
                    report.align,
                    report.focus,
                    grads.is_finite()
                ),
            });
        }
        let grad_norm = grads.clip_global_norm(config.grad_clip);
        let clipped_norm = grads.global_norm();
        let lr = config.lr_at(state.step);
        state.optimizer.update(&mut state.model.store, &grads, lr);
        state.step = step;
        if step % config.log_every == 0 || step == config.steps {
            let r = MetricsRecord {
                step,
                total: report.total,
                diff: report.diff,
                align: report.align,
                focus: report.focus,
                focus_score,
                grad_norm,
                clipped_norm,
                lr,
            };
            log(&r)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::toyworld::{make_task_sample, Canvas};

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig { canvas: Canvas { height: 32, width: 24 }, ..Default::default() };
        c.mgsa.d_q = 16;
        c.mgsa.heads = 2;
        c.mgsa.layers = 1;
        c.mgsa.d_v = 16;
        c.dit.d_model = 16;
        c.dit.heads = 2;
        c.dit.layers = 2;
        c.dit.mlp_ratio = 2;
        c
    }

    fn data(model: &TryOnModel<f32>, tasks: &[Task]) -> TrainingSet {
        let samples: Vec<_> = tasks
            .iter()
            .flat_map(|&t| (0..2).map(move |i| make_task_sample(t, i, Canvas { height: 32, width: 24 }).unwrap()))
            .collect();
        TrainingSet::new(model, &samples).unwrap()
    }

    fn run(config: &TrainConfig) -> (TrainState, Vec<MetricsRecord>) {
        let model = TryOnModel::new(tiny(), 3).unwrap();
        let set = data(&model, &STAGE1_TASKS);
        let mut state = TrainState::new(model, config);
        let mut log = Vec::new();
        train(&mut state, &set, config, |r| {
            log.push(*r);
            Ok(())
        })
        .unwrap();
        (state, log)
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig { steps, batch_size: 2, log_every: 1, optimizer: AdamWConfig { lr: 1e-3, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn stage_task_sets() {
        assert_eq!(TrainConfig::default().tasks().len(), 3);
        assert_eq!(TrainConfig { stage: 2, ..Default::default() }.tasks(), Task::ALL.to_vec());
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (state, log) = run(&cfg(0));
        let init = TryOnModel::<f32>::new(tiny(), 3).unwrap();
        assert!(log.is_empty());
        for ((_, a), (_, b)) in state.model.store.iter().zip(init.store.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_same_log_and_resume_matches() {
        let (a, la) = run(&cfg(4));
        let (_, lb) = run(&cfg(4));
        assert_eq!(la, lb);

        let (mut half, mut lh) = run(&cfg(2));
        let model = TryOnModel::new(tiny(), 3).unwrap();
        let set = data(&model, &STAGE1_TASKS);
        train(&mut half, &set, &cfg(4), |r| {
            lh.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(la, lh);
        for ((_, x), (_, y)) in a.model.store.iter().zip(half.model.store.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn clipping_bounds_every_step_and_target_proj_stays_frozen() {
        let mut c = cfg(3);
        c.grad_clip = 1e-3;
        let (state, log) = run(&c);
        for r in &log {
            assert!(r.clipped_norm <= c.grad_clip + 1e-6, "{r:?}");
        }
        let init = TryOnModel::<f32>::new(tiny(), 3).unwrap();
        let id = init.store.id("mgsa.target_proj").unwrap();
        assert_eq!(state.model.store.get(id), init.store.get(id));
    }

    #[test]
    fn stage1_rejects_advanced_tasks() {
        let model = TryOnModel::new(tiny(), 3).unwrap();
        let set = data(&model, &[Task::SingleGarment, Task::MultiGarment]);
        let mut state = TrainState::new(model, &cfg(1));
        let err = train(&mut state, &set, &cfg(1), |_| Ok(())).unwrap_err();
        assert!(matches!(err, PipelineError::TaskMismatch { task: Task::MultiGarment, stage: 1 }));
    }

    #[test]
    fn cosine_schedule_warms_up_and_decays() {
        let c = TrainConfig { steps: 100, warmup_steps: 10, schedule: Schedule::Cosine, ..Default::default() };
        let lr = c.optimizer.lr;
        assert!((c.lr_at(0) - lr * 0.1).abs() < 1e-15);
        assert!((c.lr_at(9) - lr).abs() < 1e-15);
        assert!((c.lr_at(100) - lr * c.min_lr_ratio).abs() < 1e-15);
    }

    #[test]
    fn smoothing_window() {
        let rec = |step, total| MetricsRecord { step, total, diff: 0.0, align: 0.0, focus: 0.0, focus_score: 0.0, grad_norm: 0.0, clipped_norm: 0.0, lr: 0.0 };
        let log: Vec<_> = (1..=10).map(|s| rec(s, s as f64)).collect();
        assert_eq!(smoothed_total(&log, 10, 3), Some(9.0));
        assert_eq!(smoothed_total(&log, 0, 3), None);
    }
}
