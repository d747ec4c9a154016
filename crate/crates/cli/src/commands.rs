use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use tryon_core::config::{parse_value, resolve};
use tryon_core::gradcheck::{run_suite, FD_STEP, MAX_REL_ERR};
use tryon_core::image::RgbImage;
use tryon_core::metrics::{evaluate, side_by_side, EvalReport};
use tryon_core::model::{Generator, TryOnModel};
use tryon_core::pipeline::filter::filter_sample;
use tryon_core::pipeline::run::{
    eval_samples, init_state, load_model, load_split, merge_manifests, relative_to, resume_state, run_stage, run_two_stage,
    synth_sources, synthesize_filtered, write_candidates, write_json, RunConfig, CONFIG_FILE,
};
use tryon_core::pipeline::synth::SynthKind;
use tryon_core::pipeline::TrainState;
use tryon_core::toyworld::{
    build_dataset, instruction_text, load_manifest, write_manifest, InstructionSlots, Slot, Task, TrainingSample, View,
};

use crate::{Cli, CliError, Command, EvalArgs, FilterArgs, GenDataArgs, InferArgs, KindArg, Preset, SynthesizeArgs, TrainArgs};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let config = effective_config(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(config, a),
        Command::Train(a) => train(config, a),
        Command::Synthesize(a) => synthesize(config, a),
        Command::Filter(a) => filter(config, a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(config, a),
        Command::GradCheck(a) => grad_check(a.seed, a.per_param),
        Command::Run(a) => {
            let summary = run_two_stage(&config, &a.out)?;
            print_json(&summary)
        }
    }
}

/// Preset, then the config file, then `--set` overrides.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Default => RunConfig::default(),
    };
    let mut overrides = Vec::with_capacity(cli.overrides.len());
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {raw:?} is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), parse_value(v.trim())));
    }
    Ok(resolve(&base, cli.config.as_deref(), &overrides)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn gen_data(mut config: RunConfig, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.count {
        for v in config.data.counts.values_mut() {
            if *v > 0 {
                *v = n;
            }
        }
    }
    if let Some(seed) = a.seed {
        config.data.seed = seed;
    }
    let manifest = build_dataset(&config.data, &a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &config)?;
    let n = load_manifest(&manifest)?.len();
    print_json(&serde_json::json!({ "manifest": manifest, "samples": n }))
}

fn samples_of(manifest: &Path) -> Result<Vec<TrainingSample>> {
    let split = load_split(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    Ok(split.into_iter().map(|(_, s)| s).collect())
}

fn train(mut config: RunConfig, a: &TrainArgs) -> Result<()> {
    {
        let tc = if a.stage == 1 { &mut config.stage1 } else { &mut config.stage2 };
        if let Some(steps) = a.steps {
            tc.steps = steps;
        }
        if let Some(seed) = a.seed {
            tc.seed = seed;
        }
        if tc.stage != a.stage {
            return Err(CliError::Validation(format!("stage{0}.stage must be {0}", a.stage)).into());
        }
    }
    let mut state = match (&a.resume, &a.init) {
        (Some(path), _) => resume_state(path, &config, a.stage)?,
        (None, Some(path)) => init_state(path, &config, a.stage)?,
        (None, None) => {
            if a.stage == 2 {
                log::warn!("stage 2 without --init starts from random weights");
            }
            TrainState::new(TryOnModel::new(config.model.clone(), config.model_seed)?, config.stage(a.stage)?)
        }
    };
    let samples = samples_of(&a.data)?;
    let records = run_stage(&mut state, &samples, a.stage, &config, &a.out)?;
    let last = records.last();
    print_json(&serde_json::json!({
        "checkpoint": a.out.join(tryon_core::pipeline::run::CHECKPOINT_FILE),
        "step": state.step,
        "total": last.map(|r| r.total),
    }))
}

fn synth_kind(k: KindArg) -> SynthKind {
    match k {
        KindArg::B1 => SynthKind::MultiGarment,
        KindArg::B2 => SynthKind::ModelToModel,
    }
}

fn synthesize(mut config: RunConfig, a: &SynthesizeArgs) -> Result<()> {
    if let Some(s) = a.steps {
        config.synth.sampling_steps = s;
    }
    if let Some(seed) = a.seed {
        config.synth.seed = seed;
    }
    if let Some(tau) = a.tau {
        config.filter.tau = tau;
    }
    let kind = synth_kind(a.kind);
    let model = load_model(&a.checkpoint)?;
    let real = load_split(&a.sources)?;
    let cands = synthesize_filtered(&model, &synth_sources(&real, kind), kind, a.n, &config.synth, config.filter.tau)?;
    let manifest = write_candidates(&a.out, &cands)?;
    write_json(&a.out.join(CONFIG_FILE), &config)?;
    let accepted = cands.iter().filter(|c| c.accepted()).count();
    print_json(&serde_json::json!({ "manifest": manifest, "candidates": cands.len(), "accepted": accepted }))
}

fn filter(config: RunConfig, a: &FilterArgs) -> Result<()> {
    let tau = a.tau.unwrap_or(config.filter.tau);
    let root = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = load_manifest(&a.manifest)?;
    let mut accepted = 0usize;
    for e in entries.iter_mut() {
        let sample = tryon_core::toyworld::load_sample(&root, e)?;
        let r = filter_sample(&sample, tau)?;
        accepted += r.accepted() as usize;
        e.filter_record = Some(r);
    }
    let out = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    if out.parent() != Some(root.as_path()) && out != a.manifest {
        let dir = out.parent().unwrap_or(Path::new("."));
        let rel = relative_to(&root, dir);
        entries = entries.iter().map(|e| e.rebased(&rel)).collect();
    }
    write_manifest(&out, &entries)?;
    let mut result = serde_json::json!({ "manifest": out, "tau": tau, "candidates": entries.len(), "accepted": accepted });
    if let (Some(real), Some(merged)) = (&a.real, &a.merged) {
        let (path, n_real, n_acc) = merge_manifests(real, &out, merged)?;
        if n_acc == 0 {
            log::warn!("no candidate passed the filter; the merged manifest holds real data only");
        }
        result["merged"] = serde_json::json!({ "manifest": path, "real": n_real, "accepted": n_acc });
    }
    print_json(&result)
}

fn parse_slot(s: &str) -> Result<Slot> {
    Slot::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| CliError::Usage(format!("unknown slot {s:?}")).into())
}

fn parse_view(s: &str) -> Result<View> {
    [View::Front, View::Back].into_iter().find(|x| x.name() == s).ok_or_else(|| CliError::Usage(format!("unknown view {s:?}")).into())
}

fn load_png(path: &Path) -> Result<RgbImage> {
    RgbImage::load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn infer(a: &InferArgs) -> Result<()> {
    let task = Task::parse(&a.task).ok_or_else(|| CliError::Usage(format!("unknown task {:?}", a.task)))?;
    let slots = InstructionSlots { slot: parse_slot(&a.slot)?, view: parse_view(&a.view)? };
    let instruction = instruction_text(task, slots);
    let placeholders = instruction.split_whitespace().filter(|w| *w == "<img>").count();
    if a.refs.len() != placeholders {
        return Err(CliError::Usage(format!("task {task} takes {placeholders} --refs, got {}", a.refs.len())).into());
    }
    let needs_pose = matches!(task, Task::ModelFree | Task::MultiView | Task::MultiGarment);
    if needs_pose != a.pose.is_some() {
        let msg = if needs_pose { format!("task {task} needs --pose") } else { format!("task {task} takes no --pose") };
        return Err(CliError::Usage(msg).into());
    }
    let model = load_model(&a.checkpoint)?;
    let refs: Vec<RgbImage> = a.refs.iter().map(|p| load_png(p)).collect::<Result<_>>()?;
    let pose = a.pose.as_deref().map(load_png).transpose()?;
    let cond = model.conditioning_from_text(&instruction, &refs, pose.as_ref())?;
    let img = model.sample(&cond, a.steps, a.seed)?;
    img.save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let sidecar = a.out.with_extension("json");
    let echo = serde_json::json!({
        "checkpoint": a.checkpoint, "task": task, "instruction": instruction, "refs": a.refs,
        "pose": a.pose, "steps": a.steps, "seed": a.seed,
    });
    write_json(&sidecar, &echo)?;
    print_json(&serde_json::json!({ "out": a.out }))
}

#[derive(Serialize)]
struct EvalArtifact<'a> {
    config: std::collections::BTreeMap<String, Value>,
    report: &'a EvalReport,
}

fn eval(mut config: RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(s) = a.steps {
        config.eval.sampling_steps = s;
    }
    if let Some(seed) = a.seed {
        config.eval.seed = seed;
    }
    let model = load_model(&a.checkpoint)?;
    let samples = match &a.manifest {
        Some(m) => samples_of(m)?,
        None => eval_samples(&config.eval, model.config.canvas)?,
    };
    let id = a.checkpoint.display().to_string();
    let report = evaluate(&model, &samples, config.eval.sampling_steps, config.eval.seed, &id)?;
    write_json(&a.out, &EvalArtifact { config: config.flat(), report: &report })?;
    if let Some(dir) = &a.images {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for task in Task::ALL {
            if let Some(s) = samples.iter().find(|s| s.task == task) {
                let out = Generator::generate(&model, s, config.eval.sampling_steps, tryon_core::metrics::eval_seed(config.eval.seed, s.seed))?;
                let mut strip: Vec<&RgbImage> = s.refs.iter().collect();
                strip.push(&out);
                strip.push(&s.target);
                side_by_side(&strip)?.save_png(&dir.join(format!("{task}.png")))?;
            }
        }
    }
    print_json(&report.tasks)
}

fn grad_check(seed: u64, per_param: usize) -> Result<()> {
    let results = run_suite(seed, per_param)?;
    for r in &results {
        print_json(&serde_json::json!({
            "term": r.term, "checked": r.checked, "max_rel_err": r.max_rel_err, "step": FD_STEP,
            "tolerance": MAX_REL_ERR, "pass": r.passed(), "worst": r.worst,
        }))?;
    }
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(CliError::Failed(format!("{} gradient off by {:.3e}", r.term, r.max_rel_err)).into()),
        None => Ok(()),
    }
}
