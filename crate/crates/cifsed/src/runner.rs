//! Runs experiments across seeds in parallel and lays out the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use cifsed_core::corpus::{sample_episode, Dataset, SessionPlan, Tag};
use cifsed_core::distill::{build_input, pretrain_base, ModelSnapshot, PromptContext};
use cifsed_core::harness::{run_seed, RunConfig, RunReport, SeedRun};
use cifsed_core::math::Matrix;
use cifsed_core::prompt::{stage_of_session, PromptTemplates};
use cifsed_core::rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Prepared};
use crate::error::{Error, Result};
use crate::persist::{self, PlanManifest};
use crate::report;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parent of the run directory.
    pub out_dir: PathBuf,
    /// Directory of `seed-<n>.json` base models to reuse (and fill).
    pub base_cache: Option<PathBuf>,
    /// Write emission and transition scores of one evaluation episode.
    pub dump_scores: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
}

pub fn run_dir_name(config: &ExperimentConfig) -> String {
    format!("{}-{}", config.hash(), chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

pub fn base_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.json"))
}

/// Every seed of `prepared`, in parallel, without touching the filesystem.
/// `bases` supplies cached base models by seed.
pub fn run_seeds(prepared: &Prepared, bases: &(dyn Fn(u64) -> Option<ModelSnapshot> + Sync)) -> Result<Vec<SeedRun>> {
    let run = &prepared.run;
    let runs: Vec<SeedRun> = run
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&prepared.train, &prepared.test, run, seed, bases(seed)))
        .collect::<cifsed_core::Result<_>>()?;
    Ok(runs)
}

pub fn run_in_memory(prepared: &Prepared) -> Result<(RunReport, Vec<SeedRun>)> {
    let runs = run_seeds(prepared, &|_| None)?;
    Ok((RunReport::from_runs(&prepared.run, runs.clone()), runs))
}

/// Full experiment: trains, persists snapshots and manifests, emits reports.
pub fn execute(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome> {
    let prepared = config.prepare()?;
    let dir = options.out_dir.join(run_dir_name(config));
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(Error::io(&cfg_path))?;
    log::info!("run directory {}", dir.display());

    let cached = |seed: u64| {
        let path = base_path(options.base_cache.as_ref()?, seed);
        if !path.exists() {
            return None;
        }
        match persist::load_snapshot(&path) {
            Ok(s) => {
                log::info!("reusing base model {}", path.display());
                Some(s)
            }
            Err(e) => {
                log::warn!("ignoring cached base model: {e}");
                None
            }
        }
    };
    let runs = run_seeds(&prepared, &cached)?;
    for run in &runs {
        let plan = prepared.run.plan(&prepared.train, run.seed)?;
        persist::write_json(
            &PlanManifest::new(&plan, &prepared.train, &prepared.test),
            &dir.join("manifests").join(format!("seed-{}.json", run.seed)),
        )?;
        if let Some(base) = &run.base {
            persist::save_snapshot(base, &base_path(&dir.join("base"), run.seed))?;
            if let Some(cache) = &options.base_cache {
                let path = base_path(cache, run.seed);
                if !path.exists() {
                    persist::save_snapshot(base, &path)?;
                }
            }
        }
        for (spec, fin) in prepared.run.methods.iter().zip(&run.finals) {
            let Some(fin) = fin else { continue };
            let name = format!("{}-seed-{}.json", spec.name, run.seed);
            persist::save_snapshot(fin, &dir.join("snapshots").join(&name))?;
            if options.dump_scores {
                let dump = dump_scores(&prepared, &plan, spec.name.as_str(), spec.flags.pl.then_some(spec.flags.cl), fin)?;
                persist::write_json(&dump, &dir.join("scores").join(&name))?;
            }
        }
    }
    let report = RunReport::from_runs(&prepared.run, runs);
    report::emit(&report, &dir)?;
    Ok(RunOutcome { dir, report })
}

/// Pretrains the base model of every seed into `dir/seed-<n>.json`.
pub fn pretrain(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let prepared = config.prepare()?;
    let run = &prepared.run;
    let snapshots: Vec<(u64, ModelSnapshot)> = run
        .seeds
        .par_iter()
        .map(|&seed| {
            let plan = run.plan(&prepared.train, seed)?;
            let (snap, trace) = pretrain_base(&prepared.train, &plan, &run.model, &run.train, seed)?;
            log::info!("seed {seed}: final pretraining loss {:.4}", trace.last().copied().unwrap_or(f64::NAN));
            Ok((seed, snap))
        })
        .collect::<cifsed_core::Result<_>>()?;
    snapshots
        .into_iter()
        .map(|(seed, snap)| {
            let path = base_path(dir, seed);
            persist::save_snapshot(&snap, &path)?;
            Ok(path)
        })
        .collect()
}

/// Writes the dataset split and per-seed session manifests into `dir`.
pub fn prepare(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let prepared = config.prepare()?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut written = Vec::new();
    for (name, ds) in [("train.jsonl", &prepared.train), ("test.jsonl", &prepared.test)] {
        let path = dir.join(name);
        crate::data::save_dataset(ds, &path)?;
        written.push(path);
    }
    for &seed in &prepared.run.seeds {
        let plan = prepared.run.plan(&prepared.train, seed)?;
        let path = dir.join(format!("manifest-seed-{seed}.json"));
        persist::write_json(&PlanManifest::new(&plan, &prepared.train, &prepared.test), &path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct QueryScores {
    pub tokens: Vec<String>,
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub emissions: Matrix,
}

#[derive(Debug, Serialize)]
pub struct ScoreDump {
    pub method: String,
    pub seed: u64,
    pub session: usize,
    pub labels: Vec<String>,
    pub mu: Matrix,
    pub sigma: Matrix,
    pub queries: Vec<QueryScores>,
}

fn tag_name(ds: &Dataset, tag: Tag) -> String {
    match tag {
        Tag::O => "O".to_string(),
        Tag::B(c) => format!("B-{}", ds.class_name(c)),
        Tag::I(c) => format!("I-{}", ds.class_name(c)),
    }
}

/// Scores of the first final-session evaluation episode. `curriculum` is
/// `None` for methods without prompts, otherwise whether stages advance.
fn dump_scores(
    prepared: &Prepared,
    plan: &SessionPlan,
    method: &str,
    curriculum: Option<bool>,
    snapshot: &ModelSnapshot,
) -> Result<ScoreDump> {
    let run: &RunConfig = &prepared.run;
    let m = run.sessions;
    let classes = plan.union_through(m);
    let episode = sample_episode(
        &prepared.test,
        &classes,
        classes.len(),
        plan.shot,
        plan.query_size,
        &[],
        rng::derive(plan.seed, &[rng::tag("score-dump")]),
    )?;
    let stage = match curriculum {
        Some(true) => Some(stage_of_session(m, m)?),
        Some(false) => Some(1),
        None => None,
    };
    let templates: &PromptTemplates = &run.templates;
    let ctx = stage.map(|stage| PromptContext {
        templates,
        stage,
        session: m,
        recent_window: 0,
        fill_gold: false,
    });
    let input = build_input(&prepared.test, plan, &episode, ctx.as_ref(), snapshot.params.encoder.config.max_len)?;
    let fwd = snapshot.params.forward_episode(&input, 0, 0)?;
    let space = episode.label_space();
    let names = |labels: &[usize]| labels.iter().map(|&l| tag_name(&prepared.test, space.tag(l))).collect();
    let paths = fwd.decode()?;
    Ok(ScoreDump {
        method: method.to_string(),
        seed: plan.seed,
        session: m,
        labels: (0..space.len()).map(|l| tag_name(&prepared.test, space.tag(l))).collect(),
        mu: fwd.moments.mu.clone(),
        sigma: fwd.sigma.clone(),
        queries: input
            .query
            .iter()
            .zip(&fwd.queries)
            .zip(&paths)
            .map(|((q, f), p)| QueryScores {
                tokens: q.tokens.clone(),
                gold: names(&q.gold),
                predicted: names(p),
                emissions: f.emissions.clone(),
            })
            .collect(),
    })
}
