//! Experiment orchestration: method presets, session-wise evaluation and
//! multi-seed aggregation.
//!
//! Every seed fixes the session split, the base model, the training draws and
//! the evaluation episodes, so methods run under one seed are compared on
//! identical data. Training failures are recorded in the report rather than
//! aborting the run.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_episode, select_exemplars, split_sessions, Dataset, SessionPlan};
use crate::distill::{
    build_input, episodic_train, pretrain_base, train_session, MethodFlags, ModelSnapshot,
    PromptContext, SessionLog, StepLog, TeacherPair, TrainConfig,
};
use crate::metrics::{extract_spans, Span, SpanCounts};
use crate::model::ModelConfig;
use crate::prompt::{stage_of_session, PromptTemplates};
use crate::{rng, Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PromptKd,
    PaCrfCil,
    PaCrfMeta,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PromptKd => "prompt-kd",
            Self::PaCrfCil => "pa-crf-cil",
            Self::PaCrfMeta => "pa-crf-meta",
        }
    }
}

/// A named method variant; ablations are `prompt-kd` with flags removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub method: Method,
    pub flags: MethodFlags,
}

impl MethodSpec {
    pub fn prompt_kd() -> Self {
        Self::new("prompt-kd", Method::PromptKd, MethodFlags::FULL)
    }

    /// Ablations `'a'` (no curriculum) through `'d'` (father-only KD).
    pub fn ablation(which: char) -> Option<Self> {
        let full = MethodFlags::FULL;
        let flags = match which {
            'a' => MethodFlags { cl: false, ..full },
            'b' => MethodFlags { pl: false, cl: false, ..full },
            'c' => MethodFlags { att: false, pl: false, cl: false, ..full },
            'd' => MethodFlags { at: false, att: false, pl: false, cl: false, ..full },
            _ => return None,
        };
        Some(Self::new(&format!("ablation-{which}"), Method::PromptKd, flags))
    }

    pub fn pa_crf_cil() -> Self {
        Self::new("pa-crf-cil", Method::PaCrfCil, MethodFlags::FINE_TUNE)
    }

    pub fn pa_crf_meta() -> Self {
        Self::new("pa-crf-meta", Method::PaCrfMeta, MethodFlags::FINE_TUNE)
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "prompt-kd" => Some(Self::prompt_kd()),
            "pa-crf-cil" => Some(Self::pa_crf_cil()),
            "pa-crf-meta" => Some(Self::pa_crf_meta()),
            _ => name
                .strip_prefix("ablation-")
                .and_then(|s| s.chars().next().filter(|_| s.len() == 1))
                .and_then(Self::ablation),
        }
    }

    fn new(name: &str, method: Method, flags: MethodFlags) -> Self {
        Self {
            name: name.to_string(),
            method,
            flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        match self.method {
            Method::PromptKd if !self.flags.kd => Err(Error::InvalidConfig(format!(
                "{}: prompt-kd needs distillation",
                self.name
            ))),
            Method::PaCrfCil | Method::PaCrfMeta if self.flags != MethodFlags::FINE_TUNE => {
                Err(Error::InvalidConfig(format!("{}: baselines take no flags", self.name)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub base_count: usize,
    pub sessions: usize,
    /// Exemplars kept per base class.
    pub exemplars_per_base: usize,
    pub seeds: Vec<u64>,
    /// Share of each class's instances held out for evaluation.
    pub test_fraction: f64,
    pub eval_episodes: usize,
    pub meta_episodes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub templates: PromptTemplates,
    pub methods: Vec<MethodSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            way: 2,
            shot: 1,
            query: 1,
            base_count: 10,
            sessions: 5,
            exemplars_per_base: 1,
            seeds: (0..5).collect(),
            test_fraction: 0.25,
            eval_episodes: 50,
            meta_episodes: 500,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            templates: PromptTemplates::default(),
            methods: alloc::vec![MethodSpec::prompt_kd(), MethodSpec::pa_crf_cil()],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.way == 0 || self.shot == 0 || self.query == 0 || self.base_count == 0 {
            return bad("way, shot, query and base count must be positive".into());
        }
        if self.sessions == 0 {
            return bad("at least one incremental session".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method".into());
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("method names must be unique".into());
        }
        for m in &self.methods {
            m.validate()?;
        }
        self.model.encoder.validate()?;
        self.train.validate()?;
        self.templates.validate()
    }

    /// Classes the dataset must provide.
    pub fn class_count(&self) -> usize {
        self.base_count + self.sessions * self.way
    }

    pub fn plan(&self, dataset: &Dataset, seed: u64) -> Result<SessionPlan> {
        if dataset.classes().len() != self.class_count() {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, the schedule needs {} (B + M·N)",
                dataset.classes().len(),
                self.class_count()
            )));
        }
        Ok(split_sessions(dataset, self.way, self.base_count, seed)?
            .with_episode_shape(self.shot, self.query))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginScore {
    /// Session that introduced the classes (0 = base).
    pub origin: usize,
    pub counts: SpanCounts,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub ancestor: f64,
    pub father: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: SpanCounts,
    pub by_origin: Vec<OriginScore>,
    /// Mean teacher weights over the session's distillation steps.
    pub alpha: Option<AlphaPoint>,
}

impl SessionReport {
    pub fn origin_f1(&self, origin: usize) -> Option<f64> {
        self.by_origin.iter().find(|o| o.origin == origin).map(|o| o.f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub sessions: Vec<SessionReport>,
    pub logs: Vec<SessionLog>,
    /// Set when training stopped early; `sessions` then holds what finished.
    pub failure: Option<String>,
}

impl SeedReport {
    pub fn is_complete(&self, expected_sessions: usize) -> bool {
        self.failure.is_none() && self.sessions.len() == expected_sessions
    }

    pub fn average_f1(&self) -> f64 {
        mean(&self.sessions.iter().map(|s| s.f1).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub spec: MethodSpec,
    pub per_seed: Vec<SeedReport>,
    /// Mean and sample standard deviation per session over complete seeds.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub average_f1: f64,
    pub average_f1_std: f64,
    pub seeds_used: usize,
}

impl MethodReport {
    pub fn from_seeds(spec: MethodSpec, per_seed: Vec<SeedReport>, sessions: usize) -> Self {
        let complete: Vec<&SeedReport> = per_seed.iter().filter(|s| s.is_complete(sessions)).collect();
        let column = |m: usize| complete.iter().map(|s| s.sessions[m].f1).collect::<Vec<_>>();
        let averages: Vec<f64> = complete.iter().map(|s| s.average_f1()).collect();
        Self {
            mean: (0..sessions).map(|m| mean(&column(m))).collect(),
            std: (0..sessions).map(|m| sample_std(&column(m))).collect(),
            average_f1: mean(&averages),
            average_f1_std: sample_std(&averages),
            seeds_used: complete.len(),
            spec,
            per_seed,
        }
    }

    pub fn seed(&self, seed: u64) -> Option<&SeedReport> {
        self.per_seed.iter().find(|s| s.seed == seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config: RunConfig,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    /// Aggregates per-seed runs (in seed order) into method reports.
    pub fn from_runs(config: &RunConfig, runs: Vec<SeedRun>) -> Self {
        let sessions = config.sessions + 1;
        let mut per_method: Vec<Vec<SeedReport>> = alloc::vec![Vec::new(); config.methods.len()];
        for run in runs {
            for (slot, r) in per_method.iter_mut().zip(run.reports) {
                slot.push(r);
            }
        }
        Self {
            version: REPORT_VERSION,
            config: config.clone(),
            methods: config
                .methods
                .iter()
                .cloned()
                .zip(per_method)
                .map(|(spec, seeds)| MethodReport::from_seeds(spec, seeds, sessions))
                .collect(),
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.spec.name == name)
    }
}

/// Everything one seed produces: a report per configured method plus the
/// shared base model and each method's final snapshot.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub base: Option<ModelSnapshot>,
    pub pretrain_loss: Vec<f64>,
    pub reports: Vec<SeedReport>,
    pub finals: Vec<Option<ModelSnapshot>>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    crate::math::sqrt(xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Scores `snapshot` on `episodes` test episodes over every class learned
/// through session `m`. Support sequences get masked prompts of
/// `prompt_stage` when one is given. Micro counts pool over all episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_session(
    snapshot: &ModelSnapshot,
    test: &Dataset,
    plan: &SessionPlan,
    m: usize,
    episodes: usize,
    templates: &PromptTemplates,
    prompt_stage: Option<u8>,
    seed: u64,
) -> Result<SessionReport> {
    let classes = plan.union_through(m);
    let max_len = snapshot.params.encoder.config.max_len;
    let ctx = prompt_stage.map(|stage| PromptContext {
        templates,
        stage,
        session: m,
        recent_window: 0,
        fill_gold: false,
    });
    let mut counts = SpanCounts::default();
    let mut by_origin: BTreeMap<usize, SpanCounts> = (0..=m).map(|o| (o, SpanCounts::default())).collect();
    for e in 0..episodes {
        let episode = sample_episode(
            test,
            &classes,
            classes.len(),
            plan.shot,
            plan.query_size,
            &[],
            rng::derive(seed, &[rng::tag("eval"), m as u64, e as u64]),
        )?;
        let space = episode.label_space();
        let input = build_input(test, plan, &episode, ctx.as_ref(), max_len)?;
        let fwd = snapshot.params.forward_episode(&input, 0, 0)?;
        for (path, q) in fwd.decode()?.iter().zip(&input.query) {
            let pred = extract_spans(&space.decode(path));
            let gold = extract_spans(&space.decode(&q.gold));
            counts.add(SpanCounts::of(&pred, &gold));
            for (origin, c) in by_origin.iter_mut() {
                let keep = |s: &&Span| plan.session_of(s.class) == Some(*origin);
                let p: Vec<Span> = pred.iter().filter(keep).copied().collect();
                let g: Vec<Span> = gold.iter().filter(keep).copied().collect();
                c.add(SpanCounts::of(&p, &g));
            }
        }
    }
    Ok(SessionReport {
        session: m,
        f1: counts.f1(),
        precision: counts.precision(),
        recall: counts.recall(),
        counts,
        by_origin: by_origin
            .into_iter()
            .map(|(origin, counts)| OriginScore {
                origin,
                counts,
                f1: counts.f1(),
            })
            .collect(),
        alpha: None,
    })
}

fn eval_seed(seed: u64) -> u64 {
    rng::derive(seed, &[rng::tag("evaluation")])
}

fn prompt_stage(spec: &MethodSpec, m: usize, total: usize) -> Result<Option<u8>> {
    if !spec.flags.pl {
        return Ok(None);
    }
    Ok(Some(if spec.flags.cl { stage_of_session(m, total)? } else { 1 }))
}

/// Sessions 1..=M of one method, starting from the shared base model.
#[allow(clippy::too_many_arguments)]
fn run_method(
    spec: &MethodSpec,
    train: &Dataset,
    test: &Dataset,
    plan: &SessionPlan,
    config: &RunConfig,
    base: &ModelSnapshot,
    session0: &SessionReport,
    seed: u64,
) -> (SeedReport, Option<ModelSnapshot>) {
    let mut report = SeedReport {
        seed,
        sessions: alloc::vec![session0.clone()],
        logs: Vec::new(),
        failure: None,
    };
    let mut father: Option<ModelSnapshot> = None;
    for m in 1..=config.sessions {
        let step = || -> Result<(ModelSnapshot, SessionLog, SessionReport)> {
            let session_seed = rng::derive(seed, &[rng::tag("session"), m as u64]);
            let (snapshot, log) = match spec.method {
                Method::PaCrfMeta => {
                    let mut snapshot = father.clone().unwrap_or_else(|| base.clone());
                    let trace = episodic_train(
                        &mut snapshot.params,
                        train,
                        plan,
                        &plan.union_through(m),
                        config.meta_episodes,
                        &config.train,
                        "meta",
                        session_seed,
                    )?;
                    snapshot.meta.session = m;
                    snapshot.meta.classes = plan.union_through(m);
                    let log = SessionLog {
                        session: m,
                        support_size: 0,
                        query_size: 0,
                        adapt: Vec::new(),
                        steps: trace
                            .into_iter()
                            .enumerate()
                            .map(|(step, l)| StepLog {
                                step,
                                l_dis: 0.0,
                                l_stu: l,
                                l,
                                alpha_ancestor: None,
                                alpha_father: None,
                            })
                            .collect(),
                    };
                    (snapshot, log)
                }
                Method::PromptKd | Method::PaCrfCil => {
                    let store = select_exemplars(train, plan, m, config.exemplars_per_base, seed)?;
                    let pair = TeacherPair {
                        ancestor: base,
                        father: father.as_ref(),
                    };
                    train_session(
                        train,
                        plan,
                        m,
                        Some(&store),
                        pair,
                        spec.flags,
                        &config.templates,
                        &config.train,
                        session_seed,
                    )?
                }
            };
            let mut eval = evaluate_session(
                &snapshot,
                test,
                plan,
                m,
                config.eval_episodes,
                &config.templates,
                prompt_stage(spec, m, config.sessions)?,
                eval_seed(seed),
            )?;
            eval.alpha = log.mean_alpha().map(|(ancestor, father)| AlphaPoint { ancestor, father });
            Ok((snapshot, log, eval))
        };
        match step() {
            Ok((snapshot, log, eval)) => {
                log::debug!("{} seed {seed} session {m}: f1 {:.4}", spec.name, eval.f1);
                report.logs.push(log);
                report.sessions.push(eval);
                father = Some(snapshot);
            }
            Err(e) => {
                log::warn!("{} seed {seed} stopped at session {m}: {e}", spec.name);
                report.failure = Some(format!("session {m}: {e}"));
                break;
            }
        }
    }
    (report, father)
}

/// Runs every configured method for one seed. `base` reuses a previously
/// trained base model for this seed instead of pretraining again.
pub fn run_seed(
    train: &Dataset,
    test: &Dataset,
    config: &RunConfig,
    seed: u64,
    base: Option<ModelSnapshot>,
) -> Result<SeedRun> {
    config.validate()?;
    let plan = config.plan(train, seed)?;
    let (base, pretrain_loss) = match base {
        Some(b) => {
            b.validate()?;
            (Ok(b), Vec::new())
        }
        None => match pretrain_base(train, &plan, &config.model, &config.train, seed) {
            Ok((b, trace)) => (Ok(b), trace),
            Err(e) => (Err(e), Vec::new()),
        },
    };
    let session0 = base.as_ref().map_err(Clone::clone).and_then(|b| {
        evaluate_session(b, test, &plan, 0, config.eval_episodes, &config.templates, None, eval_seed(seed))
    });
    let (base, session0) = match (base, session0) {
        (Ok(b), Ok(s)) => (b, s),
        (Err(e), _) | (_, Err(e)) => {
            let failed = SeedReport {
                seed,
                sessions: Vec::new(),
                logs: Vec::new(),
                failure: Some(format!("base training: {e}")),
            };
            return Ok(SeedRun {
                seed,
                base: None,
                pretrain_loss,
                reports: alloc::vec![failed; config.methods.len()],
                finals: alloc::vec![None; config.methods.len()],
            });
        }
    };
    let (reports, finals) = config
        .methods
        .iter()
        .map(|spec| run_method(spec, train, test, &plan, config, &base, &session0, seed))
        .unzip();
    Ok(SeedRun {
        seed,
        base: Some(base),
        pretrain_loss,
        reports,
        finals,
    })
}

/// All seeds in order, then aggregation.
pub fn run_experiment(train: &Dataset, test: &Dataset, config: &RunConfig) -> Result<RunReport> {
    let runs = config
        .seeds
        .iter()
        .map(|&seed| run_seed(train, test, config, seed, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport::from_runs(config, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::encoder::EncoderConfig;

    fn small_config() -> RunConfig {
        RunConfig {
            way: 2,
            base_count: 4,
            sessions: 2,
            seeds: alloc::vec![1, 2],
            eval_episodes: 3,
            meta_episodes: 3,
            model: ModelConfig {
                encoder: EncoderConfig {
                    hidden: 6,
                    vocab_size: 256,
                    max_len: 48,
                    init_scale: 0.5,
                },
                log_sigma_bias: -1.0,
            },
            train: TrainConfig {
                samples: 2,
                adapt_steps: 2,
                inner_epochs: 2,
                pretrain_episodes: 5,
                pretrain_way: 2,
                ..TrainConfig::default()
            },
            methods: alloc::vec![
                MethodSpec::prompt_kd(),
                MethodSpec::ablation('d').unwrap(),
                MethodSpec::pa_crf_cil(),
                MethodSpec::pa_crf_meta(),
            ],
            ..RunConfig::default()
        }
    }

    fn data() -> (Dataset, Dataset) {
        generate_synthetic(
            &SyntheticConfig {
                num_classes: 8,
                instances_per_class: 10,
                ..SyntheticConfig::default()
            },
            3,
        )
        .unwrap()
        .partition(0.3, 0)
        .unwrap()
    }

    #[test]
    fn presets_respect_nesting() {
        for name in ["prompt-kd", "ablation-a", "ablation-b", "ablation-c", "ablation-d", "pa-crf-cil", "pa-crf-meta"] {
            let spec = MethodSpec::preset(name).unwrap();
            assert_eq!(spec.name, name);
            spec.validate().unwrap();
        }
        assert!(MethodSpec::preset("ablation-e").is_none());
        assert!(MethodSpec::preset("ablation-ab").is_none());
        let mut cil = MethodSpec::pa_crf_cil();
        cil.flags.pl = true;
        assert!(cil.validate().is_err());
        let mut kd = MethodSpec::prompt_kd();
        kd.flags.kd = false;
        assert!(kd.validate().is_err());
    }

    #[test]
    fn config_checks_class_count() {
        let (train, _) = data();
        let mut cfg = small_config();
        assert!(cfg.plan(&train, 0).is_ok());
        cfg.sessions = 3;
        assert!(cfg.plan(&train, 0).is_err());
        cfg.methods.push(MethodSpec::prompt_kd());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn experiment_is_deterministic_and_consistent() {
        let (train, test) = data();
        let cfg = small_config();
        let report = run_experiment(&train, &test, &cfg).unwrap();
        assert_eq!(report, run_experiment(&train, &test, &cfg).unwrap());
        assert_eq!(report.methods.len(), 4);
        for seed in &cfg.seeds {
            let firsts: Vec<&SessionReport> =
                report.methods.iter().map(|m| &m.seed(*seed).unwrap().sessions[0]).collect();
            assert!(firsts.windows(2).all(|w| w[0] == w[1]));
        }
        for m in &report.methods {
            assert_eq!(m.seeds_used, 2);
            for s in &m.per_seed {
                assert_eq!(s.sessions.len(), 3);
                let avg = s.sessions.iter().map(|r| r.f1).sum::<f64>() / 3.0;
                assert!((s.average_f1() - avg).abs() < 1e-12);
                for r in &s.sessions {
                    assert!((0.0..=1.0).contains(&r.f1));
                    let parts = r.by_origin.iter().fold(SpanCounts::default(), |mut acc, o| {
                        acc.add(o.counts);
                        acc
                    });
                    assert_eq!(parts.gold, r.counts.gold);
                    assert_eq!(parts.correct, r.counts.correct);
                    assert_eq!(r.by_origin.len(), r.session + 1);
                }
            }
            let seed_avg = m.per_seed.iter().map(|s| s.average_f1()).sum::<f64>() / 2.0;
            assert!((m.average_f1 - seed_avg).abs() < 1e-12);
        }
        let kd = report.method("prompt-kd").unwrap();
        let alpha = kd.per_seed[0].sessions[2].alpha.unwrap();
        assert!((alpha.ancestor + alpha.father - 1.0).abs() < 1e-9);
        assert!(report.method("pa-crf-cil").unwrap().per_seed[0].sessions[1].alpha.is_none());
    }

    #[test]
    fn failing_base_marks_every_method() {
        let (train, test) = data();
        let mut cfg = small_config();
        cfg.train.lr_encoder = 1e300;
        cfg.train.optimizer.max_grad_norm = None;
        cfg.train.optimizer.weight_decay = 1e300;
        let run = run_seed(&train, &test, &cfg, 1, None).unwrap();
        assert!(run.base.is_none());
        assert!(run.reports.iter().all(|r| r.failure.is_some()));
        let report = RunReport::from_runs(&cfg, alloc::vec![run]);
        assert!(report.methods.iter().all(|m| m.seeds_used == 0));
    }
}
