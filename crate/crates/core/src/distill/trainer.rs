use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::attention::{attention_scores, attention_scores_grad, combine_teachers, teacher_weights};
use super::loss::{
    distillation_loss, distillation_loss_grad, student_loss, student_loss_grad, total_loss,
    LossBreakdown,
};
use super::snapshot::{ModelSnapshot, SnapshotMeta, TeacherPair, SNAPSHOT_VERSION};
use crate::corpus::{
    augment_session, sample_episode, ClassId, Dataset, Episode, ExemplarStore, SessionPlan,
};
use crate::crf::{marginals_vjp, sequence_nll_grad, LabelDistribution};
use crate::math::Matrix;
use crate::model::{EpisodeInput, ModelConfig, ModelParams, QuerySeq, SupportSeq};
use crate::optim::{AdamW, AdamWConfig, ParamGroup};
use crate::prompt::{assemble_prompt, mask_star_value, PromptFills, PromptTemplates};
use crate::{rng, Error, Result};

/// Which parts of the incremental learner are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFlags {
    /// Distil from frozen teachers; otherwise plain fine-tuning.
    pub kd: bool,
    /// Use the ancestor teacher next to the father.
    pub at: bool,
    /// Learn the teacher weights; otherwise a fixed even split.
    pub att: bool,
    /// Append cloze prompts to support sequences.
    pub pl: bool,
    /// Advance prompt templates through the curriculum stages.
    pub cl: bool,
}

impl MethodFlags {
    pub const FULL: Self = Self {
        kd: true,
        at: true,
        att: true,
        pl: true,
        cl: true,
    };
    pub const FINE_TUNE: Self = Self {
        kd: false,
        at: false,
        att: false,
        pl: false,
        cl: false,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.at && !self.kd {
            return bad("the ancestor teacher needs distillation");
        }
        if self.att && !self.at {
            return bad("teacher attention needs two teachers");
        }
        if self.pl && !self.att {
            return bad("prompts need teacher attention");
        }
        if self.cl && !self.pl {
            return bad("the prompt curriculum needs prompts");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Transition samples per query sequence.
    pub samples: usize,
    pub optimizer: AdamWConfig,
    pub lr_encoder: f64,
    pub lr_transition: f64,
    pub lr_attention: f64,
    pub freeze_attention: bool,
    /// Scale of the identity the attention matrix starts from.
    pub attention_init: f64,
    pub adapt_steps: usize,
    pub inner_epochs: usize,
    pub pretrain_episodes: usize,
    pub pretrain_way: usize,
    pub pretrain_shot: usize,
    pub pretrain_query: usize,
    /// Sessions back that still count as learned "recently".
    pub recent_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            optimizer: AdamWConfig::default(),
            lr_encoder: 1e-3,
            lr_transition: 1e-3,
            lr_attention: 1e-3,
            freeze_attention: false,
            attention_init: 1.0,
            adapt_steps: 10,
            inner_epochs: 20,
            pretrain_episodes: 500,
            pretrain_way: 5,
            pretrain_shot: 1,
            pretrain_query: 1,
            recent_window: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_encoder, self.lr_transition, self.lr_attention];
        if self.samples == 0 {
            return Err(Error::InvalidConfig("at least one transition sample".into()));
        }
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if self.pretrain_way == 0 || self.pretrain_shot == 0 || self.pretrain_query == 0 {
            return Err(Error::InvalidConfig("empty pretraining episodes".into()));
        }
        Ok(())
    }
}

/// How support prompts are rendered for one session.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub templates: &'a PromptTemplates,
    pub stage: u8,
    pub session: usize,
    pub recent_window: usize,
    /// Fill slots with gold answers (training) or leave them masked.
    pub fill_gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_dis: f64,
    pub l_stu: f64,
    pub l: f64,
    pub alpha_ancestor: Option<f64>,
    pub alpha_father: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Episode NLL before each adaptation step.
    pub adapt: Vec<f64>,
    pub steps: Vec<StepLog>,
}

impl SessionLog {
    /// Teacher weights averaged over the inner epochs.
    pub fn mean_alpha(&self) -> Option<(f64, f64)> {
        let pairs: Vec<(f64, f64)> = self
            .steps
            .iter()
            .filter_map(|s| Some((s.alpha_ancestor?, s.alpha_father?)))
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.len() as f64;
        Some((
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }
}

/// Turns an episode into model inputs: support sequences carry prompts when
/// `prompt` is given, query sequences are always bare.
pub fn build_input(
    dataset: &Dataset,
    plan: &SessionPlan,
    episode: &Episode,
    prompt: Option<&PromptContext<'_>>,
    max_len: usize,
) -> Result<EpisodeInput> {
    let space = episode.label_space();
    let name = |c: ClassId| dataset.class_name(c).to_string();
    let mut support = Vec::with_capacity(episode.support.len());
    for inst in episode.support_instances(dataset) {
        let labels = space.encode(&inst.tags);
        let Some(ctx) = prompt else {
            support.push(SupportSeq {
                tokens: inst.tokens.clone(),
                labels: labels.into_iter().map(Some).collect(),
                prompt_len: 0,
            });
            continue;
        };
        let fills = if ctx.fill_gold {
            let mut fills = PromptFills::gold(inst, &space, &name);
            let class = inst.tags.iter().filter_map(|t| t.class()).find(|c| space.contains(*c));
            fills.mask_star = class
                .and_then(|c| plan.session_of(c))
                .and_then(|learned| mask_star_value(learned, ctx.session, ctx.stage, ctx.recent_window))
                .map(ToString::to_string);
            fills
        } else {
            PromptFills::default()
        };
        let seq = assemble_prompt(&inst.tokens, ctx.templates.stage(ctx.stage), &fills, max_len)?;
        support.push(SupportSeq {
            labels: seq.extend_labels(&labels),
            prompt_len: seq.prompt_len,
            tokens: seq.tokens,
        });
    }
    let query = episode
        .query_instances(dataset)
        .map(|inst| QuerySeq {
            tokens: inst.tokens.clone(),
            gold: space.encode(&inst.tags),
        })
        .collect();
    Ok(EpisodeInput {
        num_labels: space.len(),
        support,
        query,
    })
}

/// Token marginals of a frozen model on every query sequence.
pub fn teacher_predict(
    teacher: &ModelSnapshot,
    input: &EpisodeInput,
    samples: usize,
    seed: u64,
) -> Result<Vec<LabelDistribution>> {
    let fwd = teacher.params.forward_episode(input, samples, seed)?;
    (0..input.query.len()).map(|q| fwd.marginals(q)).collect()
}

fn apply_update(
    opt: &mut AdamW,
    params: &mut ModelParams,
    grads: &ModelParams,
    attention: Option<(&mut Matrix, &Matrix)>,
    config: &TrainConfig,
) {
    let mut groups: Vec<ParamGroup<'_>> = Vec::with_capacity(8);
    for (p, g) in params.encoder.tensors_mut().into_iter().zip(grads.encoder.tensors()) {
        groups.push(ParamGroup {
            params: p,
            grads: g,
            lr: config.lr_encoder,
        });
    }
    for (p, g) in params.transition.tensors_mut().into_iter().zip(grads.transition.tensors()) {
        groups.push(ParamGroup {
            params: p,
            grads: g,
            lr: config.lr_transition,
        });
    }
    if let Some((w, dw)) = attention {
        groups.push(ParamGroup {
            params: w.as_mut_slice(),
            grads: dw.as_slice(),
            lr: config.lr_attention,
        });
    }
    opt.step(&mut groups);
}

/// Query-averaged CRF negative log-likelihood and its parameter gradient.
fn nll_gradient(params: &ModelParams, input: &EpisodeInput, samples: usize, seed: u64) -> Result<(f64, ModelParams)> {
    let fwd = params.forward_episode(input, samples, seed)?;
    let scale = 1.0 / input.query.len().max(1) as f64;
    let mut loss = 0.0;
    let mut d_em = Vec::with_capacity(input.query.len());
    let mut d_tr = Vec::with_capacity(input.query.len());
    for (q, seq) in fwd.queries.iter().zip(&input.query) {
        let tr = &q.samples.as_ref().expect("samples drawn").samples;
        let (l, mut de, mut dt) = sequence_nll_grad(&q.emissions, tr, &seq.gold)?;
        loss += scale * l;
        de.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        dt.iter_mut().for_each(|m| m.as_mut_slice().iter_mut().for_each(|v| *v *= scale));
        d_em.push(de);
        d_tr.push(dt);
    }
    let mut grads = params.zeros_like();
    params.backward_episode(input, &fwd, &d_em, &d_tr, &mut grads);
    Ok((loss, grads))
}

fn nll_steps(
    params: &mut ModelParams,
    input: &EpisodeInput,
    steps: usize,
    config: &TrainConfig,
    stage: &'static str,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = nll_gradient(params, input, config.samples, rng::derive(seed, &[step as u64]))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage, step });
        }
        trace.push(loss);
        apply_update(&mut opt, params, &grads, None, config);
        if !params.is_finite() {
            return Err(Error::Diverged { stage, step });
        }
    }
    Ok(trace)
}

/// Fine-tunes a copy of `start` on one episode for `config.adapt_steps`
/// steps of CRF likelihood. Returns the adapted parameters and the loss seen
/// before every step.
pub fn adapt_student(
    start: &ModelParams,
    input: &EpisodeInput,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut params = start.clone();
    let trace = nll_steps(&mut params, input, config.adapt_steps, config, "adapt", seed)?;
    Ok((params, trace))
}

/// Episodic CRF-likelihood training on `pool`, one sampled episode per step.
#[allow(clippy::too_many_arguments)]
pub fn episodic_train(
    params: &mut ModelParams,
    dataset: &Dataset,
    plan: &SessionPlan,
    pool: &[ClassId],
    episodes: usize,
    config: &TrainConfig,
    stage: &'static str,
    seed: u64,
) -> Result<Vec<f64>> {
    let way = config.pretrain_way.min(pool.len());
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut trace = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep_seed = rng::derive(seed, &[rng::tag(stage), e as u64]);
        let episode = sample_episode(dataset, pool, way, config.pretrain_shot, config.pretrain_query, &[], ep_seed)?;
        let input = build_input(dataset, plan, &episode, None, params.encoder.config.max_len)?;
        let (loss, grads) = nll_gradient(params, &input, config.samples, ep_seed)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage, step: e });
        }
        trace.push(loss);
        apply_update(&mut opt, params, &grads, None, config);
        if !params.is_finite() {
            return Err(Error::Diverged { stage, step: e });
        }
    }
    Ok(trace)
}

/// Trains the base model on episodes over the base classes. The returned
/// snapshot carries an attention matrix sized for the full class schedule.
pub fn pretrain_base(
    dataset: &Dataset,
    plan: &SessionPlan,
    model: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelSnapshot, Vec<f64>)> {
    config.validate()?;
    let mut params = ModelParams::init(model, rng::derive(seed, &[rng::tag("init")]))?;
    let trace = episodic_train(
        &mut params,
        dataset,
        plan,
        plan.base(),
        config.pretrain_episodes,
        config,
        "pretrain",
        seed,
    )?;
    let all = plan.union_through(plan.num_increments());
    let l_max = 2 * all.len() + 1;
    let mut attention = Matrix::identity(l_max);
    attention.as_mut_slice().iter_mut().for_each(|v| *v *= config.attention_init);
    let snapshot = ModelSnapshot {
        params,
        attention,
        meta: SnapshotMeta {
            version: SNAPSHOT_VERSION,
            session: 0,
            classes: plan.base().to_vec(),
            seed,
        },
    };
    Ok((snapshot, trace))
}

/// Frozen teacher predictions on an episode's query set.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Marginals per teacher, per query.
    pub dists: Vec<Vec<LabelDistribution>>,
    /// Whether each teacher is the ancestor.
    pub is_ancestor: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistillOptions {
    /// Weight teachers by attention scores; otherwise evenly.
    pub use_attention: bool,
    /// Compute the gradient on `W`.
    pub learn_attention: bool,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DistillGradient {
    pub loss: LossBreakdown,
    /// Teacher weights averaged over queries.
    pub alpha: Vec<f64>,
    pub grads: ModelParams,
    pub d_attention: Matrix,
}

/// The distillation objective of one student forward pass, averaged over
/// queries, with its gradient on the student and on `W`.
pub fn distillation_gradient(
    student: &ModelParams,
    input: &EpisodeInput,
    teachers: &TeacherTargets,
    attention: &Matrix,
    options: DistillOptions,
) -> Result<DistillGradient> {
    let DistillOptions {
        use_attention,
        learn_attention,
        samples,
        seed,
    } = options;
    if teachers.dists.is_empty() || teachers.dists.iter().any(|d| d.len() != input.query.len()) {
        return Err(Error::ShapeMismatch("one teacher prediction per query".into()));
    }
    let fwd = student.forward_episode(input, samples, seed)?;
    let nq = input.query.len().max(1) as f64;
    let k = teachers.dists.len();
    let mut d_w = Matrix::zeros(attention.rows(), attention.cols());
    let (mut l_dis, mut l_stu) = (0.0, 0.0);
    let mut alpha_sum = vec![0.0; k];
    let mut d_em = Vec::with_capacity(input.query.len());
    let mut d_tr = Vec::with_capacity(input.query.len());
    for (q, seq) in input.query.iter().enumerate() {
        let p_stu = fwd.marginals(q)?;
        let dists: Vec<&LabelDistribution> = teachers.dists.iter().map(|d| &d[q]).collect();
        let alpha = if k == 1 {
            vec![1.0]
        } else if use_attention {
            let scores = dists
                .iter()
                .map(|p| attention_scores(p, &seq.gold, attention))
                .collect::<Result<Vec<f64>>>()?;
            teacher_weights(&scores)
        } else {
            vec![1.0 / k as f64; k]
        };
        let p_tea = combine_teachers(&alpha, &dists)?;
        l_dis += distillation_loss(&p_tea, &p_stu)? / nq;
        l_stu += student_loss(&p_stu, &seq.gold)? / nq;
        alpha.iter().zip(alpha_sum.iter_mut()).for_each(|(a, s)| *s += a);

        let mut g = Matrix::zeros(p_stu.tokens(), p_stu.num_labels());
        distillation_loss_grad(&p_tea, &p_stu, 1.0 / nq, &mut g);
        student_loss_grad(&p_stu, &seq.gold, 1.0 / nq, &mut g);

        if use_attention && learn_attention && k > 1 {
            let ce = dists
                .iter()
                .map(|p| distillation_loss(p, &p_stu))
                .collect::<Result<Vec<f64>>>()?;
            let mix: f64 = alpha.iter().zip(&ce).map(|(a, c)| a * c).sum();
            for ((p, a), c) in dists.iter().zip(&alpha).zip(&ce) {
                attention_scores_grad(p, &seq.gold, a * (c - mix) / nq, &mut d_w);
            }
        }

        let qf = &fwd.queries[q];
        let tr = &qf.samples.as_ref().expect("samples drawn").samples;
        g.as_mut_slice().iter_mut().for_each(|v| *v /= tr.len() as f64);
        let mut de = Matrix::zeros(g.rows(), g.cols());
        let mut dts = Vec::with_capacity(tr.len());
        for t in tr {
            let (e, dt) = marginals_vjp(&qf.emissions, t, &g)?;
            de.add_scaled(1.0, &e);
            dts.push(dt);
        }
        d_em.push(de);
        d_tr.push(dts);
    }
    alpha_sum.iter_mut().for_each(|a| *a /= nq);
    let mut grads = student.zeros_like();
    student.backward_episode(input, &fwd, &d_em, &d_tr, &mut grads);
    Ok(DistillGradient {
        loss: total_loss(l_dis, l_stu),
        alpha: alpha_sum,
        grads,
        d_attention: d_w,
    })
}

/// One few-shot session: build the replay-augmented episode, adapt the
/// father on its support, then train for `inner_epochs` steps either by
/// distillation (with `flags.kd`) or by CRF likelihood.
#[allow(clippy::too_many_arguments)]
pub fn train_session(
    dataset: &Dataset,
    plan: &SessionPlan,
    m: usize,
    store: Option<&ExemplarStore>,
    teachers: TeacherPair<'_>,
    flags: MethodFlags,
    templates: &PromptTemplates,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelSnapshot, SessionLog)> {
    flags.validate()?;
    config.validate()?;
    let total = plan.num_increments();
    if m == 0 || m > total {
        return Err(Error::SessionOutOfRange { m, total });
    }
    let father = teachers.father_or_ancestor();
    let max_len = father.params.encoder.config.max_len;
    let episode = augment_session(dataset, plan, m, store, rng::derive(seed, &[rng::tag("augment")]))?;
    let stage = if flags.cl {
        crate::prompt::stage_of_session(m, total)?
    } else {
        1
    };
    let ctx = PromptContext {
        templates,
        stage,
        session: m,
        recent_window: config.recent_window,
        fill_gold: true,
    };
    let prompt = flags.pl.then_some(&ctx);
    let input = build_input(dataset, plan, &episode, prompt, max_len)?;
    let adapt_episode = Episode {
        query: episode.support.clone(),
        ..episode.clone()
    };
    let adapt_input = build_input(dataset, plan, &adapt_episode, prompt, max_len)?;

    let (mut student, adapt) = adapt_student(
        &father.params,
        &adapt_input,
        config,
        rng::derive(seed, &[rng::tag("adapt")]),
    )?;

    let mut attention = father.attention.clone();
    let mut steps = Vec::with_capacity(config.inner_epochs);
    if flags.kd {
        let chosen: Vec<(&ModelSnapshot, bool)> = match (flags.at, teachers.father) {
            (true, Some(f)) => vec![(teachers.ancestor, true), (f, false)],
            (true, None) => vec![(teachers.ancestor, true)],
            (false, _) => vec![(father, false)],
        };
        let teacher_set = TeacherTargets {
            dists: chosen
                .iter()
                .enumerate()
                .map(|(i, (t, _))| {
                    teacher_predict(t, &input, config.samples, rng::derive(seed, &[rng::tag("teacher"), i as u64]))
                })
                .collect::<Result<_>>()?,
            is_ancestor: chosen.iter().map(|(_, a)| *a).collect(),
        };
        let learn = !config.freeze_attention;
        let mut opt = AdamW::new(config.optimizer.clone());
        for step in 0..config.inner_epochs {
            let DistillGradient {
                loss,
                alpha,
                grads,
                d_attention: d_w,
            } = distillation_gradient(
                &student,
                &input,
                &teacher_set,
                &attention,
                DistillOptions {
                    use_attention: flags.att,
                    learn_attention: learn,
                    samples: config.samples,
                    seed: rng::derive(seed, &[rng::tag("inner"), step as u64]),
                },
            )?;
            if !loss.l.is_finite() {
                return Err(Error::Diverged { stage: "distill", step });
            }
            let weight_of = |ancestor: bool| {
                teacher_set
                    .is_ancestor
                    .iter()
                    .zip(&alpha)
                    .filter(|(a, _)| **a == ancestor)
                    .map(|(_, w)| *w)
                    .sum::<f64>()
            };
            steps.push(StepLog {
                step,
                l_dis: loss.l_dis,
                l_stu: loss.l_stu,
                l: loss.l,
                alpha_ancestor: Some(weight_of(true)),
                alpha_father: Some(weight_of(false)),
            });
            let train_w = learn && flags.att && teacher_set.dists.len() > 1;
            apply_update(
                &mut opt,
                &mut student,
                &grads,
                train_w.then_some((&mut attention, &d_w)),
                config,
            );
            if !student.is_finite() || !attention.is_finite() {
                return Err(Error::Diverged { stage: "distill", step });
            }
        }
    } else {
        let trace = nll_steps(
            &mut student,
            &input,
            config.inner_epochs,
            config,
            "fine-tune",
            rng::derive(seed, &[rng::tag("inner")]),
        )?;
        steps.extend(trace.into_iter().enumerate().map(|(step, l)| StepLog {
            step,
            l_dis: 0.0,
            l_stu: l,
            l,
            alpha_ancestor: None,
            alpha_father: None,
        }));
    }

    let snapshot = ModelSnapshot {
        params: student,
        attention,
        meta: SnapshotMeta {
            version: SNAPSHOT_VERSION,
            session: m,
            classes: plan.union_through(m),
            seed,
        },
    };
    let log = SessionLog {
        session: m,
        support_size: episode.support.len(),
        query_size: episode.query.len(),
        adapt,
        steps,
    };
    Ok((snapshot, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, select_exemplars, split_sessions, SyntheticConfig};
    use crate::encoder::EncoderConfig;

    fn small_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                hidden: 6,
                vocab_size: 256,
                max_len: 48,
                init_scale: 0.5,
            },
            log_sigma_bias: -1.0,
        }
    }

    fn setup() -> (Dataset, SessionPlan) {
        let ds = generate_synthetic(
            &SyntheticConfig {
                num_classes: 8,
                instances_per_class: 8,
                ..SyntheticConfig::default()
            },
            4,
        )
        .unwrap();
        let plan = split_sessions(&ds, 2, 4, 1).unwrap();
        (ds, plan)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            samples: 2,
            adapt_steps: 2,
            inner_epochs: 3,
            pretrain_episodes: 4,
            pretrain_way: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flag_nesting() {
        assert!(MethodFlags::FULL.validate().is_ok());
        assert!(MethodFlags::FINE_TUNE.validate().is_ok());
        let no_kd = MethodFlags { kd: false, ..MethodFlags::FULL };
        assert!(no_kd.validate().is_err());
        let att_only = MethodFlags { at: false, ..MethodFlags::FULL };
        assert!(att_only.validate().is_err());
        let cl_only = MethodFlags { pl: false, ..MethodFlags::FULL };
        assert!(cl_only.validate().is_err());
        let pl_without_att = MethodFlags { att: false, cl: false, ..MethodFlags::FULL };
        assert!(pl_without_att.validate().is_err());
    }

    #[test]
    fn prompted_support_keeps_labels_aligned() {
        let (ds, plan) = setup();
        let ep = plan.session_episode(&ds, 2).unwrap();
        let templates = PromptTemplates::default();
        let ctx = PromptContext {
            templates: &templates,
            stage: 3,
            session: 2,
            recent_window: 1,
            fill_gold: true,
        };
        let input = build_input(&ds, &plan, &ep, Some(&ctx), 64).unwrap();
        for (s, inst) in input.support.iter().zip(ep.support_instances(&ds)) {
            assert_eq!(s.tokens.len(), s.labels.len());
            assert_eq!(s.tokens.len() - s.prompt_len, inst.len());
            assert!(s.labels[inst.len()..].iter().all(Option::is_none));
            assert!(s.tokens.iter().any(|t| t == crate::prompt::NOW));
        }
        let bare = build_input(&ds, &plan, &ep, None, 64).unwrap();
        assert_eq!(bare.query, input.query);
        assert!(bare.support.iter().all(|s| s.prompt_len == 0));
    }

    #[test]
    fn sessions_run_and_are_deterministic() {
        let (ds, plan) = setup();
        let cfg = quick();
        let templates = PromptTemplates::default();
        let (t0, trace) = pretrain_base(&ds, &plan, &small_model(), &cfg, 5).unwrap();
        assert_eq!(trace.len(), 4);
        t0.validate().unwrap();
        assert_eq!(t0.attention.rows(), 2 * 8 + 1);

        let store = select_exemplars(&ds, &plan, 1, 1, 3).unwrap();
        let pair = TeacherPair { ancestor: &t0, father: None };
        let run = || train_session(&ds, &plan, 1, Some(&store), pair, MethodFlags::FULL, &templates, &cfg, 8).unwrap();
        let (s1, log1) = run();
        let (s1b, log1b) = run();
        assert_eq!(s1, s1b);
        assert_eq!(log1, log1b);
        assert_eq!(log1.steps.len(), 3);
        assert_eq!(log1.adapt.len(), 2);
        assert!(log1.steps.iter().all(|s| s.alpha_ancestor == Some(1.0) && s.alpha_father == Some(0.0)));
        assert_eq!(s1.meta.classes.len(), 6);

        let store2 = select_exemplars(&ds, &plan, 2, 1, 3).unwrap();
        let pair = TeacherPair { ancestor: &t0, father: Some(&s1) };
        let (s2, log2) =
            train_session(&ds, &plan, 2, Some(&store2), pair, MethodFlags::FULL, &templates, &cfg, 9).unwrap();
        s2.validate().unwrap();
        for s in &log2.steps {
            let (a, f) = (s.alpha_ancestor.unwrap(), s.alpha_father.unwrap());
            assert!((a + f - 1.0).abs() < 1e-12 && a > 0.0 && f > 0.0);
            assert_eq!(s.l, s.l_dis + s.l_stu);
        }
        assert_ne!(s2.attention, s1.attention);

        let fixed = MethodFlags { att: false, pl: false, cl: false, ..MethodFlags::FULL };
        let (s2c, log2c) = train_session(&ds, &plan, 2, Some(&store2), pair, fixed, &templates, &cfg, 9).unwrap();
        assert_eq!(s2c.attention, s1.attention);
        assert!(log2c.steps.iter().all(|s| s.alpha_ancestor == Some(0.5)));

        let (_, log_ft) =
            train_session(&ds, &plan, 2, Some(&store2), pair, MethodFlags::FINE_TUNE, &templates, &cfg, 9).unwrap();
        assert!(log_ft.steps.iter().all(|s| s.alpha_father.is_none() && s.l_dis == 0.0));
    }

    #[test]
    fn teachers_are_not_mutated() {
        let (ds, plan) = setup();
        let cfg = quick();
        let (t0, _) = pretrain_base(&ds, &plan, &small_model(), &cfg, 5).unwrap();
        let before = t0.clone();
        let store = select_exemplars(&ds, &plan, 1, 1, 3).unwrap();
        let pair = TeacherPair { ancestor: &t0, father: None };
        train_session(&ds, &plan, 1, Some(&store), pair, MethodFlags::FULL, &PromptTemplates::default(), &cfg, 2)
            .unwrap();
        assert_eq!(t0, before);
    }

    /// Total loss as a function of the student and `W`, recomputed from scratch.
    const OPTS: DistillOptions = DistillOptions {
        use_attention: true,
        learn_attention: true,
        samples: 2,
        seed: 17,
    };

    fn objective(student: &ModelParams, input: &EpisodeInput, teachers: &TeacherTargets, w: &Matrix) -> f64 {
        distillation_gradient(student, input, teachers, w, OPTS).unwrap().loss.l
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let (ds, plan) = setup();
        let model = small_model();
        let student = ModelParams::init(&model, 1).unwrap();
        let t_a = ModelParams::init(&model, 2).unwrap();
        let t_f = ModelParams::init(&model, 3).unwrap();
        let ep = plan.session_episode(&ds, 1).unwrap();
        let input = build_input(&ds, &plan, &ep, None, 48).unwrap();
        let snap = |p: ModelParams| ModelSnapshot {
            params: p,
            attention: Matrix::identity(17),
            meta: SnapshotMeta {
                version: SNAPSHOT_VERSION,
                session: 0,
                classes: Vec::new(),
                seed: 0,
            },
        };
        let teachers = TeacherTargets {
            dists: vec![
                teacher_predict(&snap(t_a), &input, 2, 1).unwrap(),
                teacher_predict(&snap(t_f), &input, 2, 2).unwrap(),
            ],
            is_ancestor: vec![true, false],
        };
        let mut rng = rng::stream(4, &[]);
        let w = Matrix::from_vec(
            17,
            17,
            (0..289).map(|_| rand::Rng::random_range(&mut rng, -0.3..0.3)).collect(),
        );
        let DistillGradient {
            grads, d_attention: d_w, ..
        } = distillation_gradient(&student, &input, &teachers, &w, OPTS).unwrap();
        let eps = 1e-6;
        let close = |fd: f64, g: f64| (fd - g).abs() <= 1e-4 * fd.abs().max(1e-2);

        for i in 0..5 {
            for j in 0..5 {
                let mut a = w.clone();
                a[(i, j)] += eps;
                let mut b = w.clone();
                b[(i, j)] -= eps;
                let fd = (objective(&student, &input, &teachers, &a) - objective(&student, &input, &teachers, &b))
                    / (2.0 * eps);
                assert!(close(fd, d_w[(i, j)]), "W[{i},{j}]: {fd} vs {}", d_w[(i, j)]);
            }
        }
        assert!(d_w.as_slice().iter().any(|v| v.abs() > 1e-6));

        let mut checked = 0;
        for t in 0..2 {
            let g = grads.encoder.tensors()[t];
            let nonzero: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).step_by(7).take(12).collect();
            for i in nonzero {
                let mut a = student.clone();
                a.encoder.tensors_mut()[t][i] += eps;
                let mut b = student.clone();
                b.encoder.tensors_mut()[t][i] -= eps;
                let fd = (objective(&a, &input, &teachers, &w) - objective(&b, &input, &teachers, &w)) / (2.0 * eps);
                assert!(close(fd, g[i]), "encoder {t}[{i}]: {fd} vs {}", g[i]);
                checked += 1;
            }
        }
        for t in 0..5 {
            for i in 0..grads.transition.tensors()[t].len().min(6) {
                let g = grads.transition.tensors()[t][i];
                let mut a = student.clone();
                a.transition.tensors_mut()[t][i] += eps;
                let mut b = student.clone();
                b.transition.tensors_mut()[t][i] -= eps;
                let fd = (objective(&a, &input, &teachers, &w) - objective(&b, &input, &teachers, &w)) / (2.0 * eps);
                assert!(close(fd, g), "transition {t}[{i}]: {fd} vs {g}");
            }
        }
        assert!(checked >= 12);
    }
}
