use alloc::collections::BTreeSet;
use alloc::string::ToString;
use alloc::vec::Vec;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::episode::Episode;
use super::label::ClassId;
use super::session::SessionPlan;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub class: ClassId,
    pub instance: usize,
    /// Session in which `class` was learned.
    pub learned_at: usize,
}

/// Retained instances replayed in session `session`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub session: usize,
    pub per_base: usize,
    pub entries: Vec<Exemplar>,
}

impl ExemplarStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn instances(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.instance)
    }
}

/// Exemplars for session `m ≥ 1`: `per_base` random instances of every base
/// class plus every support instance of D(1) … D(m−1).
pub fn select_exemplars(
    dataset: &Dataset,
    plan: &SessionPlan,
    m: usize,
    per_base: usize,
    seed: u64,
) -> Result<ExemplarStore> {
    let total = plan.num_increments();
    if m == 0 || m > total {
        return Err(Error::SessionOutOfRange { m, total });
    }
    // Base exemplars are drawn once per seed and kept across sessions.
    let mut rng = rng::stream(seed, &[rng::tag("exemplars")]);
    let mut entries = Vec::new();
    for &class in plan.base() {
        let pool = dataset.instances_of(class);
        if per_base > pool.len() {
            return Err(Error::InsufficientInstances {
                class: dataset.class_name(class).to_string(),
                needed: per_base,
                available: pool.len(),
            });
        }
        let mut picked = index::sample(&mut rng, pool.len(), per_base).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|i| Exemplar {
            class,
            instance: pool[i],
            learned_at: 0,
        }));
    }
    for session in 1..m {
        let episode = plan.session_episode(dataset, session)?;
        entries.extend(episode.support.iter().enumerate().map(|(j, &instance)| Exemplar {
            class: episode.classes[j / episode.shot],
            instance,
            learned_at: session,
        }));
    }
    Ok(ExemplarStore {
        session: m,
        per_base,
        entries,
    })
}

/// Replay-augmented episode of session `m`: the support set S′ is the
/// exemplar store plus the new support of D(m); the query set Q′ holds
/// the query of D(m) plus up to `query_size` exemplars of every old class, so
/// no old-class data beyond the store is ever seen.
pub fn augment_session(
    dataset: &Dataset,
    plan: &SessionPlan,
    m: usize,
    store: Option<&ExemplarStore>,
    seed: u64,
) -> Result<Episode> {
    let current = plan.session_episode(dataset, m)?;
    let Some(store) = store.filter(|_| m > 0) else {
        return Ok(current);
    };
    if store.session != m {
        return Err(Error::InvalidConfig("exemplar store built for another session".into()));
    }
    let stored = store.classes();
    let classes: Vec<ClassId> = plan
        .union_through(m)
        .into_iter()
        .filter(|c| stored.contains(c) || current.classes.contains(c))
        .collect();
    let mut support: Vec<usize> = store.instances().collect();
    support.extend_from_slice(&current.support);

    let mut rng = rng::stream(seed, &[rng::tag("replay-query"), m as u64]);
    let u = plan.query_size;
    let mut query = Vec::with_capacity(classes.len() * u);
    for &class in &classes {
        if let Some(j) = current.classes.iter().position(|&c| c == class) {
            query.extend_from_slice(&current.query[j * u..(j + 1) * u]);
            continue;
        }
        // Old classes are known only through their exemplars.
        let mut pool: Vec<usize> = store
            .entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.instance)
            .collect();
        let take = u.min(pool.len());
        let (picked, _) = pool.partial_shuffle(&mut rng, take);
        picked.sort_unstable();
        query.extend_from_slice(picked);
    }
    let episode = Episode {
        classes,
        shot: plan.shot,
        query_size: u,
        support,
        query,
    };
    episode.check_coverage(dataset)?;
    Ok(episode)
}
