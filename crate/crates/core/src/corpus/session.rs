use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::episode::{sample_episode, Episode};
use super::label::ClassId;
use crate::{rng, Error, Result};

/// Class-to-session assignment for one incremental run: `sessions[0]` is the
/// base class set D(0), `sessions[m]` the `N` classes of few-shot set D(m).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub way: usize,
    pub base_count: usize,
    pub shot: usize,
    pub query_size: usize,
    pub seed: u64,
    pub sessions: Vec<Vec<ClassId>>,
}

/// Draws `base_count` random base classes and cuts the rest into `way`-sized
/// increments. Episode shape defaults to 1-shot, 1 query per class.
pub fn split_sessions(
    dataset: &Dataset,
    way: usize,
    base_count: usize,
    seed: u64,
) -> Result<SessionPlan> {
    let total = dataset.classes().len();
    if way == 0 {
        return Err(Error::InvalidConfig("way must be positive".into()));
    }
    if base_count >= total {
        return Err(Error::UnevenSplit {
            base: base_count,
            remaining: total.saturating_sub(base_count),
            way,
            leftover: 0,
        });
    }
    let remaining = total - base_count;
    if !remaining.is_multiple_of(way) {
        return Err(Error::UnevenSplit {
            base: base_count,
            remaining,
            way,
            leftover: remaining % way,
        });
    }
    let mut ids = dataset.class_ids();
    ids.shuffle(&mut rng::stream(seed, &[rng::tag("split")]));
    let mut sessions = Vec::with_capacity(1 + remaining / way);
    let (base, rest) = ids.split_at(base_count);
    let mut base = base.to_vec();
    base.sort_unstable();
    sessions.push(base);
    for chunk in rest.chunks(way) {
        let mut c = chunk.to_vec();
        c.sort_unstable();
        sessions.push(c);
    }
    Ok(SessionPlan {
        way,
        base_count,
        shot: 1,
        query_size: 1,
        seed,
        sessions,
    })
}

impl SessionPlan {
    pub fn with_episode_shape(mut self, shot: usize, query_size: usize) -> Self {
        self.shot = shot;
        self.query_size = query_size;
        self
    }

    /// Number of few-shot sessions `M`.
    pub fn num_increments(&self) -> usize {
        self.sessions.len().saturating_sub(1)
    }

    pub fn base(&self) -> &[ClassId] {
        &self.sessions[0]
    }

    pub fn classes_of(&self, m: usize) -> &[ClassId] {
        &self.sessions[m]
    }

    /// Classes of D(0) ∪ … ∪ D(m), in session order.
    pub fn union_through(&self, m: usize) -> Vec<ClassId> {
        self.sessions[..=m].iter().flatten().copied().collect()
    }

    pub fn session_of(&self, class: ClassId) -> Option<usize> {
        self.sessions.iter().position(|s| s.contains(&class))
    }

    /// The single training episode of session `m` (for `m = 0`, one episode
    /// over all base classes). Fixed by the plan seed.
    pub fn session_episode(&self, dataset: &Dataset, m: usize) -> Result<Episode> {
        let classes = self.classes_of(m);
        sample_episode(
            dataset,
            classes,
            classes.len(),
            self.shot,
            self.query_size,
            &[],
            rng::derive(self.seed, &[rng::tag("session-episode"), m as u64]),
        )
    }
}
