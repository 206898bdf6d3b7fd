use alloc::collections::BTreeSet;
use alloc::string::ToString;
use alloc::vec::Vec;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Instance};
use super::label::{ClassId, LabelSpace};
use crate::{rng, Error, Result};

/// An N-way K-shot episode. Instances are referenced by dataset index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<ClassId>,
    pub shot: usize,
    pub query_size: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace::new(&self.classes).expect("episode classes are distinct")
    }

    pub fn support_instances<'a>(&'a self, ds: &'a Dataset) -> impl Iterator<Item = &'a Instance> {
        self.support.iter().map(move |&i| ds.instance(i))
    }

    pub fn query_instances<'a>(&'a self, ds: &'a Dataset) -> impl Iterator<Item = &'a Instance> {
        self.query.iter().map(move |&i| ds.instance(i))
    }

    /// Every episode class that appears in the query must also appear in the
    /// support set.
    pub fn check_coverage(&self, ds: &Dataset) -> Result<()> {
        let supported: BTreeSet<ClassId> = self
            .support_instances(ds)
            .flat_map(Instance::class_ids)
            .collect();
        for inst in self.query_instances(ds) {
            for c in inst.class_ids() {
                if self.classes.contains(&c) && !supported.contains(&c) {
                    return Err(Error::MissingSupportClass(ds.class_name(c).to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Samples `way` classes from `pool` (all of them, in pool order, when
/// `way == pool.len()`), then `shot` support and `query_size` query instances
/// per class. Instances listed in `exclude` are never drawn, and no instance
/// is drawn twice.
pub fn sample_episode(
    dataset: &Dataset,
    pool: &[ClassId],
    way: usize,
    shot: usize,
    query_size: usize,
    exclude: &[usize],
    seed: u64,
) -> Result<Episode> {
    if way > pool.len() {
        return Err(Error::InvalidConfig("way exceeds the class pool".to_string()));
    }
    let mut rng = rng::stream(seed, &[rng::tag("episode")]);
    let classes: Vec<ClassId> = if way == pool.len() {
        pool.to_vec()
    } else {
        let mut picked = index::sample(&mut rng, pool.len(), way).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i]).collect()
    };
    let mut used: BTreeSet<usize> = exclude.iter().copied().collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * query_size);
    let need = shot + query_size;
    for &class in &classes {
        let mut candidates: Vec<usize> = dataset
            .instances_of(class)
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .collect();
        if candidates.len() < need {
            return Err(Error::InsufficientInstances {
                class: dataset.class_name(class).to_string(),
                needed: need,
                available: candidates.len(),
            });
        }
        let (picked, _) = candidates.partial_shuffle(&mut rng, need);
        support.extend_from_slice(&picked[..shot]);
        query.extend_from_slice(&picked[shot..]);
        used.extend(picked.iter().copied());
    }
    Ok(Episode {
        classes,
        shot,
        query_size,
        support,
        query,
    })
}
