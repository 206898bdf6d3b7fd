use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use super::label::{ClassId, Tag};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventClass {
    pub id: ClassId,
    pub name: String,
}

/// One sentence with aligned BIO tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

impl Instance {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        let inst = Self {
            tokens,
            tags,
            doc_id: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length match and BIO well-formedness: every `I-c` follows `B-c` or `I-c`.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.tags.len() {
            return Err(Error::LengthMismatch {
                tokens: self.tokens.len(),
                labels: self.tags.len(),
            });
        }
        let mut prev = Tag::O;
        for (position, &tag) in self.tags.iter().enumerate() {
            if let Tag::I(c) = tag {
                if prev.class() != Some(c) {
                    return Err(Error::InvalidBio {
                        position,
                        label: c.to_string(),
                    });
                }
            }
            prev = tag;
        }
        Ok(())
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.tags.iter().filter_map(|t| t.class()).collect()
    }
}

/// A validated collection of instances with a per-class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    classes: Vec<EventClass>,
    instances: Vec<Instance>,
    #[serde(skip)]
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(classes: Vec<EventClass>, instances: Vec<Instance>) -> Result<Self> {
        let mut seen_ids = BTreeSet::new();
        let mut seen_names = BTreeSet::new();
        for c in &classes {
            if !seen_ids.insert(c.id) || !seen_names.insert(c.name.as_str()) {
                return Err(Error::DuplicateClass(c.name.clone()));
            }
        }
        let mut ds = Self {
            classes,
            instances,
            by_class: BTreeMap::new(),
        };
        for inst in &ds.instances {
            inst.validate()?;
            for c in inst.class_ids() {
                if !seen_ids.contains(&c) {
                    return Err(Error::UnknownClass(c.to_string()));
                }
            }
        }
        ds.reindex();
        if let Some(empty) = ds.classes.iter().find(|c| ds.instances_of(c.id).is_empty()) {
            return Err(Error::InsufficientInstances {
                class: empty.name.clone(),
                needed: 1,
                available: 0,
            });
        }
        Ok(ds)
    }

    /// Builds a dataset from raw string records. Class ids follow the sorted
    /// order of class names. Errors carry the zero-based record index.
    pub fn from_records<I>(records: I) -> core::result::Result<Self, (usize, Error)>
    where
        I: IntoIterator<Item = (Vec<String>, Vec<String>, Option<String>)>,
    {
        let records: Vec<_> = records.into_iter().collect();
        let mut names = BTreeSet::new();
        for (line, (tokens, labels, _)) in records.iter().enumerate() {
            if tokens.len() != labels.len() {
                return Err((
                    line,
                    Error::LengthMismatch {
                        tokens: tokens.len(),
                        labels: labels.len(),
                    },
                ));
            }
            for (position, raw) in labels.iter().enumerate() {
                match Tag::split(raw) {
                    Some((_, Some(name))) => {
                        names.insert(name.to_string());
                    }
                    Some((_, None)) => {}
                    None => {
                        return Err((
                            line,
                            Error::InvalidLabel {
                                position,
                                label: raw.clone(),
                            },
                        ))
                    }
                }
            }
        }
        let classes: Vec<EventClass> = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| EventClass {
                id: ClassId(i as u32),
                name,
            })
            .collect();
        let lookup: BTreeMap<&str, ClassId> =
            classes.iter().map(|c| (c.name.as_str(), c.id)).collect();
        let mut instances = Vec::with_capacity(records.len());
        for (line, (tokens, labels, doc_id)) in records.iter().enumerate() {
            let tags = labels
                .iter()
                .map(|raw| match Tag::split(raw) {
                    Some(('B', Some(n))) => Tag::B(lookup[n]),
                    Some(('I', Some(n))) => Tag::I(lookup[n]),
                    _ => Tag::O,
                })
                .collect();
            let inst = Instance {
                tokens: tokens.clone(),
                tags,
                doc_id: doc_id.clone(),
            };
            if let Err(e) = inst.validate() {
                let e = match e {
                    Error::InvalidBio { position, .. } => Error::InvalidBio {
                        position,
                        label: labels[position].clone(),
                    },
                    other => other,
                };
                return Err((line, e));
            }
            instances.push(inst);
        }
        Self::new(classes, instances).map_err(|e| (records.len(), e))
    }

    /// Restores the per-class index after deserialization.
    pub fn reindex(&mut self) {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> =
            self.classes.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, inst) in self.instances.iter().enumerate() {
            for c in inst.class_ids() {
                by_class.entry(c).or_default().push(i);
            }
        }
        self.by_class = by_class;
    }

    pub fn classes(&self) -> &[EventClass] {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, index: usize) -> &Instance {
        &self.instances[index]
    }

    pub fn instances_of(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn class(&self, id: ClassId) -> Option<&EventClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        self.class(id).map_or("?", |c| c.name.as_str())
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Splits instances into (train, test). Each instance follows its first
    /// class; per class, `⌈fraction·n⌉` of them (at least one, and at most
    /// `n − 1`) go to the test side. Both sides keep every class and id.
    pub fn partition(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut primary: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, inst) in self.instances.iter().enumerate() {
            if let Some(c) = inst.tags.iter().find_map(|t| t.class()) {
                primary.entry(c).or_default().push(i);
            }
        }
        let mut test = BTreeSet::new();
        let mut rng = rng::stream(seed, &[rng::tag("partition")]);
        for (_, mut pool) in primary {
            let n = pool.len();
            let take = (libm::ceil(test_fraction * n as f64) as usize).clamp(1, n.max(1)).min(n - 1);
            let (picked, _) = pool.partial_shuffle(&mut rng, take);
            test.extend(picked.iter().copied());
        }
        let side = |want: bool| {
            let instances = self
                .instances
                .iter()
                .enumerate()
                .filter(|(i, _)| test.contains(i) == want)
                .map(|(_, inst)| inst.clone())
                .collect();
            Self::new(self.classes.clone(), instances)
        };
        Ok((side(false)?, side(true)?))
    }

    /// BIO strings for `inst`, the inverse of [`Dataset::from_records`].
    pub fn label_strings(&self, inst: &Instance) -> Vec<String> {
        inst.tags
            .iter()
            .map(|t| match *t {
                Tag::O => String::from("O"),
                Tag::B(c) => format!("B-{}", self.class_name(c)),
                Tag::I(c) => format!("I-{}", self.class_name(c)),
            })
            .collect()
    }
}
