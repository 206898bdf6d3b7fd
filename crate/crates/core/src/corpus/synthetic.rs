use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, EventClass, Instance};
use super::label::{ClassId, Tag};
use crate::{rng, Error, Result};

/// Parameters of the synthetic corpus. Each class owns two trigger lexemes
/// planted into templated sentences over a shared filler vocabulary, so the
/// class of a sentence is recoverable from its trigger alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    /// Size of the shared filler vocabulary.
    pub filler_vocab: usize,
    /// Probability that a trigger is followed by a particle, giving a
    /// two-token `B I` span.
    pub multiword_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            instances_per_class: 40,
            filler_vocab: 120,
            multiword_prob: 0.15,
        }
    }
}

// `T` marks the trigger slot, `F` a filler draw.
const TEMPLATES: &[&str] = &[
    "the F F T the F of F",
    "F was T in the F",
    "a F F T at F F F",
    "F F T F",
    "after the F , F T a F",
    "the F T F F in F",
    "F said F T the F of the F",
    "T F F at the F",
];

const PARTICLES: &[&str] = &["up", "off", "out", "down"];

pub fn trigger_lexemes(class: usize) -> [String; 2] {
    [format!("trg{class:02}a"), format!("trg{class:02}b")]
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if config.num_classes == 0 || config.instances_per_class == 0 || config.filler_vocab == 0 {
        return Err(Error::InvalidConfig(String::from(
            "synthetic corpus needs positive class, instance and vocabulary counts",
        )));
    }
    if !(0.0..=1.0).contains(&config.multiword_prob) {
        return Err(Error::InvalidConfig(String::from(
            "multiword_prob must lie in [0, 1]",
        )));
    }
    let mut rng = rng::stream(seed, &[rng::tag("synthetic")]);
    let fillers: Vec<String> = (0..config.filler_vocab).map(|i| format!("w{i}")).collect();
    let classes: Vec<EventClass> = (0..config.num_classes)
        .map(|k| EventClass {
            id: ClassId(k as u32),
            name: format!("Group{}.Event{k:02}", k % 4),
        })
        .collect();
    let mut instances = Vec::with_capacity(config.num_classes * config.instances_per_class);
    for (k, class) in classes.iter().enumerate() {
        let lexemes = trigger_lexemes(k);
        for _ in 0..config.instances_per_class {
            let template = TEMPLATES.choose(&mut rng).expect("templates");
            let lexeme = lexemes.choose(&mut rng).expect("lexemes").clone();
            let multiword = rng.random_bool(config.multiword_prob);
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for slot in template.split_whitespace() {
                match slot {
                    "T" => {
                        tokens.push(lexeme.clone());
                        tags.push(Tag::B(class.id));
                        if multiword {
                            let particle = PARTICLES.choose(&mut rng).expect("particles");
                            tokens.push(String::from(*particle));
                            tags.push(Tag::I(class.id));
                        }
                    }
                    "F" => {
                        tokens.push(fillers.choose(&mut rng).expect("fillers").clone());
                        tags.push(Tag::O);
                    }
                    word => {
                        tokens.push(String::from(word));
                        tags.push(Tag::O);
                    }
                }
            }
            instances.push(Instance {
                tokens,
                tags,
                doc_id: None,
            });
        }
    }
    Dataset::new(classes, instances)
}
