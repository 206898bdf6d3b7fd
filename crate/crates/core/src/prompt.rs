//! Cloze prompts appended to support instances, and the three-stage
//! curriculum that decides which template a session uses.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, LabelSpace, Tag};
use crate::encoder::MASK_TOKEN;
use crate::{Error, Result};

pub const MASK_STAR: &str = "[mask*]";
pub const BEFORE: &str = "before";
pub const RECENTLY: &str = "recently";
pub const NOW: &str = "now";

/// One cloze template. Patterns are whitespace-separated tokens holding two
/// `[mask]` slots (event class, then trigger words) and, from stage 2 on,
/// one `[mask*]` slot for when the class was learned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub stage: u8,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn new(stage: u8, pattern: &str) -> Result<Self> {
        let t = Self {
            stage,
            pattern: pattern.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self.tokens().filter(|t| *t == MASK_TOKEN).count();
        let stars = self.tokens().filter(|t| *t == MASK_STAR).count();
        let want_stars = usize::from(self.stage >= 2);
        if !(1..=3).contains(&self.stage) || masks != 2 || stars != want_stars {
            return Err(Error::InvalidConfig(alloc::format!(
                "stage {} template needs two {MASK_TOKEN} and {want_stars} {MASK_STAR} slots",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.pattern.split_whitespace()
    }

    /// Prompt length with every slot left as a single mask token.
    pub fn bare_len(&self) -> usize {
        self.tokens().count()
    }
}

/// Versioned template set, one template per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: u32,
    pub stages: Vec<PromptTemplate>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let first = "This is a [mask] event . [SEP] Its trigger words are [mask] .";
        let later =
            "This is a [mask] event , which is learned [mask*] . [SEP] Its trigger words are [mask] .";
        Self {
            version: 1,
            stages: alloc::vec![
                PromptTemplate::new(1, first).expect("stage 1"),
                PromptTemplate::new(2, later).expect("stage 2"),
                PromptTemplate::new(3, later).expect("stage 3"),
            ],
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<()> {
        for stage in 1..=3u8 {
            let n = self.stages.iter().filter(|t| t.stage == stage).count();
            if n != 1 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "expected exactly one template for stage {stage}, found {n}"
                )));
            }
        }
        self.stages.iter().try_for_each(PromptTemplate::validate)
    }

    pub fn stage(&self, stage: u8) -> &PromptTemplate {
        self.stages
            .iter()
            .find(|t| t.stage == stage)
            .expect("validated template set")
    }
}

/// Candidate verbalizations of `[mask*]` at `stage`.
pub fn mask_star_candidates(stage: u8) -> &'static [&'static str] {
    match stage {
        2 => &[BEFORE, NOW],
        3 => &[BEFORE, RECENTLY, NOW],
        _ => &[],
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Curriculum stage of session `m` out of `total` few-shot sessions:
/// stage 1 up to ⌈M/3⌉, stage 2 up to ⌈2M/3⌉, stage 3 after.
pub fn stage_of_session(m: usize, total: usize) -> Result<u8> {
    if m == 0 || m > total {
        return Err(Error::SessionOutOfRange { m, total });
    }
    Ok(if m <= ceil_div(total, 3) {
        1
    } else if m <= ceil_div(2 * total, 3) {
        2
    } else {
        3
    })
}

/// `[mask*]` word for a class learned in session `learned_at`, seen in
/// session `current`. `None` at stage 1, which has no such slot.
pub fn mask_star_value(
    learned_at: usize,
    current: usize,
    stage: u8,
    recent_window: usize,
) -> Option<&'static str> {
    match stage {
        2 if learned_at == current => Some(NOW),
        2 => Some(BEFORE),
        3 if learned_at == current => Some(NOW),
        3 if current.saturating_sub(learned_at) <= recent_window => Some(RECENTLY),
        3 => Some(BEFORE),
        _ => None,
    }
}

/// Slot values; `None` leaves the slot as a mask token (inference).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptFills {
    pub class_name: Option<String>,
    pub triggers: Option<Vec<String>>,
    pub mask_star: Option<String>,
}

impl PromptFills {
    /// Gold fills for a support instance: the name and trigger words of its
    /// first labelled class.
    pub fn gold(instance: &Instance, space: &LabelSpace, class_name: &dyn Fn(crate::corpus::ClassId) -> String) -> Self {
        let class = instance
            .tags
            .iter()
            .filter_map(|t| t.class())
            .find(|c| space.contains(*c));
        let Some(class) = class else {
            return Self::default();
        };
        let triggers = instance
            .tokens
            .iter()
            .zip(&instance.tags)
            .filter(|(_, t)| matches!(t, Tag::B(c) | Tag::I(c) if *c == class))
            .map(|(w, _)| w.clone())
            .collect();
        Self {
            class_name: Some(class_name(class)),
            triggers: Some(triggers),
            mask_star: None,
        }
    }
}

/// Token sequence with an appended prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedSequence {
    pub tokens: Vec<String>,
    pub prompt_len: usize,
}

impl PromptedSequence {
    /// Per-token labels: the instance labels, then `None` for every prompt
    /// token so prompts never feed prototypes, losses or scoring.
    pub fn extend_labels(&self, labels: &[usize]) -> Vec<Option<usize>> {
        debug_assert_eq!(labels.len() + self.prompt_len, self.tokens.len());
        labels
            .iter()
            .map(|&l| Some(l))
            .chain(core::iter::repeat_n(None, self.prompt_len))
            .collect()
    }

    pub fn strip(&self) -> &[String] {
        &self.tokens[..self.tokens.len() - self.prompt_len]
    }
}

pub fn assemble_prompt(
    tokens: &[String],
    template: &PromptTemplate,
    fills: &PromptFills,
    max_len: usize,
) -> Result<PromptedSequence> {
    let mut out: Vec<String> = tokens.to_vec();
    let mut masks_seen = 0;
    for slot in template.tokens() {
        match slot {
            MASK_TOKEN => {
                let fill: Option<Vec<String>> = if masks_seen == 0 {
                    fills
                        .class_name
                        .as_ref()
                        .map(|n| n.split_whitespace().map(String::from).collect())
                } else {
                    fills.triggers.clone()
                };
                masks_seen += 1;
                match fill {
                    Some(words) if !words.is_empty() => out.extend(words),
                    _ => out.push(String::from(MASK_TOKEN)),
                }
            }
            MASK_STAR => out.push(
                fills
                    .mask_star
                    .clone()
                    .unwrap_or_else(|| String::from(MASK_TOKEN)),
            ),
            word => out.push(String::from(word)),
        }
    }
    if out.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: out.len(),
            max: max_len,
        });
    }
    Ok(PromptedSequence {
        prompt_len: out.len() - tokens.len(),
        tokens: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn stage_examples() {
        assert_eq!(stage_of_session(4, 10).unwrap(), 1);
        assert_eq!(stage_of_session(5, 10).unwrap(), 2);
        assert_eq!(stage_of_session(7, 10).unwrap(), 2);
        assert_eq!(stage_of_session(8, 10).unwrap(), 3);
        assert_eq!(stage_of_session(5, 5).unwrap(), 3);
        assert!(stage_of_session(0, 5).is_err());
        assert!(stage_of_session(6, 5).is_err());
    }

    #[test]
    fn stages_are_monotone_without_gaps() {
        for total in 1..=30 {
            let stages: Vec<u8> = (1..=total).map(|m| stage_of_session(m, total).unwrap()).collect();
            assert_eq!(stages[0], 1);
            assert!(stages.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        }
    }

    #[test]
    fn mask_star_rules() {
        assert_eq!(mask_star_value(0, 8, 3, 2), Some(BEFORE));
        assert_eq!(mask_star_value(0, 8, 2, 2), Some(BEFORE));
        assert_eq!(mask_star_value(8, 8, 3, 2), Some(NOW));
        assert_eq!(mask_star_value(5, 5, 2, 2), Some(NOW));
        assert_eq!(mask_star_value(7, 8, 3, 2), Some(RECENTLY));
        assert_eq!(mask_star_value(6, 8, 3, 2), Some(RECENTLY));
        assert_eq!(mask_star_value(5, 8, 3, 2), Some(BEFORE));
        assert_eq!(mask_star_value(7, 8, 1, 2), None);
        for stage in 2..=3 {
            for l in 0..=8 {
                let v = mask_star_value(l, 8, stage, 2).unwrap();
                assert!(mask_star_candidates(stage).contains(&v));
            }
        }
    }

    #[test]
    fn templates_follow_the_slot_rules() {
        let t = PromptTemplates::default();
        t.validate().unwrap();
        assert!(!t.stage(1).pattern.contains(MASK_STAR));
        assert!(t.stage(2).pattern.contains("which is learned [mask*]"));
        assert!(PromptTemplate::new(1, "a [mask] b [mask*] [mask]").is_err());
        assert!(PromptTemplate::new(2, "a [mask] b [mask]").is_err());
    }

    #[test]
    fn assemble_and_strip() {
        let t = PromptTemplates::default();
        let inst = toks(&["Tom", "was", "injured"]);
        let bare = assemble_prompt(&inst, t.stage(1), &PromptFills::default(), 128).unwrap();
        assert_eq!(bare.tokens.len(), 3 + t.stage(1).bare_len());
        assert_eq!(bare.prompt_len, 13);
        assert_eq!(bare.strip(), inst.as_slice());
        let fills = PromptFills {
            class_name: Some("Life Injure".into()),
            triggers: Some(toks(&["injured"])),
            mask_star: Some(NOW.into()),
        };
        let full = assemble_prompt(&inst, t.stage(2), &fills, 128).unwrap();
        assert_eq!(
            full.tokens[3..].join(" "),
            "This is a Life Injure event , which is learned now . [SEP] Its trigger words are injured ."
        );
        assert_eq!(full.strip(), inst.as_slice());
        assert_eq!(
            full.extend_labels(&[0, 0, 1])[..4],
            [Some(0), Some(0), Some(1), None]
        );
        assert!(matches!(
            assemble_prompt(&inst, t.stage(1), &fills, 10),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
