//! Span extraction from BIO sequences and exact-match micro F1.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, Tag};

/// Half-open token range `[start, end)` tagged with a class. A span opened by
/// a stray `I-` tag (no preceding `B-`/`I-` of its class) is kept with
/// `well_formed = false`: it counts as a prediction and never matches gold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub class: ClassId,
    pub well_formed: bool,
}

pub fn extract_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (t, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::I(c) if open.is_some_and(|s| s.class == c) => {
                if let Some(s) = open.as_mut() {
                    s.end = t + 1;
                }
            }
            _ => {
                spans.extend(open.take());
                open = match tag {
                    Tag::O => None,
                    Tag::B(c) => Some(Span { start: t, end: t + 1, class: c, well_formed: true }),
                    Tag::I(c) => Some(Span { start: t, end: t + 1, class: c, well_formed: false }),
                };
            }
        }
    }
    spans.extend(open);
    spans
}

/// Running true-positive / predicted / gold span counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn of(predicted: &[Span], gold: &[Span]) -> Self {
        let mut remaining: Vec<&Span> = gold.iter().collect();
        let mut correct = 0;
        for p in predicted.iter().filter(|p| p.well_formed) {
            if let Some(i) = remaining.iter().position(|g| *g == p) {
                remaining.swap_remove(i);
                correct += 1;
            }
        }
        Self {
            correct,
            predicted: predicted.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, other: Self) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    /// `2PR / (P + R)`, zero when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn micro_f1(predicted: &[Span], gold: &[Span]) -> f64 {
    SpanCounts::of(predicted, gold).f1()
}
