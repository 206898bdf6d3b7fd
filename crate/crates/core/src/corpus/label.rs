use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl core::fmt::Display for ClassId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One BIO token tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    O,
    B(ClassId),
    I(ClassId),
}

impl Tag {
    pub fn class(self) -> Option<ClassId> {
        match self {
            Tag::O => None,
            Tag::B(c) | Tag::I(c) => Some(c),
        }
    }

    /// Splits `"O" | "B-<name>" | "I-<name>"` into a prefix and a class name.
    pub fn split(raw: &str) -> Option<(char, Option<&str>)> {
        if raw == "O" {
            return Some(('O', None));
        }
        let (prefix, name) = raw.split_once('-')?;
        match prefix {
            "B" | "I" if !name.is_empty() => Some((prefix.chars().next()?, Some(name))),
            _ => None,
        }
    }
}

/// Ordered label set `[O, B-c₁ … B-cₙ, I-c₁ … I-cₙ]` for a list of classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<ClassId>,
    #[serde(skip)]
    index: BTreeMap<ClassId, usize>,
}

impl LabelSpace {
    pub fn new(classes: &[ClassId]) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::DuplicateClass(c.to_string()));
            }
        }
        Ok(Self {
            classes: classes.to_vec(),
            index,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `2N + 1`
    pub fn len(&self) -> usize {
        2 * self.classes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.index.contains_key(&class)
    }

    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    /// Index of `tag`, or `None` when its class is outside this space.
    pub fn index_of(&self, tag: Tag) -> Option<usize> {
        let n = self.classes.len();
        match tag {
            Tag::O => Some(0),
            Tag::B(c) => self.position(c).map(|i| 1 + i),
            Tag::I(c) => self.position(c).map(|i| 1 + n + i),
        }
    }

    pub fn tag(&self, index: usize) -> Tag {
        let n = self.classes.len();
        match index {
            0 => Tag::O,
            i if i <= n => Tag::B(self.classes[i - 1]),
            i => Tag::I(self.classes[i - 1 - n]),
        }
    }

    /// Label indices for a tag sequence. Tags of classes outside the space
    /// become `O`: an instance sampled for one class may mention others.
    pub fn encode(&self, tags: &[Tag]) -> Vec<usize> {
        tags.iter().map(|&t| self.index_of(t).unwrap_or(0)).collect()
    }

    pub fn decode(&self, labels: &[usize]) -> Vec<Tag> {
        labels.iter().map(|&l| self.tag(l)).collect()
    }

    /// Index of the `B-` label sharing a class with `I-` label `index`.
    pub fn begin_of(&self, index: usize) -> Option<usize> {
        let n = self.classes.len();
        (index > n).then(|| index - n)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
    }
}

/// Label strings for `classes` (given as `(id, name)` pairs).
pub fn label_space(classes: &[(ClassId, &str)]) -> Result<Vec<String>> {
    let ids: Vec<ClassId> = classes.iter().map(|(c, _)| *c).collect();
    LabelSpace::new(&ids)?;
    let mut out = Vec::with_capacity(2 * classes.len() + 1);
    out.push(String::from("O"));
    out.extend(classes.iter().map(|(_, n)| format!("B-{n}")));
    out.extend(classes.iter().map(|(_, n)| format!("I-{n}")));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(n: u32) -> Vec<ClassId> {
        (0..n).map(ClassId).collect()
    }

    #[test]
    fn label_count_is_two_n_plus_one() {
        assert_eq!(LabelSpace::new(&ids(5)).unwrap().len(), 11);
        assert_eq!(LabelSpace::new(&ids(10)).unwrap().len(), 21);
        let empty = LabelSpace::new(&[]).unwrap();
        assert_eq!(empty.len(), 1);
        assert_eq!(empty.tag(0), Tag::O);
    }

    #[test]
    fn label_strings_in_fixed_order() {
        let labels = label_space(&[(ClassId(3), "Attack"), (ClassId(1), "Injure")]).unwrap();
        assert_eq!(
            labels,
            vec!["O", "B-Attack", "B-Injure", "I-Attack", "I-Injure"]
        );
        assert_eq!(label_space(&[]).unwrap(), vec!["O"]);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            LabelSpace::new(&[ClassId(1), ClassId(1)]),
            Err(Error::DuplicateClass(_))
        ));
        assert!(label_space(&[(ClassId(2), "a"), (ClassId(2), "b")]).is_err());
    }

    #[test]
    fn index_and_tag_are_inverse() {
        let space = LabelSpace::new(&[ClassId(7), ClassId(2), ClassId(9)]).unwrap();
        for i in 0..space.len() {
            assert_eq!(space.index_of(space.tag(i)), Some(i));
        }
        assert_eq!(space.encode(&[Tag::B(ClassId(4))]), vec![0]);
        assert_eq!(space.begin_of(space.index_of(Tag::I(ClassId(2))).unwrap()), Some(2));
    }

    #[test]
    fn split_raw_labels() {
        assert_eq!(Tag::split("O"), Some(('O', None)));
        assert_eq!(Tag::split("B-Life.Injure"), Some(('B', Some("Life.Injure"))));
        assert_eq!(Tag::split("I-x-y"), Some(('I', Some("x-y"))));
        assert_eq!(Tag::split("B-"), None);
        assert_eq!(Tag::split("X-a"), None);
        assert_eq!(Tag::split("Injure"), None);
    }
}
