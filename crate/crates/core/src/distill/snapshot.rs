use alloc::string::ToString;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::math::Matrix;
use crate::model::ModelParams;
use crate::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub version: u32,
    /// Session after which the snapshot was taken (0 = base pretraining).
    pub session: usize,
    /// Classes the model has been trained on, in label-space order.
    pub classes: Vec<ClassId>,
    pub seed: u64,
}

/// Frozen model state: tagger parameters plus the shared attention matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub params: ModelParams,
    /// `L_max × L_max`; sessions use the top-left block of their label count.
    pub attention: Matrix,
    pub meta: SnapshotMeta,
}

impl ModelSnapshot {
    pub fn validate(&self) -> Result<()> {
        if self.meta.version != SNAPSHOT_VERSION {
            return Err(Error::InvalidConfig(alloc::format!(
                "snapshot version {} (expected {SNAPSHOT_VERSION})",
                self.meta.version
            )));
        }
        let labels = 2 * self.meta.classes.len() + 1;
        let (r, c) = self.attention.shape();
        if r != c || r < labels {
            return Err(Error::ShapeMismatch(
                "attention matrix smaller than the recorded label space".to_string(),
            ));
        }
        if !self.params.is_finite() || !self.attention.is_finite() {
            return Err(Error::NonFinite("snapshot parameters"));
        }
        Ok(())
    }
}

/// Teachers of one session. `father` is absent in session 1, where the
/// ancestor fills both roles.
#[derive(Debug, Clone, Copy)]
pub struct TeacherPair<'a> {
    pub ancestor: &'a ModelSnapshot,
    pub father: Option<&'a ModelSnapshot>,
}

impl<'a> TeacherPair<'a> {
    pub fn father_or_ancestor(&self) -> &'a ModelSnapshot {
        self.father.unwrap_or(self.ancestor)
    }
}
