//! JSON persistence for snapshots, session manifests, prompt templates and
//! run reports. Floats round-trip exactly.

use std::fs;
use std::path::Path;

use cifsed_core::corpus::{ClassId, Dataset, SessionPlan};
use cifsed_core::distill::ModelSnapshot;
use cifsed_core::harness::RunReport;
use cifsed_core::prompt::PromptTemplates;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_snapshot(snapshot: &ModelSnapshot, path: &Path) -> Result<()> {
    write_json(snapshot, path)
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot> {
    let snapshot: ModelSnapshot = read_json(path)?;
    snapshot.validate()?;
    Ok(snapshot)
}

pub fn load_templates(path: &Path) -> Result<PromptTemplates> {
    let templates: PromptTemplates = read_json(path)?;
    templates.validate()?;
    Ok(templates)
}

pub fn save_templates(templates: &PromptTemplates, path: &Path) -> Result<()> {
    write_json(templates, path)
}

pub fn save_report(report: &RunReport, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedClass {
    pub id: ClassId,
    pub name: String,
}

/// Session split of one seed, with class names for readability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub seed: u64,
    pub plan: SessionPlan,
    pub sessions: Vec<Vec<NamedClass>>,
    pub train_instances: usize,
    pub test_instances: usize,
    pub note: String,
}

impl PlanManifest {
    pub fn new(plan: &SessionPlan, train: &Dataset, test: &Dataset) -> Self {
        Self {
            seed: plan.seed,
            sessions: plan
                .sessions
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&id| NamedClass {
                            id,
                            name: train.class_name(id).to_string(),
                        })
                        .collect()
                })
                .collect(),
            plan: plan.clone(),
            train_instances: train.instances().len(),
            test_instances: test.instances().len(),
            note: "All methods of a seed start from one shared base model, so their session-0 scores coincide."
                .to_string(),
        }
    }
}
