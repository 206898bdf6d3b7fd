//! JSON-lines datasets: one `{"tokens": [...], "labels": [...]}` object per
//! line, with BIO label strings and an optional `doc_id`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use cifsed_core::corpus::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

/// Parses a dataset. Blank lines are skipped; errors carry 1-based line
/// numbers and `origin` as the reported path.
pub fn read_dataset(reader: impl BufRead, origin: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(origin))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((rec.tokens, rec.labels, rec.doc_id));
        lines.push(i + 1);
    }
    Dataset::from_records(records).map_err(|(idx, e)| Error::Parse {
        path: origin.to_path_buf(),
        line: lines.get(idx).copied().unwrap_or(lines.len() + 1),
        message: e.to_string(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(Error::io(path))?;
    read_dataset(BufReader::new(file), path)
}

pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    for inst in dataset.instances() {
        let rec = Record {
            tokens: inst.tokens.clone(),
            labels: dataset.label_strings(inst),
            doc_id: inst.doc_id.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    write_dataset(dataset, BufWriter::new(file)).map_err(Error::io(path))
}
