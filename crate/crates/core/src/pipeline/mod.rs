//! Data ingestion, toy corpus, configuration, checkpoints and the staged
//! training / evaluation driver.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, RunConfig};
pub use train::{
    benchmark, edit_eval, generation_eval, reconstruction, retrieval_accuracy, run_ablation, run_stage, train_all,
    Ablation, Dataset, EditReport, GenerationReport, Models, PipelineError, Stage, StageReport,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smiles;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One molecule, optionally with a caption. Unlabeled rows have `caption: None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub smiles: String,
    #[serde(default)]
    pub caption: Option<String>,
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::FileNotFound(path.display().to_string()),
        _ => DataError::Io(e),
    })?;
    parse_pairs(&text)
}

pub fn parse_pairs(text: &str) -> Result<Vec<PairRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: PairRecord = serde_json::from_str(line)
            .map_err(|e| DataError::MalformedRow { line: line_no, reason: e.to_string() })?;
        if let Err(e) = smiles::parse_valid(&rec.smiles) {
            return Err(DataError::MalformedRow { line: line_no, reason: format!("{}: {e}", rec.smiles) });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<(), DataError> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&serde_json::to_string(p).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parsing() {
        assert!(parse_pairs("").unwrap().is_empty());
        let one = parse_pairs(r#"{"smiles":"CCO","caption":"an alcohol"}"#).unwrap();
        assert_eq!(one, vec![PairRecord { smiles: "CCO".into(), caption: Some("an alcohol".into()) }]);
        let unlabeled = parse_pairs(r#"{"smiles":"CC"}"#).unwrap();
        assert_eq!(unlabeled[0].caption, None);
        let err = parse_pairs("{\"smiles\":\"CC\"}\n\n{\"smiles\":\"C((\"}").unwrap_err();
        assert!(matches!(err, DataError::MalformedRow { line: 3, .. }));
        assert!(matches!(parse_pairs("not json"), Err(DataError::MalformedRow { line: 1, .. })));
    }

    #[test]
    fn pairs_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let pairs = corpus::make_toy_corpus(20, 1);
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
        assert!(matches!(load_pairs(&dir.path().join("missing")), Err(DataError::FileNotFound(_))));
    }
}
