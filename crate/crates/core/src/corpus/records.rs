use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// One captioned image: raw caption strings plus a pointer to its feature
/// file. Paths are stored as written and resolved against the JSONL's parent
/// directory when relative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub captions: Vec<String>,
    pub feature_path: String,
}

/// One question with its ten annotator answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub feature_path: String,
    /// Set when the source had fewer than ten answers and was padded by
    /// repetition.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub padded_answers: bool,
}

pub const ANNOTATORS: usize = 10;

impl QARecord {
    /// Enforce exactly ten answers, padding by repetition when short.
    pub fn normalized(mut self) -> Result<Self, CorpusError> {
        if self.answers.is_empty() {
            return Err(CorpusError::Schema { detail: "record has no answers".into() });
        }
        if self.answers.len() < ANNOTATORS {
            let last = self.answers.last().expect("non-empty").clone();
            self.answers.resize(ANNOTATORS, last);
            self.padded_answers = true;
        } else if self.answers.len() > ANNOTATORS {
            return Err(CorpusError::Schema {
                detail: format!("record has {} answers, expected {}", self.answers.len(), ANNOTATORS),
            });
        }
        Ok(self)
    }
}

/// Resolve a feature path relative to the JSONL file that referenced it.
pub fn resolve_feature_path(jsonl_path: &Path, feature_path: &str) -> PathBuf {
    let p = Path::new(feature_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        jsonl_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

fn read_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>, CorpusError>
where
    F: FnMut(&str, &Path) -> Result<T, String>,
{
    let file = File::open(path).map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(&line, path) {
            Ok(record) => out.push(record),
            Err(detail) => {
                return Err(CorpusError::Line { path: path.to_path_buf(), line: idx + 1, detail })
            }
        }
    }
    Ok(out)
}

fn check_feature_file(jsonl: &Path, feature_path: &str) -> Result<(), String> {
    let resolved = resolve_feature_path(jsonl, feature_path);
    if resolved.is_file() {
        Ok(())
    } else {
        Err(format!("feature file {:?} does not exist", resolved))
    }
}

/// Load caption records, one JSON object per line. Failures carry the
/// 1-based line number.
pub fn load_captions_jsonl(path: &Path) -> Result<Vec<CaptionRecord>, CorpusError> {
    read_lines(path, |line, jsonl| {
        let record: CaptionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if record.captions.is_empty() {
            return Err("record has no captions".into());
        }
        check_feature_file(jsonl, &record.feature_path)?;
        Ok(record)
    })
}

/// Load QA records, one JSON object per line, normalizing to ten answers.
pub fn load_qa_jsonl(path: &Path) -> Result<Vec<QARecord>, CorpusError> {
    read_lines(path, |line, jsonl| {
        let record: QARecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        check_feature_file(jsonl, &record.feature_path)?;
        record.normalized().map_err(|e| e.to_string())
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
    }
    w.flush().map_err(|e| CorpusError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}
