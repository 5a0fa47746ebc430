use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{label_index, validate_choices, RequestRecord};

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_label: char,
    pub domain: String,
}

impl DatasetItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        validate_choices(&self.choices).map_err(|e| e.to_string())?;
        match label_index(self.answer_label) {
            Some(i) if i < self.choices.len() => Ok(()),
            _ => Err(format!(
                "answer_label {:?} is not one of the {} choice labels",
                self.answer_label,
                self.choices.len()
            )),
        }
    }

    pub fn to_request(&self) -> RequestRecord {
        RequestRecord::new(&self.id, &self.question)
            .with_domain(&self.domain)
            .with_choices(self.choices.iter().cloned())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Reads line-delimited JSON items. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<DatasetItem>, DatasetError> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let format = |message: String| DatasetError::Format { line: i + 1, message };
        let item: DatasetItem = serde_json::from_str(&line).map_err(|e| format(e.to_string()))?;
        item.validate().map_err(format)?;
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetItem>, DatasetError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset(mut w: impl Write, items: &[DatasetItem]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_dataset(path: impl AsRef<Path>, items: &[DatasetItem]) -> std::io::Result<()> {
    write_dataset(std::io::BufWriter::new(File::create(path)?), items)
}
