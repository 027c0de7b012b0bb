//! JSON-lines demonstration files and newline-separated label files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One query–answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: String,
    pub answer: String,
}

impl Demonstration {
    pub fn new(query: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            answer: answer.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(Error::Invalid("query and answer must be non-empty".into()));
        }
        Ok(())
    }
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let demo: Demonstration = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        demo.validate().map_err(|e| err(e.to_string()))?;
        out.push(demo);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Demonstration>> {
    parse_jsonl(&fs::read_to_string(path)?, path)
}

pub fn write_jsonl(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for d in demos {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let labels: Vec<String> = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if labels.is_empty() {
        return Err(Error::Invalid(format!("{} has no labels", path.display())));
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[String]) -> Result<()> {
    fs::write(path, labels.join("\n") + "\n")?;
    Ok(())
}
