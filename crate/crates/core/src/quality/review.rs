use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One expert audit of a sample across seven dimensions. Scores are empty
/// until a reviewer fills them in; `modality_match` is 0 or 1, the rest 0 to 5.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRecord {
    pub id: String,
    pub modality_match: Option<u8>,
    pub factual_accuracy: Option<u8>,
    pub information_completeness: Option<u8>,
    pub position_quantity_accuracy: Option<u8>,
    pub professionalism: Option<u8>,
    pub planning_coherence: Option<u8>,
    pub clinical_reasoning: Option<u8>,
    pub reviewer_id: String,
    pub notes: String,
}

impl ReviewRecord {
    pub fn blank(id: impl Into<String>) -> Self {
        Self { id: id.into(), ..Default::default() }
    }

    /// `(name, value, max)` for every score dimension.
    pub fn dimensions(&self) -> [(&'static str, Option<u8>, u8); 7] {
        [
            ("modality_match", self.modality_match, 1),
            ("factual_accuracy", self.factual_accuracy, 5),
            ("information_completeness", self.information_completeness, 5),
            ("position_quantity_accuracy", self.position_quantity_accuracy, 5),
            ("professionalism", self.professionalism, 5),
            ("planning_coherence", self.planning_coherence, 5),
            ("clinical_reasoning", self.clinical_reasoning, 5),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            bail!(Format, "review record without sample id");
        }
        for (name, v, max) in self.dimensions() {
            if let Some(v) = v {
                if v > max {
                    bail!(Format, "review of {}: {name} = {v} is outside 0..={max}", self.id);
                }
            }
        }
        Ok(())
    }
}

/// Writes one blank review record per id as JSON lines.
pub fn export_review<'a>(ids: impl IntoIterator<Item = &'a str>, path: &Path) -> Result<usize> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut n = 0;
    for id in ids {
        let line = serde_json::to_string(&ReviewRecord::blank(id)).map_err(|e| crate::Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Parses one JSON-lines record and checks its score ranges.
pub fn parse_review_line(line: &str) -> Result<ReviewRecord> {
    let r: ReviewRecord =
        serde_json::from_str(line).map_err(|e| crate::Error::Format(format!("review record: {e}")))?;
    r.validate()?;
    Ok(r)
}

pub fn read_review(path: &Path) -> Result<Vec<ReviewRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_review_line(&line)?);
        }
    }
    Ok(out)
}
