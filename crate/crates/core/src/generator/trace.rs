use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StepKind {
    Reason,
    Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: StepKind,
    /// Decision entropy at `τ₀` before this step.
    pub entropy_before: f64,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chosen_item: Option<usize>,
    /// Weights over the remaining candidates (ascending id) that formed the
    /// reasoning token.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn reason_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Reason).count()
    }

    pub fn selections(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.kind == StepKind::Select)
    }

    /// Steps grouped by the selection they precede: each run is zero or
    /// more REASON steps followed by one SELECT.
    pub fn runs(&self) -> Vec<&[StepRecord]> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, s) in self.steps.iter().enumerate() {
            if s.kind == StepKind::Select {
                out.push(&self.steps[start..=i]);
                start = i + 1;
            }
        }
        out
    }

    pub fn logprob_sum(&self) -> f64 {
        self.selections().filter_map(|s| s.logprob).sum()
    }
}

#[derive(Serialize)]
struct Header<'a> {
    header: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Line<'a> {
    list: usize,
    step: usize,
    #[serde(flatten)]
    record: &'a StepRecord,
}

/// One header line carrying the config, then one line per step tagged with
/// its list and step index.
pub fn write_traces(path: &Path, config: &ExperimentConfig, traces: &[GenerationTrace]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Header { header: config }).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for (list, t) in traces.iter().enumerate() {
        for (step, record) in t.steps.iter().enumerate() {
            serde_json::to_writer(&mut w, &Line { list, step, record }).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}
