//! Time-ordered logs of one HPO run, serialized as line-delimited JSON:
//! one header line followed by one line per event.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmsError, Result};

pub const TRACE_VERSION: u32 = 1;

/// Run metadata plus everything needed to re-render reports without the hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub method: String,
    pub seed: u64,
    pub hub_hash: String,
    pub total_budget: u64,
    pub b_max: usize,
    pub n_configs: usize,
    /// Best cached accuracy anywhere in the table (regret reference).
    pub y_opt: f64,
    /// Full-budget accuracy per configuration (τ ground truth).
    pub true_final_accuracies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Eval(EvalEvent),
    Snapshot(SnapshotEvent),
}

/// One evaluation: a configuration advanced by one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub step: u64,
    pub config_id: usize,
    pub budget: usize,
    pub epochs_spent: u64,
    pub y: f64,
    pub cumulative_epochs: u64,
    pub incumbent: f64,
}

/// Predicted full-budget scores for every configuration at a declared tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEvent {
    pub budget_spent: u64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpoTrace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl HpoTrace {
    pub fn eval_events(&self) -> impl Iterator<Item = &EvalEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Eval(ev) => Some(ev),
            TraceEvent::Snapshot(_) => None,
        })
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &SnapshotEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Snapshot(s) => Some(s),
            TraceEvent::Eval(_) => None,
        })
    }

    /// Incumbent value after each budget tick `1..=last`.
    pub fn incumbent_series(&self) -> Vec<f64> {
        self.eval_events().map(|e| e.incumbent).collect()
    }

    pub fn total_epochs(&self) -> u64 {
        self.eval_events().map(|e| e.epochs_spent).sum()
    }

    /// Check the trace invariants: cumulative budget and incumbent are
    /// nondecreasing, every event charges one epoch, and the incumbent
    /// equals the running max of observed values.
    pub fn validate(&self) -> Result<()> {
        let mut cum = 0u64;
        let mut best = f64::NEG_INFINITY;
        for ev in self.eval_events() {
            if ev.epochs_spent != 1 {
                return Err(FmsError::Trace(format!(
                    "event at step {} charges {} epochs",
                    ev.step, ev.epochs_spent
                )));
            }
            if ev.cumulative_epochs != cum + 1 {
                return Err(FmsError::Trace(format!(
                    "cumulative epochs jumped to {} after {cum}",
                    ev.cumulative_epochs
                )));
            }
            cum = ev.cumulative_epochs;
            best = best.max(ev.y);
            if (ev.incumbent - best).abs() > 0.0 {
                return Err(FmsError::Trace(format!(
                    "incumbent {} differs from running max {best}",
                    ev.incumbent
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header)?);
        out.push('\n');
        for event in &self.events {
            out.push_str(&serde_json::to_string(event)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| FmsError::Trace("empty trace".into()))?;
        let header: TraceHeader = serde_json::from_str(header_line)?;
        if header.format_version != TRACE_VERSION {
            return Err(FmsError::Trace(format!(
                "unsupported trace version {}",
                header.format_version
            )));
        }
        let events = lines
            .map(serde_json::from_str::<TraceEvent>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(HpoTrace { header, events })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }
}
