use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// JSON result of a check command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl RunReport {
    /// `pass` is derived: every metric must be finite and within `tolerance`.
    /// Non-finite metrics are stored as `f64::MAX` so the JSON stays valid.
    pub fn new(command: &str, config: serde_json::Value, metrics: Vec<(String, f64)>, tolerance: f64) -> Self {
        let pass = metrics.iter().all(|(_, v)| v.is_finite() && *v <= tolerance);
        let metrics = metrics.into_iter().map(|(k, v)| (k, if v.is_finite() { v } else { f64::MAX })).collect();
        RunReport { command: command.to_string(), config, metrics, tolerance, pass }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is plain data");
        s.push('\n');
        s
    }
}
