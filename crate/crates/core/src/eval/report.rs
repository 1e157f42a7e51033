use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Mining,
    Sts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub threshold: Option<f64>,
    pub n: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn new(task: Task, metrics: impl IntoIterator<Item = (&'static str, f64)>, n: usize) -> Self {
        Self {
            task,
            metrics: metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            threshold: None,
            n,
            config_fingerprint: String::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Checks that the metrics belong to the task and lie in their ranges.
    pub fn validate(&self) -> Result<()> {
        let allowed: &[&str] = match self.task {
            Task::Retrieval => &["accuracy", "accuracy_forward", "accuracy_backward"],
            Task::Mining => &["precision", "recall", "f1"],
            Task::Sts => &["spearman_rho"],
        };
        for (k, &v) in &self.metrics {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Contract(format!("metric {k} does not belong to {:?}", self.task)));
            }
            let lo = if k == "spearman_rho" { -1.0 } else { 0.0 };
            if !(lo..=1.0).contains(&v) {
                return Err(Error::Contract(format!("metric {k}={v} out of range")));
            }
        }
        Ok(())
    }
}
