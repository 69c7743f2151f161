//! Downstream evaluation: fine-tuned age regression, next-visit grade
//! prediction, trajectory-norm group statistics and the NODE classifier.

mod finetune;
mod stats;

pub use finetune::{
    evaluate_node_cls, finetune_age_regression, finetune_predict_next_visit, norm_groups, trajectory_norm_analysis, FinetuneConfig, NormAnalysis,
};
pub use stats::{auc, auc_triplet, welch_one_sided, GroupNormStats, WelchTest};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::models::{ModelError, N_GRADES};
use crate::odesolve::SolverStats;
use crate::synthdata::{DataError, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC is undefined: only one class present ({positives} positives of {n})")]
    SingleClass { positives: usize, n: usize },
    #[error("score and label counts differ ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("group '{label}' has {n} samples, need at least 2")]
    GroupTooSmall { label: String, n: usize },
    #[error("training step was given {0:?} data")]
    Leakage(Split),
    #[error("invalid fine-tuning setting: {0}")]
    Config(String),
    #[error("no samples for {0}")]
    Empty(&'static str),
    #[error("non-finite training loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Age,
    NextVisit,
    Norms,
    NodeCls,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Age, Task::NextVisit, Task::Norms, Task::NodeCls];

    pub fn name(self) -> &'static str {
        match self {
            Task::Age => "age",
            Task::NextVisit => "next_visit",
            Task::Norms => "norms",
            Task::NodeCls => "node_cls",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let k = s.to_ascii_lowercase().replace('-', "_");
        Task::ALL.into_iter().find(|t| t.name() == k).ok_or_else(|| format!("unknown task '{s}' (age, next_visit, norms, node_cls)"))
    }
}

/// Metric names for the three "at least grade k" AUCs, k = 1, 2, 3.
pub const AUC_METRICS: [&str; 3] = ["auc_mild+", "auc_moderate+", "auc_severe+"];

/// Per-sample grade probabilities on the test split, kept for auditing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradeScores {
    pub labels: Vec<usize>,
    pub probs: Vec<[f64; N_GRADES]>,
}

impl GradeScores {
    /// Probability of grade ≥ k for every sample.
    pub fn tail(&self, k: usize) -> Vec<f64> {
        self.probs.iter().map(|p| p[k..].iter().sum()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub wall_time_s: f64,
    pub solver: Option<SolverStats>,
    pub scores: Option<GradeScores>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}
