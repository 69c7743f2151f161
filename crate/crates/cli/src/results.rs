//! `results.csv` rows and per-task score dumps.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use lssl_core::eval::{GradeScores, MetricsReport};
use lssl_core::models::Mode;

use crate::config::ExperimentConfig;

pub const HEADER: &str = "mode,lambda_dir,lambda_recon,node,task,metric,value,seed,config_hash";

/// Pseudo-task for end-of-pretraining losses.
pub const PRETRAIN_TASK: &str = "pretrain";

/// A row of the experiment grid: from-scratch or one pretraining mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pretraining {
    Scratch,
    Mode(Mode),
}

impl Pretraining {
    pub const GRID: [Pretraining; 7] = [
        Pretraining::Scratch,
        Pretraining::Mode(Mode::Ae),
        Pretraining::Mode(Mode::AeNode),
        Pretraining::Mode(Mode::Lssl),
        Pretraining::Mode(Mode::LsslNode),
        Pretraining::Mode(Mode::SLssl),
        Pretraining::Mode(Mode::SLsslNode),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pretraining::Scratch => "scratch",
            Pretraining::Mode(m) => m.name(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pretraining::Scratch => "From scratch",
            Pretraining::Mode(m) => m.label(),
        }
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            Pretraining::Scratch => None,
            Pretraining::Mode(m) => Some(m),
        }
    }
}

impl fmt::Display for Pretraining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pretraining {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("scratch") {
            return Ok(Pretraining::Scratch);
        }
        Ok(Pretraining::Mode(s.parse()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: Pretraining,
    pub lambda_dir: f64,
    pub lambda_recon: f64,
    pub node: bool,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.model, self.lambda_dir, self.lambda_recon, self.node, self.task, self.metric, self.value, self.seed, self.config_hash
        )
    }

    pub fn from_csv(line: &str) -> Result<ResultRow> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            bail!("expected 9 fields, got {}: {line}", f.len());
        }
        Ok(ResultRow {
            model: f[0].parse()?,
            lambda_dir: f[1].parse()?,
            lambda_recon: f[2].parse()?,
            node: f[3].parse()?,
            task: f[4].to_string(),
            metric: f[5].to_string(),
            value: f[6].parse()?,
            seed: f[7].parse()?,
            config_hash: f[8].to_string(),
        })
    }
}

/// Rows for `metrics` under the configuration that produced them. `cfg`
/// carries the pretraining settings of `model` (ignored for scratch).
pub fn rows_for(model: Pretraining, cfg: &ExperimentConfig, task: &str, metrics: &[(String, f64)]) -> Vec<ResultRow> {
    let (lambda_dir, lambda_recon, node) = match model {
        Pretraining::Scratch => (0.0, 0.0, false),
        Pretraining::Mode(_) => (cfg.lambda_dir, cfg.lambda_recon, cfg.node),
    };
    let config_hash = cfg.hash(model.name());
    metrics
        .iter()
        .map(|(metric, value)| ResultRow {
            model,
            lambda_dir,
            lambda_recon,
            node,
            task: task.to_string(),
            metric: metric.clone(),
            value: *value,
            seed: cfg.seed,
            config_hash: config_hash.clone(),
        })
        .collect()
}

pub fn report_rows(model: Pretraining, cfg: &ExperimentConfig, report: &MetricsReport) -> Vec<ResultRow> {
    rows_for(model, cfg, report.task.name(), &report.metrics)
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut text = String::new();
    if fresh {
        text.push_str(HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        bail!("{} does not start with the results header", path.display());
    }
    lines.filter(|l| !l.trim().is_empty()).enumerate().map(|(i, l)| ResultRow::from_csv(l).with_context(|| format!("row {}", i + 1))).collect()
}

/// Looks up one value.
pub fn value(rows: &[ResultRow], seed: u64, model: Pretraining, task: &str, metric: &str) -> Option<f64> {
    rows.iter().find(|r| r.seed == seed && r.model == model && r.task == task && r.metric == metric).map(|r| r.value)
}

/// Seeds present in `rows`, ascending.
pub fn seeds(rows: &[ResultRow]) -> Vec<u64> {
    let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Test-split labels and grade probabilities, one row per sample.
pub fn write_scores(path: &Path, scores: &GradeScores) -> Result<()> {
    let mut text = String::from("index,label,p0,p1,p2,p3,p4\n");
    for (i, (label, p)) in scores.labels.iter().zip(&scores.probs).enumerate() {
        text.push_str(&format!("{i},{label},{},{},{},{},{}\n", p[0], p[1], p[2], p[3], p[4]));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let cfg = ExperimentConfig::default().with_mode(Mode::SLsslNode);
        let metrics = vec![("auc_severe+".to_string(), 0.8125), ("p".to_string(), f64::NAN)];
        let rows = rows_for(Pretraining::Mode(Mode::SLsslNode), &cfg, "next_visit", &metrics);
        for r in &rows {
            let back = ResultRow::from_csv(&r.to_csv()).unwrap();
            assert_eq!(back.to_csv(), r.to_csv());
            assert_eq!((back.lambda_recon, back.lambda_dir, back.node), (0.0, 1.0, true));
        }
        assert!(ResultRow::from_csv("a,b").is_err());
    }

    #[test]
    fn every_row_carries_seed_and_hash() {
        let cfg = ExperimentConfig { seed: 9, ..Default::default() };
        let rows = rows_for(Pretraining::Scratch, &cfg, "age", &[("mse".into(), 1.0)]);
        assert_eq!(rows[0].seed, 9);
        assert_eq!(rows[0].config_hash, cfg.hash("scratch"));
        assert_eq!((rows[0].lambda_dir, rows[0].lambda_recon, rows[0].node), (0.0, 0.0, false));
    }

    #[test]
    fn append_writes_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let cfg = ExperimentConfig::default();
        let rows = rows_for(Pretraining::Mode(Mode::Lssl), &cfg, "age", &[("mse".into(), 2.5)]);
        append_rows(&path, &rows).unwrap();
        append_rows(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(HEADER).count(), 1);
        let back = read_rows(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(value(&back, 0, Pretraining::Mode(Mode::Lssl), "age", "mse"), Some(2.5));
        assert_eq!(seeds(&back), vec![0]);
    }

    #[test]
    fn grid_names_parse_back() {
        for p in Pretraining::GRID {
            assert_eq!(p.name().parse::<Pretraining>().unwrap(), p);
        }
    }
}
