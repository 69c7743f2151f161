//! Synthetic longitudinal cohort: subjects with irregular visits, a
//! monotone logistic severity with a subject-specific rate, five grades,
//! and noisy 32-dimensional observations.
//!
//! An observation is `tanh(W·u + b) + V·view + ε` with a cohort-wide
//! embedding and `u = [severity, subject nuisance, age]`. The view is
//! redrawn at every visit and plays the part of an unregistered
//! acquisition; the age channel gives the age-regression task an
//! image-borne signal that drifts with time like the disease does.

mod datasets;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use datasets::{make_pair_dataset, make_sequence_dataset, PairDataset, PairRef, SequenceDataset};
pub use io::{read_jsonl, write_jsonl, VisitRow};

pub const GRADE_THRESHOLDS: [f64; 4] = [0.5, 1.5, 2.5, 3.5];
pub const N_GRADES: usize = 5;
pub const MAX_SEVERITY: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator setting: {0}")]
    Config(String),
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("split leakage: subject {subject} is {found:?} but {expected:?} was required")]
    Leakage { subject: usize, expected: Split, found: Split },
    #[error("cohort file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Years since the first visit.
    pub time: f64,
    pub age: f64,
    pub severity: f64,
    pub grade: usize,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: usize,
    pub baseline_age: f64,
    pub speed: Speed,
    pub split: Split,
    pub visits: Vec<Visit>,
    /// Generator parameters; absent when read back from a cohort file.
    pub truth: Option<SubjectTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    /// Logistic rate per year.
    pub rate: f64,
    /// Years since baseline at which severity crosses half its maximum.
    pub onset: f64,
    pub nuisance: Vec<f64>,
}

impl SubjectRecord {
    pub fn has_grade_change(&self) -> bool {
        self.visits.windows(2).any(|w| w[0].grade != w[1].grade)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub obs_dim: usize,
    pub nuisance_dim: usize,
    pub view_dim: usize,
    pub noise_std: f64,
    pub min_visits: usize,
    pub max_visits: usize,
    pub gap_range: (f64, f64),
    pub age_range: (f64, f64),
    pub fast_fraction: f64,
    pub slow_rate: (f64, f64),
    pub fast_rate: (f64, f64),
    pub onset_range: (f64, f64),
    /// Input amplitudes of the severity, nuisance, view and age channels.
    pub severity_scale: f64,
    pub nuisance_scale: f64,
    pub view_scale: f64,
    pub age_scale: f64,
    pub bias_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            obs_dim: 32,
            nuisance_dim: 8,
            view_dim: 4,
            noise_std: 0.03,
            min_visits: 2,
            max_visits: 6,
            gap_range: (0.5, 2.5),
            age_range: (9.0, 91.0),
            fast_fraction: 0.3,
            slow_rate: (0.15, 0.45),
            fast_rate: (0.6, 1.2),
            onset_range: (0.0, 6.0),
            severity_scale: 0.7,
            nuisance_scale: 0.5,
            view_scale: 0.45,
            age_scale: 0.6,
            bias_std: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.obs_dim == 0 {
            return bad("observation dimension must be positive");
        }
        if self.min_visits < 2 || self.max_visits < self.min_visits {
            return bad("visit counts must satisfy 2 ≤ min ≤ max");
        }
        if ![self.gap_range, self.age_range, self.slow_rate, self.fast_rate, self.onset_range].into_iter().all(range_ok) {
            return bad("ranges must be finite and ordered");
        }
        if self.gap_range.0 <= 0.0 {
            return bad("visit gaps must be positive");
        }
        if self.slow_rate.0 < 0.0 || self.fast_rate.0 <= self.slow_rate.1 {
            return bad("rates must be non-negative and every fast rate above every slow rate");
        }
        if !(0.0..=1.0).contains(&self.fast_fraction) {
            return bad("fast fraction must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        2 + self.nuisance_dim
    }
}

/// `4·sigmoid(r·(t − onset))`.
pub fn severity(rate: f64, onset: f64, t: f64) -> f64 {
    MAX_SEVERITY / (1.0 + (-(rate * (t - onset))).exp())
}

/// Number of grade thresholds at or below `s`.
pub fn grade_of(s: f64) -> usize {
    GRADE_THRESHOLDS.iter().filter(|&&th| s >= th).count()
}

/// The cohort-wide observation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `[obs_dim × input_dim]`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `[obs_dim × view_dim]`, row-major.
    pub v: Vec<f64>,
    pub obs_dim: usize,
    pub input_dim: usize,
}

impl Embedding {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let n = cfg.input_dim();
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let w = (0..cfg.obs_dim * n).map(|_| std.sample(&mut rng)).collect();
        let b = (0..cfg.obs_dim).map(|_| cfg.bias_std * std.sample(&mut rng)).collect();
        let v = (0..cfg.obs_dim * cfg.view_dim).map(|_| std.sample(&mut rng)).collect();
        Self { w, b, v, obs_dim: cfg.obs_dim, input_dim: n }
    }

    /// Noise-free observation.
    pub fn observe(&self, cfg: &GeneratorConfig, s: f64, nuisance: &[f64], view: &[f64], age: f64) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.input_dim);
        u.push(cfg.severity_scale * (s - 2.0) / 2.0);
        u.extend(nuisance.iter().map(|v| cfg.nuisance_scale * v));
        u.push(cfg.age_scale * (age - 50.0) / 25.0);
        let k = view.len();
        (0..self.obs_dim)
            .map(|r| {
                let row = &self.w[r * self.input_dim..(r + 1) * self.input_dim];
                let shift: f64 = self.v[r * k..(r + 1) * k].iter().zip(view).map(|(a, b)| a * b).sum();
                (row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + self.b[r]).tanh() + cfg.view_scale * shift
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub seed: u64,
    pub config: GeneratorConfig,
    pub subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    /// Visit-level grade fractions within one split.
    pub fn grade_distribution(&self, split: Split) -> [f64; N_GRADES] {
        let mut counts = [0usize; N_GRADES];
        for s in self.subjects_in(split) {
            for v in &s.visits {
                counts[v.grade] += 1;
            }
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        counts.map(|c| c as f64 / total)
    }
}

fn subject_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

fn generate_subject(cfg: &GeneratorConfig, emb: &Embedding, seed: u64, id: usize) -> SubjectRecord {
    let mut rng = subject_rng(seed, id);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise");
    let speed = if rng.gen::<f64>() < cfg.fast_fraction { Speed::Fast } else { Speed::Slow };
    let (lo, hi) = if speed == Speed::Fast { cfg.fast_rate } else { cfg.slow_rate };
    let rate = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let onset = rng.gen_range(cfg.onset_range.0..=cfg.onset_range.1);
    let baseline_age = rng.gen_range(cfg.age_range.0..=cfg.age_range.1);
    let nuisance: Vec<f64> = (0..cfg.nuisance_dim).map(|_| unit.sample(&mut rng)).collect();
    let n_visits = rng.gen_range(cfg.min_visits..=cfg.max_visits);
    let mut t = 0.0;
    let mut visits = Vec::with_capacity(n_visits);
    for k in 0..n_visits {
        if k > 0 {
            t += rng.gen_range(cfg.gap_range.0..=cfg.gap_range.1);
        }
        let s = severity(rate, onset, t);
        let age = baseline_age + t;
        let view: Vec<f64> = (0..cfg.view_dim).map(|_| unit.sample(&mut rng)).collect();
        let mut x = emb.observe(cfg, s, &nuisance, &view, age);
        if cfg.noise_std > 0.0 {
            x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        visits.push(Visit { time: t, age, severity: s, grade: grade_of(s), x });
    }
    SubjectRecord { id, baseline_age, speed, split: Split::Train, visits, truth: Some(SubjectTruth { rate, onset, nuisance }) }
}

/// Generates `n_subjects` subjects with the default settings.
pub fn generate_cohort(n_subjects: usize, seed: u64) -> Result<Cohort, DataError> {
    generate_cohort_with(&GeneratorConfig::default(), n_subjects, seed)
}

pub fn generate_cohort_with(cfg: &GeneratorConfig, n_subjects: usize, seed: u64) -> Result<Cohort, DataError> {
    cfg.validate()?;
    if n_subjects < 10 {
        return Err(DataError::Config(format!("need at least 10 subjects, got {n_subjects}")));
    }
    let emb = Embedding::new(cfg, seed);
    let mut subjects: Vec<SubjectRecord> = (0..n_subjects).map(|id| generate_subject(cfg, &emb, seed, id)).collect();
    assign_splits(&mut subjects, seed);
    Ok(Cohort { seed, config: cfg.clone(), subjects })
}

/// 60/20/20 subject-level split, stratified by speed class and final grade.
pub fn assign_splits(subjects: &mut [SubjectRecord], seed: u64) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut strata: std::collections::BTreeMap<(Speed, usize), Vec<usize>> = Default::default();
    for (i, s) in subjects.iter().enumerate() {
        let last = s.visits.last().map_or(0, |v| v.grade);
        strata.entry((s.speed, last)).or_default().push(i);
    }
    // carry the rounding remainder across strata so totals stay at 60/20/20
    let mut offset = 0usize;
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            subjects[i].split = match offset % 5 {
                0..=2 => Split::Train,
                3 => Split::Val,
                _ => Split::Test,
            };
            offset += 1;
        }
    }
}
