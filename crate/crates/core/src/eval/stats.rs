//! Rank AUC and the one-sided Welch test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{EvalError, GradeScores, AUC_METRICS};

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length { scores: scores.len(), labels: labels.len() });
    }
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(EvalError::SingleClass { positives: pos, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tied blocks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, q) = (pos as f64, (n - pos) as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mild+, Moderate+ and Severe+ AUCs from tail probabilities. An AUC whose
/// binary labels are all one class is reported as NaN.
pub fn auc_triplet(s: &GradeScores) -> Result<Vec<(String, f64)>, EvalError> {
    (1..=3)
        .map(|k| {
            let labels: Vec<bool> = s.labels.iter().map(|&g| g >= k).collect();
            let v = match auc(&s.tail(k), &labels) {
                Err(EvalError::SingleClass { .. }) => f64::NAN,
                r => r?,
            };
            Ok((AUC_METRICS[k - 1].to_string(), v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNormStats {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl GroupNormStats {
    pub fn from_values(label: &str, v: &[f64]) -> Result<Self, EvalError> {
        if v.len() < 2 {
            return Err(EvalError::GroupTooSmall { label: label.to_string(), n: v.len() });
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { label: label.to_string(), n: v.len(), mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p: f64,
}

/// Welch's unequal-variance t-test of `mean(a) > mean(b)`.
pub fn welch_one_sided(a: &GroupNormStats, b: &GroupNormStats) -> WelchTest {
    let va = a.std * a.std / a.n as f64;
    let vb = b.std * b.std / b.n as f64;
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    if se2 == 0.0 {
        let (t, p) = match diff.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 1.0),
            _ => (0.0, 0.5),
        };
        return WelchTest { t, df: (a.n + b.n - 2) as f64, p };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n as f64 - 1.0) + vb * vb / (b.n as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    // upper tail via symmetry keeps precision for large t
    WelchTest { t, df, p: dist.cdf(-t) }
}
