//! Directional checks of the grid results against the expected orderings.
//! Used by the reproduction summary (one seed) and the acceptance suite
//! (several seeds).

use lssl_core::models::Mode;

use crate::results::{seeds, value, Pretraining, ResultRow, PRETRAIN_TASK};

pub const SEVERE: &str = "auc_severe+";
/// Gap required by the AUC orderings.
pub const AUC_GAP: f64 = 0.02;
/// Relative MSE improvement required for age regression.
pub const AGE_GAIN: f64 = 0.10;
pub const ALIGN_COSINE: f64 = 0.9;
pub const P_SEPARATE: f64 = 0.01;
pub const P_NO_SEPARATE: f64 = 0.05;

pub const COSINE_MODES: [Mode; 4] = [Mode::Lssl, Mode::LsslNode, Mode::SLssl, Mode::SLsslNode];
pub const AE_MODES: [Mode; 2] = [Mode::Ae, Mode::AeNode];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub key: &'static str,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn m(mode: Mode) -> Pretraining {
    Pretraining::Mode(mode)
}

/// Mean over `seeds` of one value; `None` if any seed lacks it.
fn mean(rows: &[ResultRow], seeds: &[u64], model: Pretraining, task: &str, metric: &str) -> Option<f64> {
    let vals: Option<Vec<f64>> = seeds.iter().map(|&s| value(rows, s, model, task, metric)).collect();
    let vals = vals?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |v| format!("{v:.4}"))
}

/// Validation cosine after S-LSSL pretraining on the lowest seed.
pub fn alignment(rows: &[ResultRow]) -> Check {
    let seed = seeds(rows).first().copied().unwrap_or(0);
    let cos = value(rows, seed, m(Mode::SLssl), PRETRAIN_TASK, "val_cosine");
    Check {
        key: "alignment",
        title: "S-LSSL validation cos(dz, tau) >= 0.9",
        pass: cos.is_some_and(|c| c >= ALIGN_COSINE),
        detail: format!("seed {seed}: {}", fmt(cos)),
    }
}

/// Seed-mean Severe+ AUC: LSSL-NODE > LSSL > scratch, LSSL and
/// LSSL-NODE > AE, each gap above [`AUC_GAP`].
pub fn next_visit_order(rows: &[ResultRow]) -> Check {
    let s = seeds(rows);
    let auc = |p| mean(rows, &s, p, "next_visit", SEVERE);
    let (node, lssl, scratch, ae) = (auc(m(Mode::LsslNode)), auc(m(Mode::Lssl)), auc(Pretraining::Scratch), auc(m(Mode::Ae)));
    let gap = |a: Option<f64>, b: Option<f64>| a.zip(b).is_some_and(|(a, b)| a - b > AUC_GAP);
    let pass = gap(node, lssl) && gap(lssl, scratch) && gap(lssl, ae) && gap(node, ae);
    Check {
        key: "next_visit",
        title: "Severe+ AUC: LSSL-NODE > LSSL > scratch, both LSSL > AE (gaps > 0.02)",
        pass,
        detail: format!("{} seeds; LSSL-NODE {}, LSSL {}, scratch {}, AE {}", s.len(), fmt(node), fmt(lssl), fmt(scratch), fmt(ae)),
    }
}

/// Per seed, every cosine-term model's age MSE is at least 10% below both
/// scratch and AE; passes on a majority of seeds.
pub fn age_order(rows: &[ResultRow]) -> Check {
    let s = seeds(rows);
    let mut wins = 0;
    let mut failed = Vec::new();
    for &seed in &s {
        let mse = |p| value(rows, seed, p, "age", "mse");
        let base = mse(Pretraining::Scratch).zip(mse(m(Mode::Ae))).map(|(a, b)| a.min(b));
        let mut ok = base.is_some();
        for mode in COSINE_MODES {
            let good = mse(m(mode)).zip(base).is_some_and(|(v, b)| v <= (1.0 - AGE_GAIN) * b);
            if !good {
                failed.push(format!("{}@{seed}", mode.name()));
                ok = false;
            }
        }
        wins += usize::from(ok);
    }
    let means: Vec<String> = Pretraining::GRID.iter().map(|&p| format!("{} {}", p.name(), fmt(mean(rows, &s, p, "age", "mse")))).collect();
    Check {
        key: "age",
        title: "age MSE: every cosine model >= 10% below scratch and AE (majority of seeds)",
        pass: !s.is_empty() && 2 * wins > s.len(),
        detail: format!("{wins}/{} seeds pass; mean MSE {}; short: [{}]", s.len(), means.join(", "), failed.join(" ")),
    }
}

/// Per seed, Welch p < 0.01 for every cosine model and p > 0.05 for AE
/// and AE+NODE on the plain trajectory norm; passes on a majority of seeds.
pub fn norm_separation(rows: &[ResultRow]) -> Check {
    let s = seeds(rows);
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &s {
        let p = |mode| value(rows, seed, m(mode), "norms", "p");
        let cos_ok = COSINE_MODES.iter().all(|&mode| p(mode).is_some_and(|v| v < P_SEPARATE));
        let ae_ok = AE_MODES.iter().all(|&mode| p(mode).is_some_and(|v| v > P_NO_SEPARATE));
        wins += usize::from(cos_ok && ae_ok);
        let ps: Vec<String> =
            AE_MODES.iter().chain(&COSINE_MODES).map(|&mode| format!("{} {}", mode.name(), p(mode).map_or("missing".into(), |v| format!("{v:.2e}")))).collect();
        lines.push(format!("seed {seed}: {}", ps.join(", ")));
    }
    Check {
        key: "norms",
        title: "trajectory norms: p < 0.01 for cosine models, p > 0.05 for AE and AE+NODE (majority of seeds)",
        pass: !s.is_empty() && 2 * wins > s.len(),
        detail: format!("{wins}/{} seeds pass; {}", s.len(), lines.join("; ")),
    }
}

/// Seed-mean NODE-CLS Severe+ AUC of both LSSL-NODE and S-LSSL-NODE
/// pretraining exceeds scratch by more than [`AUC_GAP`].
pub fn node_cls_order(rows: &[ResultRow]) -> Check {
    let s = seeds(rows);
    let auc = |p| mean(rows, &s, p, "node_cls", SEVERE);
    let scratch = auc(Pretraining::Scratch);
    let (l, sl) = (auc(m(Mode::LsslNode)), auc(m(Mode::SLsslNode)));
    let beats = |v: Option<f64>| v.zip(scratch).is_some_and(|(v, b)| v - b > AUC_GAP);
    Check {
        key: "node_cls",
        title: "NODE-CLS Severe+ AUC: LSSL-NODE and S-LSSL-NODE > scratch + 0.02",
        pass: beats(l) && beats(sl),
        detail: format!("{} seeds; LSSL-NODE {}, S-LSSL-NODE {}, scratch {}", s.len(), fmt(l), fmt(sl), fmt(scratch)),
    }
}

pub fn all_checks(rows: &[ResultRow]) -> Vec<Check> {
    vec![alignment(rows), next_visit_order(rows), age_order(rows), norm_separation(rows), node_cls_order(rows)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::results::rows_for;

    fn grid(seed: u64, shift: f64) -> Vec<ResultRow> {
        let cfg = ExperimentConfig { seed, ..Default::default() };
        let mut rows = Vec::new();
        let auc = |p: Pretraining| match p {
            Pretraining::Scratch => 0.70,
            Pretraining::Mode(Mode::Ae | Mode::AeNode) => 0.71,
            Pretraining::Mode(Mode::Lssl) => 0.75 + shift,
            Pretraining::Mode(Mode::LsslNode) => 0.80,
            Pretraining::Mode(_) => 0.76,
        };
        for p in Pretraining::GRID {
            let c = p.mode().map_or(cfg.clone(), |mode| cfg.with_mode(mode));
            let cosine = p.mode().is_some_and(|mode| mode.has_direction());
            rows.extend(rows_for(p, &c, "age", &[("mse".into(), if cosine { 80.0 } else { 100.0 })]));
            rows.extend(rows_for(p, &c, "next_visit", &[(SEVERE.into(), auc(p))]));
            rows.extend(rows_for(p, &c, "node_cls", &[(SEVERE.into(), auc(p))]));
            if p != Pretraining::Scratch {
                rows.extend(rows_for(p, &c, "norms", &[("p".into(), if cosine { 1e-4 } else { 0.3 })]));
                rows.extend(rows_for(p, &c, PRETRAIN_TASK, &[("val_cosine".into(), 0.95)]));
            }
        }
        rows
    }

    #[test]
    fn consistent_grid_passes_everything() {
        let rows: Vec<ResultRow> = (0..3).flat_map(|s| grid(s, 0.0)).collect();
        for c in all_checks(&rows) {
            assert!(c.pass, "{}: {}", c.key, c.detail);
        }
    }

    #[test]
    fn orderings_use_seed_means() {
        // one seed narrows LSSL-NODE over LSSL to 0.01; the mean gap stays above 0.03
        let mut rows: Vec<ResultRow> = (0..2).flat_map(|s| grid(s, 0.0)).collect();
        rows.extend(grid(2, 0.04));
        assert!(next_visit_order(&rows).pass);
        let rows: Vec<ResultRow> = grid(0, 0.04);
        assert!(!next_visit_order(&rows).pass);
    }

    #[test]
    fn majority_vote_and_missing_values() {
        let mut rows: Vec<ResultRow> = (0..3).flat_map(|s| grid(s, 0.0)).collect();
        for r in rows.iter_mut().filter(|r| r.seed == 0 && r.task == "norms" && r.model == m(Mode::Ae)) {
            r.value = 0.02;
        }
        assert!(norm_separation(&rows).pass);
        for r in rows.iter_mut().filter(|r| r.seed == 1 && r.task == "norms" && r.model == m(Mode::Ae)) {
            r.value = 0.02;
        }
        assert!(!norm_separation(&rows).pass);
        rows.retain(|r| r.task != "node_cls");
        assert!(!node_cls_order(&rows).pass);
        assert!(!alignment(&[]).pass);
    }
}
