//! Markdown summary of one reproduction run.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use lssl_core::eval::AUC_METRICS;
use lssl_core::models::Mode;

use crate::checks::all_checks;
use crate::commands::Manifest;
use crate::results::{value, Pretraining, ResultRow, PRETRAIN_TASK};

fn cell(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) if v.is_nan() => "n/a".into(),
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

fn pval(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |p| format!("{p:.2e}"))
}

pub fn render(manifest: &Manifest, rows: &[ResultRow]) -> String {
    let seed = manifest.seed;
    let get = |p, task: &str, metric: &str| value(rows, seed, p, task, metric);
    let pretrained = || Pretraining::GRID.into_iter().filter(|p| *p != Pretraining::Scratch);
    let mut s = String::new();
    let _ = writeln!(s, "# Synthetic-cohort reproduction, seed {seed}\n");
    let _ = writeln!(
        s,
        "{} subjects ({} train / {} val / {} test), {} visits, {} grade-change pairs.\n",
        manifest.n_subjects,
        manifest.splits.get("train").copied().unwrap_or(0),
        manifest.splits.get("val").copied().unwrap_or(0),
        manifest.splits.get("test").copied().unwrap_or(0),
        manifest.n_visits,
        manifest.pairs
    );

    let _ = writeln!(s, "## Pretraining (final epoch, validation pairs)\n");
    let _ = writeln!(s, "| Model | Epochs | Loss | Reconstruction | cos(dz, tau) |\n|---|---|---|---|---|");
    for p in pretrained() {
        let g = |m| get(p, PRETRAIN_TASK, m);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            p.label(),
            cell(g("epochs"), 0),
            cell(g("val_total"), 4),
            cell(g("val_recon"), 4),
            cell(g("val_cosine"), 4)
        );
    }

    let _ = writeln!(s, "\n## Age regression (test MSE, years squared)\n");
    let _ = writeln!(s, "| Model | MSE |\n|---|---|");
    for p in Pretraining::GRID {
        let _ = writeln!(s, "| {} | {} |", p.label(), cell(get(p, "age", "mse"), 2));
    }

    let _ = writeln!(s, "\n## Next-visit grade prediction (test AUC)\n");
    let _ = writeln!(s, "| Model | Mild+ | Moderate+ | Severe+ |\n|---|---|---|---|");
    for p in Pretraining::GRID {
        let a: Vec<String> = AUC_METRICS.iter().map(|m| cell(get(p, "next_visit", m), 3)).collect();
        let _ = writeln!(s, "| {} | {} |", p.label(), a.join(" | "));
    }

    let _ = writeln!(s, "\n## Trajectory norms, fast vs slow progressors (one-sided Welch test)\n");
    let _ = writeln!(s, "| Model | Fast mean (sd) | Slow mean (sd) | t | p | NODE p |\n|---|---|---|---|---|---|");
    for p in pretrained() {
        let g = |m| get(p, "norms", m);
        let _ = writeln!(
            s,
            "| {} | {} ({}) | {} ({}) | {} | {} | {} |",
            p.label(),
            cell(g("fast_mean"), 3),
            cell(g("fast_std"), 3),
            cell(g("slow_mean"), 3),
            cell(g("slow_std"), 3),
            cell(g("t"), 2),
            pval(g("p")),
            pval(g("node_p"))
        );
    }

    let _ = writeln!(s, "\n## NODE classifier (test AUC)\n");
    let _ = writeln!(s, "| Model | Mild+ | Moderate+ | Severe+ |\n|---|---|---|---|");
    for p in [Pretraining::Scratch, Pretraining::Mode(Mode::AeNode), Pretraining::Mode(Mode::LsslNode), Pretraining::Mode(Mode::SLsslNode)] {
        let a: Vec<String> = AUC_METRICS.iter().map(|m| cell(get(p, "node_cls", m), 3)).collect();
        let _ = writeln!(s, "| {} | {} |", p.label(), a.join(" | "));
    }

    let _ = writeln!(s, "\n## Directional checks (this seed)\n");
    let _ = writeln!(s, "| Check | Result | Values |\n|---|---|---|");
    for c in all_checks(rows) {
        let _ = writeln!(s, "| {} | {} | {} |", c.title, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    s
}

pub fn write_summary(path: &Path, manifest: &Manifest, rows: &[ResultRow]) -> Result<()> {
    std::fs::write(path, render(manifest, rows)).with_context(|| format!("writing {}", path.display()))
}
