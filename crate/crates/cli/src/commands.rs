//! The four subcommands. Each `run_*` function works on an in-memory
//! cohort; the `cmd_*` wrappers read and write the files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use lssl_core::eval::{evaluate_node_cls, finetune_age_regression, finetune_predict_next_visit, norm_groups, trajectory_norm_analysis, MetricsReport, Task};
use lssl_core::models::{init_bundle, new_encoder, Mode, ModelBundle, NodeClassifier};
use lssl_core::objectives::LossBreakdown;
use lssl_core::odesolve::SolverStats;
use lssl_core::synthdata::{generate_cohort, make_pair_dataset, make_sequence_dataset, read_jsonl, write_jsonl, Cohort, GeneratorConfig, Speed, Split};
use lssl_core::train::{EpochRecord, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::results::{append_rows, report_rows, rows_for, write_scores, Pretraining, ResultRow, HEADER, PRETRAIN_TASK};
use crate::summary::write_summary;

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const SPLITS_FILE: &str = "splits.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

const LOG_HEADER: &str = "epoch,lr,train_total,train_recon,train_direction,val_total,val_recon,val_direction,nfe,accepted,rejected";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_visits: usize,
    /// Subjects per split.
    pub splits: BTreeMap<String, usize>,
    pub fast_subjects: usize,
    /// Consecutive-visit pairs of subjects whose grade changes (the
    /// pretraining pair set), over all splits.
    pub pairs: usize,
    pub pairs_all: usize,
    pub sequence_subjects: usize,
    pub generator: GeneratorConfig,
}

impl Manifest {
    pub fn of(cohort: &Cohort) -> Result<Manifest> {
        let splits = Split::ALL.iter().map(|&s| (s.name().to_string(), cohort.subjects_in(s).count())).collect();
        Ok(Manifest {
            seed: cohort.seed,
            n_subjects: cohort.subjects.len(),
            n_visits: cohort.n_visits(),
            splits,
            fast_subjects: cohort.subjects.iter().filter(|s| s.speed == Speed::Fast).count(),
            pairs: make_pair_dataset(cohort, true)?.pairs.len(),
            pairs_all: make_pair_dataset(cohort, false)?.pairs.len(),
            sequence_subjects: make_sequence_dataset(cohort)?.subjects.len(),
            generator: cohort.config.clone(),
        })
    }
}

fn pretrain_dir(out: &Path, mode: Mode) -> PathBuf {
    out.join("pretrain").join(mode.name())
}

pub fn checkpoint_path(out: &Path, mode: Mode, which: &str) -> PathBuf {
    pretrain_dir(out, mode).join(which)
}

/// Writes `cohort.jsonl`, `splits.csv` and `manifest.json` into `cfg.out`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let cohort = generate_cohort(cfg.n_subjects, cfg.seed)?;
    write_cohort(&cohort, &cfg.out)
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let f = File::create(dir.join(COHORT_FILE))?;
    write_jsonl(&cohort.subjects, BufWriter::new(f))?;
    let mut splits = String::from("subject,split,speed,n_visits\n");
    for s in &cohort.subjects {
        let speed = if s.speed == Speed::Fast { "fast" } else { "slow" };
        splits.push_str(&format!("{},{},{speed},{}\n", s.id, s.split.name(), s.visits.len()));
    }
    std::fs::write(dir.join(SPLITS_FILE), splits)?;
    let manifest = Manifest::of(cohort)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a cohort written by [`write_cohort`]; the split file must agree
/// with the cohort rows.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?)?;
    let cpath = dir.join(COHORT_FILE);
    let subjects = read_jsonl(BufReader::new(File::open(&cpath).with_context(|| format!("opening {}", cpath.display()))?))?;
    let spath = dir.join(SPLITS_FILE);
    let splits = std::fs::read_to_string(&spath).with_context(|| format!("missing split file {}", spath.display()))?;
    let listed: Vec<(usize, String)> = splits
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut f = l.split(',');
            let id = f.next().unwrap_or_default().parse().with_context(|| format!("bad split row '{l}'"))?;
            Ok((id, f.next().unwrap_or_default().to_string()))
        })
        .collect::<Result<_>>()?;
    ensure!(listed.len() == subjects.len(), "split file lists {} subjects, cohort has {}", listed.len(), subjects.len());
    for (s, (id, split)) in subjects.iter().zip(&listed) {
        ensure!(s.id == *id && s.split.name() == split, "split file disagrees with cohort at subject {}", s.id);
    }
    ensure!(subjects.len() == manifest.n_subjects, "manifest lists {} subjects, cohort has {}", manifest.n_subjects, subjects.len());
    for split in Split::ALL {
        ensure!(subjects.iter().any(|s| s.split == split), "cohort has no {} subjects", split.name());
    }
    Ok(Cohort { seed: manifest.seed, config: manifest.generator, subjects })
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn log_line(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.train.total,
        opt_field(r.train.recon),
        opt_field(r.train.direction),
        r.val.total,
        opt_field(r.val.recon),
        opt_field(r.val.direction),
        r.solver.nfe,
        r.solver.accepted,
        r.solver.rejected
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub bundle: ModelBundle,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl PretrainOutcome {
    /// End-of-training losses as result rows.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let Some(last) = self.records.last() else { return Vec::new() };
        let mut out = vec![("epochs".to_string(), last.epoch as f64), ("train_total".into(), last.train.total), ("val_total".into(), last.val.total)];
        if let Some(r) = last.val.recon {
            out.push(("val_recon".into(), r));
        }
        if let Some(c) = last.val.direction {
            out.push(("val_cosine".into(), c));
        }
        out.push(("best_epoch".into(), self.best_epoch as f64));
        out
    }
}

/// Pretrains `cfg.mode` on the grade-change pairs, writing the log and
/// checkpoints under `out/pretrain/<mode>/`. With `resume`, continues from
/// `last.ckpt` when one exists.
pub fn run_pretrain(cfg: &ExperimentConfig, cohort: &Cohort, resume: bool, quiet: bool) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pairs = make_pair_dataset(cohort, true)?;
    let train = pairs.in_split(cohort, Split::Train);
    let val = pairs.in_split(cohort, Split::Val);
    ensure!(!train.is_empty(), "no training pairs");
    let dir = pretrain_dir(&cfg.out, cfg.mode);
    std::fs::create_dir_all(&dir)?;
    let last_path = dir.join(LAST_CKPT);
    let log_path = dir.join(LOG_FILE);

    let mut trainer = if resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        ensure!(ck.config.hash("") == cfg.hash(""), "{} was written under different settings", last_path.display());
        let bundle = ck.bundle()?;
        let opt = ck.optimizer(&bundle)?.context("checkpoint has no optimizer state to resume from")?;
        let kept: Vec<String> = std::fs::read_to_string(&log_path)?.lines().skip(1).take(ck.epoch).map(str::to_string).collect();
        ensure!(kept.len() == ck.epoch, "training log is shorter than the checkpoint's {} epochs", ck.epoch);
        std::fs::write(&log_path, format!("{LOG_HEADER}\n{}", kept.iter().map(|l| format!("{l}\n")).collect::<String>()))?;
        Trainer::resume(bundle, opt, ck.epoch, cfg.pretrain(), train.len())
    } else {
        std::fs::write(&log_path, format!("{LOG_HEADER}\n"))?;
        Trainer::new(init_bundle(cfg.mode, cfg.seed), cfg.pretrain(), train.len())
    };
    let mut best = best_from_log(&log_path)?;

    while !trainer.finished() {
        let rec = trainer
            .run_epoch(cohort, &train, &val)
            .map_err(|e| anyhow::anyhow!("{} epoch {} failed: {e}; last good checkpoint kept at {}", cfg.mode, trainer.epoch + 1, last_path.display()))?;
        if !(rec.train.total.is_finite() && rec.val.total.is_finite()) {
            bail!("{} epoch {}: non-finite loss; last good checkpoint kept at {}", cfg.mode, rec.epoch, last_path.display());
        }
        let mut log = std::fs::OpenOptions::new().append(true).open(&log_path)?;
        writeln!(log, "{}", log_line(&rec))?;
        Checkpoint::from_training(cfg, &trainer.bundle, Some(&trainer.opt), trainer.epoch).save(&last_path)?;
        if best.is_none_or(|(_, v)| rec.val.total < v) {
            best = Some((rec.epoch, rec.val.total));
            Checkpoint::from_training(cfg, &trainer.bundle, None, trainer.epoch).save(&dir.join(BEST_CKPT))?;
        }
        if !quiet {
            eprintln!(
                "[{} seed {}] epoch {}/{} train {:.5} val {:.5}{}",
                cfg.mode,
                cfg.seed,
                rec.epoch,
                cfg.epochs,
                rec.train.total,
                rec.val.total,
                rec.val.direction.map_or(String::new(), |c| format!(" cos {c:.4}"))
            );
        }
    }
    Checkpoint::from_training(cfg, &trainer.bundle, None, trainer.epoch).save(&dir.join(FINAL_CKPT))?;
    // the log also covers epochs from before a resume
    let records = read_log(&log_path)?;
    Ok(PretrainOutcome { bundle: trainer.bundle, records, best_epoch: best.map_or(0, |b| b.0) })
}

fn best_from_log(path: &Path) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for r in read_log(path)? {
        if best.is_none_or(|(_, v)| r.val.total < v) {
            best = Some((r.epoch, r.val.total));
        }
    }
    Ok(best)
}

/// Parses a training log back into epoch records.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 11, "bad log line '{line}'");
        let opt = |s: &str| -> Result<Option<f64>> { Ok(if s.is_empty() { None } else { Some(s.parse()?) }) };
        let mut r = EpochRecord {
            epoch: f[0].parse()?,
            lr: f[1].parse()?,
            train: LossBreakdown::default(),
            val: LossBreakdown::default(),
            solver: SolverStats::default(),
        };
        r.train.total = f[2].parse()?;
        r.train.recon = opt(f[3])?;
        r.train.direction = opt(f[4])?;
        r.val.total = f[5].parse()?;
        r.val.recon = opt(f[6])?;
        r.val.direction = opt(f[7])?;
        r.solver.nfe = f[8].parse()?;
        r.solver.accepted = f[9].parse()?;
        r.solver.rejected = f[10].parse()?;
        out.push(r);
    }
    Ok(out)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, cohort_dir: &Path, resume: bool) -> Result<PretrainOutcome> {
    let cohort = load_cohort(cohort_dir)?;
    let outcome = run_pretrain(cfg, &cohort, resume, false)?;
    append_rows(&cfg.out.join(RESULTS_FILE), &rows_for(Pretraining::Mode(cfg.mode), cfg, PRETRAIN_TASK, &outcome.metrics()))?;
    Ok(outcome)
}

/// Whether `task` applies to `model`; fails before any compute otherwise.
pub fn check_task(model: Pretraining, task: Task) -> Result<()> {
    match (model, task) {
        (Pretraining::Scratch, Task::Norms) => bail!("task norms needs a pretrained checkpoint"),
        (Pretraining::Mode(m), Task::NodeCls) if !m.is_node() => bail!("task node_cls needs NODE weights; checkpoint mode is {m}"),
        _ => Ok(()),
    }
}

/// The tasks the reproduction grid runs for `model`.
pub fn grid_tasks(model: Pretraining) -> Vec<Task> {
    Task::ALL.into_iter().filter(|&t| check_task(model, t).is_ok()).collect()
}

/// Runs one downstream task. `bundle` is `None` for the from-scratch row.
pub fn run_task(cfg: &ExperimentConfig, cohort: &Cohort, bundle: Option<&ModelBundle>, task: Task) -> Result<MetricsReport> {
    let model = bundle.map_or(Pretraining::Scratch, |b| Pretraining::Mode(b.mode));
    check_task(model, task)?;
    let ft = cfg.finetune();
    let encoder = || bundle.map_or_else(|| new_encoder(cfg.seed), |b| b.encoder.clone());
    let report = match task {
        Task::Age => finetune_age_regression(encoder(), cohort, &make_sequence_dataset(cohort)?, &ft)?,
        Task::NextVisit => finetune_predict_next_visit(encoder(), cohort, &make_sequence_dataset(cohort)?, &ft)?,
        Task::NodeCls => {
            let model = match bundle {
                Some(b) => NodeClassifier::from_bundle(b, cfg.seed)?,
                None => NodeClassifier::scratch(cfg.seed),
            };
            evaluate_node_cls(model, cohort, &make_pair_dataset(cohort, true)?, &ft)?
        }
        Task::Norms => {
            let b = bundle.context("norms needs a bundle")?;
            let start = Instant::now();
            let (fast, slow) = norm_groups(cohort, cfg.norm_group_size, cfg.seed);
            let (analysis, stats) = trajectory_norm_analysis(b, cohort, &fast, &slow, &cfg.solver())?;
            analysis.report(cfg.seed, start.elapsed().as_secs_f64(), b.mode.is_node().then_some(stats))
        }
    };
    Ok(report)
}

fn scores_path(out: &Path, model: Pretraining, task: Task) -> PathBuf {
    out.join("scores").join(format!("{}_{}.csv", model.name(), task.name()))
}

fn dump_scores(out: &Path, model: Pretraining, report: &MetricsReport) -> Result<()> {
    if let Some(s) = &report.scores {
        let path = scores_path(out, model, report.task);
        std::fs::create_dir_all(path.parent().expect("scores dir"))?;
        write_scores(&path, s)?;
    }
    Ok(())
}

/// Evaluates a checkpoint (or the scratch baseline when `checkpoint` is
/// `None`) on `tasks`, appending to `out/results.csv`. Pretraining
/// settings come from the checkpoint; fine-tuning settings from `cfg`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, cohort_dir: &Path, checkpoint: Option<&Path>, tasks: &[Task]) -> Result<Vec<MetricsReport>> {
    let (bundle, row_cfg) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let row_cfg = ExperimentConfig {
                mode: ck.mode,
                lambda_recon: ck.config.lambda_recon,
                lambda_dir: ck.config.lambda_dir,
                node: ck.config.node,
                epochs: ck.config.epochs,
                lr: ck.config.lr,
                weight_decay: ck.config.weight_decay,
                batch_size: ck.config.batch_size,
                ..cfg.clone()
            };
            (Some(ck.bundle()?), row_cfg)
        }
        None => (None, cfg.clone()),
    };
    let model = bundle.as_ref().map_or(Pretraining::Scratch, |b| Pretraining::Mode(b.mode));
    for &t in tasks {
        check_task(model, t)?;
    }
    let cohort = load_cohort(cohort_dir)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut reports = Vec::new();
    for &t in tasks {
        let report = run_task(&row_cfg, &cohort, bundle.as_ref(), t)?;
        append_rows(&cfg.out.join(RESULTS_FILE), &report_rows(model, &row_cfg, &report))?;
        dump_scores(&cfg.out, model, &report)?;
        eprintln!("[{model} seed {}] {t}: {}", cfg.seed, fmt_metrics(&report));
        reports.push(report);
    }
    Ok(reports)
}

fn fmt_metrics(r: &MetricsReport) -> String {
    r.metrics.iter().take(9).map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Output of one grid cell.
struct CellOutput {
    rows: Vec<ResultRow>,
    timings: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug)]
enum Cell {
    Mode(Mode),
    Scratch(Task),
}

fn run_cell(base: &ExperimentConfig, cohort: &Cohort, cell: Cell) -> Result<CellOutput> {
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    match cell {
        Cell::Mode(mode) => {
            let cfg = base.with_mode(mode);
            let model = Pretraining::Mode(mode);
            let start = Instant::now();
            let outcome = run_pretrain(&cfg, cohort, false, true)?;
            timings.push((format!("{mode}/pretrain"), start.elapsed().as_secs_f64()));
            eprintln!("[{mode} seed {}] pretrained in {:.1}s: {:?}", cfg.seed, start.elapsed().as_secs_f64(), outcome.metrics());
            rows.extend(rows_for(model, &cfg, PRETRAIN_TASK, &outcome.metrics()));
            for task in grid_tasks(model) {
                let start = Instant::now();
                let report = run_task(&cfg, cohort, Some(&outcome.bundle), task)?;
                timings.push((format!("{mode}/{task}"), start.elapsed().as_secs_f64()));
                eprintln!("[{mode} seed {}] {task}: {}", cfg.seed, fmt_metrics(&report));
                dump_scores(&cfg.out, model, &report)?;
                rows.extend(report_rows(model, &cfg, &report));
            }
        }
        Cell::Scratch(task) => {
            let start = Instant::now();
            let report = run_task(base, cohort, None, task)?;
            timings.push((format!("scratch/{task}"), start.elapsed().as_secs_f64()));
            eprintln!("[scratch seed {}] {task}: {}", base.seed, fmt_metrics(&report));
            dump_scores(&base.out, Pretraining::Scratch, &report)?;
            rows.extend(report_rows(Pretraining::Scratch, base, &report));
        }
    }
    Ok(CellOutput { rows, timings })
}

#[derive(Clone, Debug)]
pub struct ReproduceOutcome {
    pub manifest: Manifest,
    pub rows: Vec<ResultRow>,
    pub results: PathBuf,
    pub summary: PathBuf,
}

/// generate → pretrain every mode → evaluate every applicable task, then
/// `results.csv` (rewritten, in grid order) and `summary.md`. Cells run on
/// `jobs` worker threads; each owns its models, so the output does not
/// depend on `jobs`.
pub fn cmd_reproduce(cfg: &ExperimentConfig, jobs: usize) -> Result<ReproduceOutcome> {
    cfg.validate()?;
    let manifest = cmd_generate(cfg)?;
    let cohort = load_cohort(&cfg.out)?;
    let mut cells: Vec<Cell> = grid_tasks(Pretraining::Scratch).into_iter().map(Cell::Scratch).collect();
    cells.extend(Mode::ALL.map(Cell::Mode));
    // longest cells first so workers finish together
    cells.sort_by_key(|c| match c {
        Cell::Mode(m) if m.is_node() => 0,
        Cell::Mode(_) => 1,
        Cell::Scratch(_) => 2,
    });
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellOutput>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let out = run_cell(cfg, &cohort, cell);
                let failed = out.is_err();
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(out);
                if failed {
                    next.store(cells.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut by_model: BTreeMap<Pretraining, Vec<ResultRow>> = BTreeMap::new();
    let mut timings = Vec::new();
    for (cell, slot) in cells.iter().zip(slots.into_inner().expect("workers joined")) {
        let out = slot.with_context(|| format!("cell {cell:?} did not run"))??;
        for r in out.rows {
            by_model.entry(r.model).or_default().push(r);
        }
        timings.extend(out.timings);
    }
    let task_rank = |t: &str| ["pretrain", "age", "next_visit", "norms", "node_cls"].iter().position(|&x| x == t).unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    for model in Pretraining::GRID {
        let mut part = by_model.remove(&model).unwrap_or_default();
        part.sort_by_key(|r| task_rank(&r.task));
        rows.extend(part);
    }
    let results = cfg.out.join(RESULTS_FILE);
    let mut text = format!("{HEADER}\n");
    rows.iter().for_each(|r| text.push_str(&(r.to_csv() + "\n")));
    std::fs::write(&results, text)?;
    timings.sort_by(|a, b| a.0.cmp(&b.0));
    let tt: String = timings.iter().map(|(k, v)| format!("{k},{v:.2}\n")).collect();
    std::fs::write(cfg.out.join(TIMINGS_FILE), format!("cell,seconds\n{tt}"))?;
    let summary = cfg.out.join(SUMMARY_FILE);
    write_summary(&summary, &manifest, &rows)?;
    Ok(ReproduceOutcome { manifest, rows, results, summary })
}
