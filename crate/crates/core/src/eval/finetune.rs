//! Fine-tuning loops for the downstream tasks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, AdamW, Graph, OneCycle, Tensor, Var};
use crate::models::{AgeRegressor, Mlp, ModelBundle, ModelError, NextVisitModel, NodeClassifier, N_GRADES};
use crate::objectives::PairBatch;
use crate::odesolve::{GradientMode, SolverConfig, SolverStats};
use crate::synthdata::{Cohort, DataError, PairDataset, PairRef, SequenceDataset, Speed, Split};
use crate::train::epoch_batches;

use super::stats::{auc_triplet, welch_one_sided, GroupNormStats, WelchTest};
use super::{EvalError, GradeScores, MetricsReport, Task};

/// Age targets are regressed as `(age − AGE_CENTER) / AGE_SCALE`.
const AGE_CENTER: f64 = 50.0;
const AGE_SCALE: f64 = 25.0;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub grad_mode: GradientMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, weight_decay: 1e-4, batch_size: 32, seed: 0, solver: SolverConfig::default(), grad_mode: GradientMode::Adjoint }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(EvalError::Config(format!("epochs {}, batch {}, lr {}, weight decay {}", self.epochs, self.batch_size, self.lr, self.weight_decay)));
        }
        self.solver.validate().map_err(|e| EvalError::Config(e.to_string()))
    }
}

pub(super) trait Tunable {
    fn sizes(&self) -> Vec<usize>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn bind(&self, g: &Graph, trainable: bool) -> Result<Vec<Var>, ModelError>;
}

macro_rules! tunable {
    ($t:ty) => {
        impl Tunable for $t {
            fn sizes(&self) -> Vec<usize> {
                self.param_sizes()
            }
            fn params_mut(&mut self) -> Vec<&mut Tensor> {
                <$t>::params_mut(self)
            }
            fn bind(&self, g: &Graph, trainable: bool) -> Result<Vec<Var>, ModelError> {
                <$t>::bind(self, g, trainable)
            }
        }
    };
}

tunable!(AgeRegressor);
tunable!(NextVisitModel);
tunable!(NodeClassifier);

/// Minibatch AdamW with a one-cycle schedule over `n` training rows.
/// `loss` builds the batch loss on a fresh graph.
pub(super) fn fit<M, L>(model: &mut M, split: Split, n: usize, cfg: &FinetuneConfig, salt: u64, mut loss: L) -> Result<(), EvalError>
where
    M: Tunable,
    L: FnMut(&M, &Graph, &[Var], &[usize]) -> Result<Var, EvalError>,
{
    if split != Split::Train {
        return Err(EvalError::Leakage(split));
    }
    if n == 0 {
        return Err(EvalError::Empty("fine-tuning"));
    }
    cfg.validate()?;
    let mut opt = AdamW::new(&model.sizes(), cfg.weight_decay);
    let total = cfg.epochs * n.div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.lr, total);
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(n, cfg.batch_size, cfg.seed ^ salt, epoch) {
            let g = Graph::new();
            let vars = model.bind(&g, true)?;
            let l = loss(model, &g, &vars, &idx)?;
            if !g.item(l).is_finite() {
                return Err(EvalError::NonFinite(epoch + 1));
            }
            let mut grads = g.backward(l)?;
            let sizes = model.sizes();
            let flat: Vec<Vec<f64>> = vars.iter().zip(sizes).map(|(v, n)| grads.take(*v).unwrap_or_else(|| vec![0.0; n])).collect();
            let lr = schedule.lr(opt.step_count() as usize);
            opt.step(model.params_mut(), &flat, lr)?;
        }
    }
    Ok(())
}

/// Rows drawn from subjects of a single split.
struct Rows {
    split: Split,
    dim: usize,
    x: Vec<f64>,
}

impl Rows {
    fn len(&self) -> usize {
        self.x.len() / self.dim.max(1)
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor, EvalError> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        Ok(Tensor::matrix(idx.len(), self.dim, out)?)
    }
}

fn input_dim(cohort: &Cohort) -> usize {
    cohort.subjects.first().and_then(|s| s.visits.first()).map_or(0, |v| v.x.len())
}

fn visit_rows(cohort: &Cohort, subjects: &[usize], split: Split) -> Result<(Rows, Vec<f64>), EvalError> {
    SequenceDataset::check_split(cohort, subjects, split)?;
    let mut rows = Rows { split, dim: input_dim(cohort), x: Vec::new() };
    let mut ages = Vec::new();
    for &s in subjects {
        for v in &cohort.subjects[s].visits {
            rows.x.extend_from_slice(&v.x);
            ages.push(v.age);
        }
    }
    Ok((rows, ages))
}

/// MSE in squared years of normalised predictions against ages.
pub(crate) fn age_mse(pred: &[f64], ages: &[f64]) -> f64 {
    let se: f64 = pred.iter().zip(ages).map(|(p, a)| (AGE_CENTER + AGE_SCALE * p - a).powi(2)).sum();
    se / ages.len().max(1) as f64
}

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Fine-tunes `encoder` plus an MLP head to regress age from one visit;
/// reports test-split MSE in squared years.
pub fn finetune_age_regression(encoder: Mlp, cohort: &Cohort, data: &SequenceDataset, cfg: &FinetuneConfig) -> Result<MetricsReport, EvalError> {
    let start = Instant::now();
    let (train, ages) = visit_rows(cohort, &data.in_split(cohort, Split::Train), Split::Train)?;
    let targets: Vec<f64> = ages.iter().map(|a| (a - AGE_CENTER) / AGE_SCALE).collect();
    let mut model = AgeRegressor::new(encoder, cfg.seed);
    fit(&mut model, train.split, train.len(), cfg, 0xA6E, |m, g, vars, idx| {
        let x = g.constant(train.gather(idx)?)?;
        let pred = m.forward(g, vars, x)?;
        let y = g.constant(Tensor::matrix(idx.len(), 1, idx.iter().map(|&i| targets[i]).collect())?)?;
        Ok(g.mse(pred, y)?)
    })?;

    let (test, test_ages) = visit_rows(cohort, &data.in_split(cohort, Split::Test), Split::Test)?;
    if test.len() == 0 {
        return Err(EvalError::Empty("age regression test split"));
    }
    let mut preds = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let vars = model.bind(&g, false)?;
        let x = g.constant(test.gather(chunk)?)?;
        let pred = g.data(model.forward(&g, &vars, x)?);
        preds.extend(pred);
    }
    Ok(MetricsReport {
        task: Task::Age,
        seed: cfg.seed,
        metrics: vec![("mse".into(), age_mse(&preds, &test_ages))],
        wall_time_s: seconds(start),
        solver: None,
        scores: None,
    })
}

/// Sliding windows of `HISTORY` visits and the grade of the visit after.
struct Windows {
    steps: Vec<Rows>,
    labels: Vec<usize>,
}

fn windows(cohort: &Cohort, subjects: &[usize], split: Split) -> Result<Windows, EvalError> {
    SequenceDataset::check_split(cohort, subjects, split)?;
    let h = NextVisitModel::HISTORY;
    let dim = input_dim(cohort);
    let mut steps: Vec<Rows> = (0..h).map(|_| Rows { split, dim, x: Vec::new() }).collect();
    let mut labels = Vec::new();
    for &s in subjects {
        let v = &cohort.subjects[s].visits;
        for k in 0..v.len().saturating_sub(h) {
            for (j, rows) in steps.iter_mut().enumerate() {
                rows.x.extend_from_slice(&v[k + j].x);
            }
            labels.push(v[k + h].grade);
        }
    }
    Ok(Windows { steps, labels })
}

fn to_scores(probs: &[f64], labels: Vec<usize>) -> GradeScores {
    let probs = probs
        .chunks(N_GRADES)
        .map(|p| {
            let mut a = [0.0; N_GRADES];
            a.copy_from_slice(p);
            a
        })
        .collect();
    GradeScores { labels, probs }
}

fn softmax_rows(logits: &[f64]) -> Vec<f64> {
    logits.chunks(N_GRADES).flat_map(softmax).collect()
}

/// Fine-tunes `encoder` plus an LSTM on three consecutive visits to
/// classify the grade of the following visit; reports the AUC triplet on
/// the test split.
pub fn finetune_predict_next_visit(encoder: Mlp, cohort: &Cohort, data: &SequenceDataset, cfg: &FinetuneConfig) -> Result<MetricsReport, EvalError> {
    let start = Instant::now();
    let train = windows(cohort, &data.in_split(cohort, Split::Train), Split::Train)?;
    let mut model = NextVisitModel::new(encoder, cfg.seed);
    fit(&mut model, train.steps[0].split, train.labels.len(), cfg, 0x4E7, |m, g, vars, idx| {
        let xs = train.steps.iter().map(|r| Ok(g.constant(r.gather(idx)?)?)).collect::<Result<Vec<_>, EvalError>>()?;
        let logits = m.forward(g, vars, &xs)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        Ok(g.cross_entropy(logits, &labels)?)
    })?;

    let test = windows(cohort, &data.in_split(cohort, Split::Test), Split::Test)?;
    if test.labels.is_empty() {
        return Err(EvalError::Empty("next-visit test split"));
    }
    let mut probs = Vec::new();
    let all: Vec<usize> = (0..test.labels.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let vars = model.bind(&g, false)?;
        let xs = test.steps.iter().map(|r| Ok(g.constant(r.gather(chunk)?)?)).collect::<Result<Vec<_>, EvalError>>()?;
        probs.extend(softmax_rows(&g.data(model.forward(&g, &vars, &xs)?)));
    }
    let scores = to_scores(&probs, test.labels);
    Ok(MetricsReport { task: Task::NextVisit, seed: cfg.seed, metrics: auc_triplet(&scores)?, wall_time_s: seconds(start), solver: None, scores: Some(scores) })
}

/// Fine-tunes a NODE classifier on `(x_i, Δt) → grade_j` pairs; reports the
/// AUC triplet on the test split.
pub fn evaluate_node_cls(mut model: NodeClassifier, cohort: &Cohort, data: &PairDataset, cfg: &FinetuneConfig) -> Result<MetricsReport, EvalError> {
    let start = Instant::now();
    let train = data.in_split(cohort, Split::Train);
    PairDataset::check_split(cohort, &train, Split::Train)?;
    let label = |p: &PairRef| cohort.subjects[p.subject].visits[p.visit + 1].grade;
    let mut stats = SolverStats::default();
    fit(&mut model, Split::Train, train.len(), cfg, 0xC15, |m, g, vars, idx| {
        let refs: Vec<PairRef> = idx.iter().map(|&i| train[i]).collect();
        let batch = PairBatch::from_pairs(cohort, &refs).map_err(|e| EvalError::Config(e.to_string()))?;
        let x = g.constant(batch.x_i)?;
        let (logits, st) = m.forward(g, vars, x, &batch.dts, &cfg.solver, cfg.grad_mode)?;
        stats.merge(&st);
        let labels: Vec<usize> = refs.iter().map(label).collect();
        Ok(g.cross_entropy(logits, &labels)?)
    })?;

    let test = data.in_split(cohort, Split::Test);
    PairDataset::check_split(cohort, &test, Split::Test)?;
    if test.is_empty() {
        return Err(EvalError::Empty("node classifier test split"));
    }
    let mut probs = Vec::new();
    for chunk in test.chunks(EVAL_CHUNK) {
        let batch = PairBatch::from_pairs(cohort, chunk).map_err(|e| EvalError::Config(e.to_string()))?;
        let g = Graph::new();
        let vars = model.bind(&g, false)?;
        let x = g.constant(batch.x_i)?;
        let (logits, st) = model.forward(&g, &vars, x, &batch.dts, &cfg.solver, cfg.grad_mode)?;
        stats.merge(&st);
        probs.extend(softmax_rows(&g.data(logits)));
    }
    let scores = to_scores(&probs, test.iter().map(label).collect());
    Ok(MetricsReport {
        task: Task::NodeCls,
        seed: cfg.seed,
        metrics: auc_triplet(&scores)?,
        wall_time_s: seconds(start),
        solver: Some(stats),
        scores: Some(scores),
    })
}

/// Up to `per_group` consecutive-visit pairs per speed class, drawn from
/// validation and test subjects whose grade changes during follow-up.
pub fn norm_groups(cohort: &Cohort, per_group: usize, seed: u64) -> (Vec<PairRef>, Vec<PairRef>) {
    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for (i, s) in cohort.subjects.iter().enumerate() {
        if s.split == Split::Train || !s.has_grade_change() {
            continue;
        }
        let group = if s.speed == Speed::Fast { &mut fast } else { &mut slow };
        group.extend((0..s.visits.len() - 1).map(|v| PairRef { subject: i, visit: v }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x0A0B);
    for g in [&mut fast, &mut slow] {
        g.shuffle(&mut rng);
        g.truncate(per_group);
        g.sort();
    }
    (fast, slow)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormAnalysis {
    pub fast: GroupNormStats,
    pub slow: GroupNormStats,
    pub test: WelchTest,
    /// The same analysis on `‖z_node − z_i‖` for NODE bundles.
    pub node: Option<(GroupNormStats, GroupNormStats, WelchTest)>,
}

impl NormAnalysis {
    pub fn report(&self, seed: u64, wall_time_s: f64, solver: Option<SolverStats>) -> MetricsReport {
        let mut metrics = Vec::new();
        let mut push = |prefix: &str, f: &GroupNormStats, s: &GroupNormStats, t: &WelchTest| {
            for (k, v) in [
                ("fast_n", f.n as f64),
                ("fast_mean", f.mean),
                ("fast_std", f.std),
                ("slow_n", s.n as f64),
                ("slow_mean", s.mean),
                ("slow_std", s.std),
                ("t", t.t),
                ("df", t.df),
                ("p", t.p),
            ] {
                metrics.push((format!("{prefix}{k}"), v));
            }
        };
        push("", &self.fast, &self.slow, &self.test);
        if let Some((f, s, t)) = &self.node {
            push("node_", f, s, t);
        }
        MetricsReport { task: Task::Norms, seed, metrics, wall_time_s, solver, scores: None }
    }
}

fn norms(v: &Tensor) -> Vec<f64> {
    (0..v.rows()).map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// `‖Δz‖` per pair for both groups with a one-sided Welch test of
/// fast > slow; NODE bundles also report `‖Δz_node‖`.
pub fn trajectory_norm_analysis(
    bundle: &ModelBundle,
    cohort: &Cohort,
    fast: &[PairRef],
    slow: &[PairRef],
    solver: &SolverConfig,
) -> Result<(NormAnalysis, SolverStats), EvalError> {
    if let Some(p) = fast.iter().chain(slow).find(|p| cohort.subjects[p.subject].split == Split::Train) {
        let id = cohort.subjects[p.subject].id;
        return Err(DataError::Leakage { subject: id, expected: Split::Test, found: Split::Train }.into());
    }
    let mut stats = SolverStats::default();
    let mut per_group = |pairs: &[PairRef]| -> Result<(Vec<f64>, Vec<f64>), EvalError> {
        let (mut plain, mut node) = (Vec::new(), Vec::new());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let batch = PairBatch::from_pairs(cohort, chunk).map_err(|e| EvalError::Config(e.to_string()))?;
            let g = Graph::new();
            let v = bundle.bind(&g, false)?;
            let xi = g.constant(batch.x_i.clone())?;
            let xj = g.constant(batch.x_j.clone())?;
            let (_, _, dz) = bundle.encode_pair(&g, &v, xi, xj)?;
            plain.extend(norms(&g.value(dz)));
            if bundle.mode.is_node() {
                let (_, _, dzn, st) = bundle.encode_predict_next(&g, &v, xi, &batch.dts, solver, GradientMode::Adjoint)?;
                stats.merge(&st);
                node.extend(norms(&g.value(dzn)));
            }
        }
        Ok((plain, node))
    };
    let (fp, fnode) = per_group(fast)?;
    let (sp, snode) = per_group(slow)?;
    let f = GroupNormStats::from_values("fast", &fp)?;
    let s = GroupNormStats::from_values("slow", &sp)?;
    let test = welch_one_sided(&f, &s);
    let node = if bundle.mode.is_node() {
        let f = GroupNormStats::from_values("fast", &fnode)?;
        let s = GroupNormStats::from_values("slow", &snode)?;
        let t = welch_one_sided(&f, &s);
        Some((f, s, t))
    } else {
        None
    };
    Ok((NormAnalysis { fast: f, slow: s, test, node }, stats))
}
