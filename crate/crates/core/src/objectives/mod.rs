//! Pretraining losses.
//!
//! `total = λ_recon·(mse(x_i, g(z_i)) + mse(x_j, g(ẑ_j))) − λ_dir·mean cos(Δz, τ)`
//! where `ẑ_j` and `Δz` come from the second encoder pass, or from the
//! latent flow of the first visit in the NODE variants. A term whose weight
//! is zero is not built at all, so its parameters receive exactly zero
//! gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::models::{BundleVars, Mode, ModelBundle, ModelError};
use crate::odesolve::{GradientMode, SolverConfig, SolverStats};
use crate::synthdata::{Cohort, PairRef};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("{loss} does not apply to mode {mode}")]
    ModeMismatch { loss: &'static str, mode: Mode },
    #[error("empty batch")]
    EmptyBatch,
    #[error("negative elapsed time {0}")]
    NegativeTime(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub dir: f64,
}

impl LossWeights {
    pub fn new(recon: f64, dir: f64) -> Result<Self, ObjectiveError> {
        if !(recon.is_finite() && dir.is_finite()) || recon < 0.0 || dir < 0.0 {
            return Err(ObjectiveError::Weights(format!("λ_recon={recon}, λ_dir={dir} must be finite and non-negative")));
        }
        if recon == 0.0 && dir == 0.0 {
            return Err(ObjectiveError::Weights("λ_recon and λ_dir cannot both be zero".into()));
        }
        Ok(Self { recon, dir })
    }

    pub fn for_mode(mode: Mode) -> Self {
        let (recon, dir) = mode.default_weights();
        Self { recon, dir }
    }
}

/// Loss value and its parts; a part is `None` when its term was not built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum of the two reconstruction errors.
    pub recon: Option<f64>,
    /// Batch-mean cosine between trajectory and τ.
    pub direction: Option<f64>,
    pub batch: usize,
}

impl LossBreakdown {
    /// Size-weighted mean of several batches.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n: usize = parts.iter().map(|p| p.batch).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let mut acc = 0.0;
            for p in parts {
                acc += f(p)? * p.batch as f64;
            }
            Some(acc / n as f64)
        };
        LossBreakdown { total: avg(&|p| Some(p.total)).unwrap_or(0.0), recon: avg(&|p| p.recon), direction: avg(&|p| p.direction), batch: n }
    }
}

/// Stacked consecutive-visit pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_i: Tensor,
    pub x_j: Tensor,
    /// Elapsed years between the two visits.
    pub dts: Vec<f64>,
}

impl PairBatch {
    pub fn new(x_i: Tensor, x_j: Tensor, dts: Vec<f64>) -> Result<Self, ObjectiveError> {
        if x_i.shape() != x_j.shape() || x_i.shape().len() != 2 || dts.len() != x_i.rows() {
            return Err(AutodiffError::Shape(format!("pair batch {:?} / {:?} with {} times", x_i.shape(), x_j.shape(), dts.len())).into());
        }
        if x_i.rows() == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if let Some(&dt) = dts.iter().find(|d| !(**d >= 0.0)) {
            return Err(ObjectiveError::NegativeTime(dt));
        }
        Ok(Self { x_i, x_j, dts })
    }

    pub fn from_pairs(cohort: &Cohort, pairs: &[PairRef]) -> Result<Self, ObjectiveError> {
        let d = cohort.subjects.first().and_then(|s| s.visits.first()).map_or(0, |v| v.x.len());
        let mut xi = Vec::with_capacity(pairs.len() * d);
        let mut xj = Vec::with_capacity(pairs.len() * d);
        let mut dts = Vec::with_capacity(pairs.len());
        for p in pairs {
            let v = &cohort.subjects[p.subject].visits;
            xi.extend_from_slice(&v[p.visit].x);
            xj.extend_from_slice(&v[p.visit + 1].x);
            dts.push(v[p.visit + 1].time - v[p.visit].time);
        }
        Self::new(Tensor::matrix(pairs.len(), d, xi)?, Tensor::matrix(pairs.len(), d, xj)?, dts)
    }

    pub fn len(&self) -> usize {
        self.dts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dts.is_empty()
    }
}

/// A loss recorded on a graph.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub stats: SolverStats,
}

fn assemble(
    g: &Graph,
    bundle: &ModelBundle,
    v: &BundleVars,
    x_i: Var,
    x_j: Var,
    z_i: Var,
    z_j: Var,
    dz: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let mut terms: Vec<Var> = Vec::new();
    let mut out = LossBreakdown { batch: g.shape(x_i)[0], ..Default::default() };
    if w.recon > 0.0 {
        let r_i = g.mse(x_i, bundle.decode(g, v, z_i)?)?;
        let r_j = g.mse(x_j, bundle.decode(g, v, z_j)?)?;
        let recon = g.add(r_i, r_j)?;
        out.recon = Some(g.item(recon));
        terms.push(g.scale(recon, w.recon)?);
    }
    if w.dir > 0.0 {
        let tau = bundle.tau(g, v)?;
        let cos = g.mean(g.cosine_similarity(dz, tau)?)?;
        out.direction = Some(g.item(cos));
        terms.push(g.scale(cos, -w.dir)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    out.total = g.item(total);
    Ok((total, out))
}

fn check_weights(w: &LossWeights) -> Result<(), ObjectiveError> {
    LossWeights::new(w.recon, w.dir).map(|_| ())
}

/// Loss for the two-encoder-pass variants (AE, LSSL, S-LSSL).
pub fn lssl_loss(g: &Graph, bundle: &ModelBundle, v: &BundleVars, batch: &PairBatch, w: &LossWeights) -> Result<LossGraph, ObjectiveError> {
    check_weights(w)?;
    if bundle.mode.is_node() {
        return Err(ObjectiveError::ModeMismatch { loss: "lssl_loss", mode: bundle.mode });
    }
    let x_i = g.constant(batch.x_i.clone())?;
    let x_j = g.constant(batch.x_j.clone())?;
    let (z_i, z_j, dz) = bundle.encode_pair(g, v, x_i, x_j)?;
    let (total, breakdown) = assemble(g, bundle, v, x_i, x_j, z_i, z_j, dz, w)?;
    Ok(LossGraph { total, breakdown, stats: SolverStats::default() })
}

/// Loss for the NODE variants: only the first visit is encoded, and the
/// second latent is the flow of the first over the elapsed time.
pub fn lssl_node_loss(
    g: &Graph,
    bundle: &ModelBundle,
    v: &BundleVars,
    batch: &PairBatch,
    w: &LossWeights,
    cfg: &SolverConfig,
    grad: GradientMode,
) -> Result<LossGraph, ObjectiveError> {
    check_weights(w)?;
    if !bundle.mode.is_node() {
        return Err(ObjectiveError::ModeMismatch { loss: "lssl_node_loss", mode: bundle.mode });
    }
    let x_i = g.constant(batch.x_i.clone())?;
    let x_j = g.constant(batch.x_j.clone())?;
    let (z_i, z_node, dz, stats) = bundle.encode_predict_next(g, v, x_i, &batch.dts, cfg, grad)?;
    let (total, breakdown) = assemble(g, bundle, v, x_i, x_j, z_i, z_node, dz, w)?;
    Ok(LossGraph { total, breakdown, stats })
}

/// Whichever of the two losses the bundle's mode calls for.
pub fn pair_loss(
    g: &Graph,
    bundle: &ModelBundle,
    v: &BundleVars,
    batch: &PairBatch,
    w: &LossWeights,
    cfg: &SolverConfig,
    grad: GradientMode,
) -> Result<LossGraph, ObjectiveError> {
    if bundle.mode.is_node() {
        lssl_node_loss(g, bundle, v, batch, w, cfg, grad)
    } else {
        lssl_loss(g, bundle, v, batch, w)
    }
}

/// Loss value and gradients for every bundle parameter, in
/// [`ModelBundle::params_mut`] order.
pub fn loss_and_grads(
    bundle: &ModelBundle,
    batch: &PairBatch,
    w: &LossWeights,
    cfg: &SolverConfig,
    grad: GradientMode,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, SolverStats), ObjectiveError> {
    let g = Graph::new();
    let v = bundle.bind(&g, true)?;
    let loss = pair_loss(&g, bundle, &v, batch, w, cfg, grad)?;
    let flat = v.flat();
    let mut grads = g.backward(loss.total)?;
    let out = flat.iter().zip(bundle.params()).map(|(var, p)| grads.take(*var).unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    Ok((loss.breakdown, out, loss.stats))
}

/// Loss value without gradients.
pub fn evaluate_loss(bundle: &ModelBundle, batch: &PairBatch, w: &LossWeights, cfg: &SolverConfig) -> Result<(LossBreakdown, SolverStats), ObjectiveError> {
    let g = Graph::new();
    let v = bundle.bind(&g, false)?;
    let loss = pair_loss(&g, bundle, &v, batch, w, cfg, GradientMode::Adjoint)?;
    Ok((loss.breakdown, loss.stats))
}
