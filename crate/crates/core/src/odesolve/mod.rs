//! Adaptive Dormand–Prince integration of learned latent dynamics, with
//! gradients by the adjoint sensitivity method or, for testing, by
//! backpropagating through the recorded solver steps.
//!
//! Dynamics are written once as graph code ([`Dynamics::build`]); the
//! solver derives plain evaluations, vector-Jacobian products and taped
//! replays from that single definition.

mod dopri5;
mod system;

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

pub use dopri5::{dopri5_step, StepOutput, StepSequence};
pub use system::{Dynamics, FnSystem, OdeSystem};

use dopri5::integrate_system;
use system::{AdjointSystem, DynSystem, TimeMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("invalid horizon [{t0}, {t1}]: end time must be finite and not before start")]
    InvalidHorizon { t0: f64, t1: f64 },
    #[error("step size must be positive, got {0}")]
    InvalidStep(f64),
    #[error("exceeded {0} solver steps")]
    MaxSteps(usize),
    #[error("step size underflow at t={t} (h={h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite derivative at t={t}, stage {stage}")]
    NonFinite { t: f64, stage: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// `None` selects the starting step from the initial derivative.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub order: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-4, initial_step: None, max_steps: 10_000, safety: 0.9, min_factor: 0.2, max_factor: 10.0, order: 5 }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.min_factor > 0.0 && self.min_factor < 1.0 && self.max_factor > 1.0) {
            return bad("step-factor clamp must bracket 1");
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return bad("safety must lie in (0, 1]");
        }
        if self.max_steps == 0 || self.order == 0 {
            return bad("max_steps and order must be positive");
        }
        if matches!(self.initial_step, Some(h) if !(h > 0.0)) {
            return bad("initial step must be positive");
        }
        Ok(())
    }

    /// `atol + rtol·|x|`, the per-component tolerance used in acceptance checks.
    pub fn mixed_tolerance(&self, x: f64) -> f64 {
        self.atol + self.rtol * x.abs()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Right-hand-side evaluations.
    pub nfe: usize,
}

impl SolverStats {
    pub fn merge(&mut self, other: &SolverStats) {
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.nfe += other.nfe;
    }
}

/// Solution of a single initial value problem.
#[derive(Clone, Debug)]
pub struct OdeSolution {
    /// Requested times, ascending (start and end of the horizon).
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub stats: SolverStats,
    pub steps: StepSequence,
    pub config: SolverConfig,
}

impl OdeSolution {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("solution has at least one state")
    }
}

/// Solution of a batch of problems with per-sample horizons, integrated
/// jointly over rescaled time `s ∈ [0, 1]`.
#[derive(Clone, Debug)]
pub struct BatchSolution {
    pub t0s: Vec<f64>,
    pub t1s: Vec<f64>,
    pub initial: Tensor,
    pub final_states: Tensor,
    pub stats: SolverStats,
    /// Accepted steps in rescaled time.
    pub steps: StepSequence,
    pub config: SolverConfig,
}

/// Gradients returned by the adjoint pass.
#[derive(Clone, Debug)]
pub struct AdjointGradients {
    pub grad_z0: Tensor,
    /// One gradient per tensor in [`Dynamics::params`].
    pub grad_params: Vec<Tensor>,
    /// The state component of the augmented system after integrating back
    /// to the start; reproduces the initial condition up to solver error.
    pub z0_reconstructed: Tensor,
    pub stats: SolverStats,
}

/// How gradients flow through an ODE block on a training graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Adjoint sensitivity method (constant memory in the step count).
    #[default]
    Adjoint,
    /// Backpropagation through the recorded solver steps.
    Direct,
}

fn state_rows(f: &dyn Dynamics, z: &Tensor) -> Result<usize, SolverError> {
    let d = f.state_dim();
    let ok = match z.shape() {
        [n] => *n == d,
        [_, c] => *c == d,
        _ => false,
    };
    if !ok {
        return Err(AutodiffError::Shape(format!("state {:?} for dynamics of dimension {d}", z.shape())).into());
    }
    Ok(z.numel() / d)
}

/// Integrates `dz/dt = u(t, z)` from `t0` to `t1`.
pub fn integrate(f: &dyn Dynamics, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution, SolverError> {
    let rows = state_rows(f, z0)?;
    let sys = DynSystem::new(f, rows, TimeMap::Plain);
    let flat = integrate_system(&sys, z0.data(), t0, t1, cfg)?;
    let z1 = Tensor::new(z0.shape().to_vec(), flat.y1)?;
    Ok(OdeSolution { times: vec![t0, t1], states: vec![z0.clone(), z1], stats: flat.stats, steps: flat.steps, config: *cfg })
}

fn check_batch(z0s: &Tensor, t0s: &[f64], t1s: &[f64], f: &dyn Dynamics) -> Result<usize, SolverError> {
    let rows = match z0s.shape() {
        [r, c] if *c == f.state_dim() => *r,
        s => return Err(AutodiffError::Shape(format!("batch state {s:?} for dynamics of dimension {}", f.state_dim())).into()),
    };
    if t0s.len() != rows || t1s.len() != rows {
        return Err(AutodiffError::Shape(format!("{} / {} horizons for {rows} samples", t0s.len(), t1s.len())).into());
    }
    for (&a, &b) in t0s.iter().zip(t1s) {
        if !(a.is_finite() && b.is_finite()) || b < a {
            return Err(SolverError::InvalidHorizon { t0: a, t1: b });
        }
    }
    Ok(rows)
}

/// Integrates every row of `z0s` over its own horizon in one solver pass.
///
/// Each sample's time is rescaled as `t = t0ᵢ + s·(t1ᵢ − t0ᵢ)`, so the
/// stacked system `dzᵢ/ds = (t1ᵢ − t0ᵢ)·u(t, zᵢ)` is solved on `s ∈ [0, 1]`.
pub fn integrate_batch(f: &dyn Dynamics, z0s: &Tensor, t0s: &[f64], t1s: &[f64], cfg: &SolverConfig) -> Result<BatchSolution, SolverError> {
    let rows = check_batch(z0s, t0s, t1s, f)?;
    cfg.validate()?;
    let spans: Vec<f64> = t0s.iter().zip(t1s).map(|(a, b)| b - a).collect();
    let (y1, stats, steps) = if spans.iter().all(|&s| s == 0.0) {
        (z0s.data().to_vec(), SolverStats::default(), Vec::new())
    } else {
        let sys = DynSystem::new(f, rows, TimeMap::Rescaled { t0s: t0s.to_vec(), spans });
        let flat = integrate_system(&sys, z0s.data(), 0.0, 1.0, cfg)?;
        (flat.y1, flat.stats, flat.steps)
    };
    Ok(BatchSolution {
        t0s: t0s.to_vec(),
        t1s: t1s.to_vec(),
        initial: z0s.clone(),
        final_states: Tensor::new(z0s.shape().to_vec(), y1)?,
        stats,
        steps,
        config: *cfg,
    })
}

fn run_adjoint(
    sys: &DynSystem<'_>,
    z1: &[f64],
    grad: &[f64],
    t_start: f64,
    t_end: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, SolverStats), SolverError> {
    let n = z1.len();
    if grad.len() != n {
        return Err(AutodiffError::Shape(format!("loss gradient of length {} for state of length {n}", grad.len())).into());
    }
    let p = sys.n_params();
    let mut y = Vec::with_capacity(2 * n + p);
    y.extend_from_slice(z1);
    y.extend_from_slice(grad);
    y.resize(2 * n + p, 0.0);
    if t_end == t_start {
        return Ok((z1.to_vec(), grad.to_vec(), vec![0.0; p], SolverStats::default()));
    }
    let aug = AdjointSystem::new(sys, t_end);
    let flat = integrate_system(&aug, &y, 0.0, t_end - t_start, cfg)?;
    let z0 = flat.y1[..n].to_vec();
    let a0 = flat.y1[n..2 * n].to_vec();
    let g_theta = flat.y1[2 * n..].to_vec();
    Ok((z0, a0, g_theta, flat.stats))
}

fn split_params(f: &dyn Dynamics, flat: &[f64]) -> Result<Vec<Tensor>, SolverError> {
    let mut out = Vec::with_capacity(f.params().len());
    let mut off = 0;
    for p in f.params() {
        out.push(Tensor::new(p.shape().to_vec(), flat[off..off + p.numel()].to_vec())?);
        off += p.numel();
    }
    Ok(out)
}

/// Gradients of a loss on the final state with respect to the initial
/// state and the dynamics parameters, by integrating the augmented adjoint
/// system `[z, a, a·∂u/∂θ]` backwards from `t1` to `t0`.
pub fn integrate_adjoint_backward(f: &dyn Dynamics, solution: &OdeSolution, loss_grad_at_t1: &Tensor) -> Result<AdjointGradients, SolverError> {
    let z1 = solution.final_state();
    let rows = state_rows(f, z1)?;
    let (t0, t1) = (solution.times[0], *solution.times.last().unwrap_or(&solution.times[0]));
    let sys = DynSystem::new(f, rows, TimeMap::Plain);
    let (z0, a0, g, stats) = run_adjoint(&sys, z1.data(), loss_grad_at_t1.data(), t0, t1, &solution.config)?;
    Ok(AdjointGradients {
        grad_z0: Tensor::new(z1.shape().to_vec(), a0)?,
        grad_params: split_params(f, &g)?,
        z0_reconstructed: Tensor::new(z1.shape().to_vec(), z0)?,
        stats,
    })
}

/// Adjoint pass for [`integrate_batch`]; parameter gradients are summed over samples.
pub fn adjoint_batch(f: &dyn Dynamics, solution: &BatchSolution, loss_grad: &Tensor) -> Result<AdjointGradients, SolverError> {
    let rows = check_batch(&solution.final_states, &solution.t0s, &solution.t1s, f)?;
    let spans: Vec<f64> = solution.t0s.iter().zip(&solution.t1s).map(|(a, b)| b - a).collect();
    let shape = solution.final_states.shape().to_vec();
    if spans.iter().all(|&s| s == 0.0) {
        return Ok(AdjointGradients {
            grad_z0: Tensor::new(shape.clone(), loss_grad.data().to_vec())?,
            grad_params: f.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            z0_reconstructed: solution.final_states.clone(),
            stats: SolverStats::default(),
        });
    }
    let sys = DynSystem::new(f, rows, TimeMap::Rescaled { t0s: solution.t0s.clone(), spans });
    let (z0, a0, g, stats) = run_adjoint(&sys, solution.final_states.data(), loss_grad.data(), 0.0, 1.0, &solution.config)?;
    Ok(AdjointGradients { grad_z0: Tensor::new(shape.clone(), a0)?, grad_params: split_params(f, &g)?, z0_reconstructed: Tensor::new(shape, z0)?, stats })
}

fn replay(g: &Graph, sys: &DynSystem<'_>, y0: Var, params: &[Var], steps: &StepSequence) -> Result<Var, SolverError> {
    use dopri5::{A, C};
    let mut y = y0;
    let mut k_first: Option<Var> = None;
    for &(t, h) in steps {
        let k1 = match k_first {
            Some(k) => k,
            None => sys.build_rhs(g, t, y, params)?,
        };
        // the last stage is evaluated at the fifth-order solution (FSAL)
        let mut ks = vec![k1];
        let mut stage = y;
        for s in 1..7 {
            stage = y;
            for (j, kj) in ks.iter().enumerate() {
                if A[s][j] != 0.0 {
                    let term = g.scale(*kj, h * A[s][j])?;
                    stage = g.add(stage, term)?;
                }
            }
            let k = sys.build_rhs(g, t + C[s] * h, stage, params)?;
            ks.push(k);
        }
        y = stage;
        k_first = ks.pop();
    }
    Ok(y)
}

/// Integrates on the tape so that ordinary backward differentiates through
/// every solver stage. The step sequence is fixed by a plain solve first.
/// `params` must hold the current values of `f.params()`.
pub fn integrate_taped(g: &Graph, f: &dyn Dynamics, z0: Var, params: &[Var], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Var, SolverError> {
    let value = g.value(z0);
    let rows = state_rows(f, &value)?;
    let sys = DynSystem::new(f, rows, TimeMap::Plain);
    let flat = integrate_system(&sys, value.data(), t0, t1, cfg)?;
    let z0m = if value.shape().len() == 1 { g.reshape(z0, &[1, f.state_dim()])? } else { z0 };
    let out = replay(g, &sys, z0m, params, &flat.steps)?;
    if value.shape().len() == 1 {
        Ok(g.reshape(out, value.shape())?)
    } else {
        Ok(out)
    }
}

/// Batched counterpart of [`integrate_taped`].
pub fn integrate_batch_taped(g: &Graph, f: &dyn Dynamics, z0s: Var, params: &[Var], t0s: &[f64], t1s: &[f64], cfg: &SolverConfig) -> Result<Var, SolverError> {
    let value = g.value(z0s);
    let rows = check_batch(&value, t0s, t1s, f)?;
    let spans: Vec<f64> = t0s.iter().zip(t1s).map(|(a, b)| b - a).collect();
    if spans.iter().all(|&s| s == 0.0) {
        return Ok(z0s);
    }
    let sys = DynSystem::new(f, rows, TimeMap::Rescaled { t0s: t0s.to_vec(), spans });
    let flat = integrate_system(&sys, value.data(), 0.0, 1.0, cfg)?;
    replay(g, &sys, z0s, params, &flat.steps)
}

/// Adds a batched ODE solve to a training graph. `params` are the graph
/// variables bound to `f.params()`; the output is `[b×d]`.
pub fn ode_block(
    g: &Graph,
    f: Rc<dyn Dynamics>,
    z0s: Var,
    params: &[Var],
    t0s: &[f64],
    t1s: &[f64],
    cfg: &SolverConfig,
    mode: GradientMode,
) -> Result<(Var, SolverStats), SolverError> {
    match mode {
        GradientMode::Direct => {
            let out = integrate_batch_taped(g, f.as_ref(), z0s, params, t0s, t1s, cfg)?;
            Ok((out, SolverStats::default()))
        }
        GradientMode::Adjoint => {
            let sol = integrate_batch(f.as_ref(), &g.value(z0s), t0s, t1s, cfg)?;
            let stats = sol.stats;
            let output = sol.final_states.clone();
            let mut inputs = vec![z0s];
            inputs.extend_from_slice(params);
            let backward = Box::new(move |grad: &[f64]| -> Result<Vec<Vec<f64>>, AutodiffError> {
                let seed = Tensor::new(sol.final_states.shape().to_vec(), grad.to_vec())?;
                let adj = adjoint_batch(f.as_ref(), &sol, &seed).map_err(|e| match e {
                    SolverError::Autodiff(inner) => inner,
                    other => AutodiffError::External(format!("adjoint solve failed: {other}")),
                })?;
                let mut out = vec![adj.grad_z0.into_data()];
                out.extend(adj.grad_params.into_iter().map(Tensor::into_data));
                Ok(out)
            });
            Ok((g.custom(&inputs, output, backward)?, stats))
        }
    }
}
