//! Dormand–Prince 5(4) embedded pair with adaptive step-size control.

use super::{OdeSystem, SolverConfig, SolverError, SolverStats};

pub(crate) const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

pub(crate) const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

/// Fifth-order weights (equal to the last row of `A`, hence FSAL).
pub(crate) const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

/// Embedded fourth-order weights.
pub(crate) const B4: [f64; 7] = [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Result of a single Dormand–Prince step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Fifth-order solution at `t + h`.
    pub y5: Vec<f64>,
    /// Difference between the fifth- and fourth-order solutions.
    pub err: Vec<f64>,
    /// Derivative at `(t + h, y5)`; the next step's first stage.
    pub k_last: Vec<f64>,
}

/// One 7-stage step from `(t, y)` with step `h`, evaluating the first stage.
pub fn dopri5_step<S: OdeSystem + ?Sized>(sys: &S, t: f64, y: &[f64], h: f64) -> Result<StepOutput, SolverError> {
    if !(h > 0.0) {
        return Err(SolverError::InvalidStep(h));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite { t, stage: 0 });
    }
    let mut k1 = vec![0.0; y.len()];
    sys.rhs(t, y, &mut k1)?;
    step_with_first_stage(sys, t, y, h, &k1)
}

pub(crate) fn step_with_first_stage<S: OdeSystem + ?Sized>(sys: &S, t: f64, y: &[f64], h: f64, k1: &[f64]) -> Result<StepOutput, SolverError> {
    let n = y.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    k.push(k1.to_vec());
    let mut stage_y = vec![0.0; n];
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += A[s][j] * kj[i];
            }
            stage_y[i] = y[i] + h * acc;
        }
        let mut ks = vec![0.0; n];
        sys.rhs(t + C[s] * h, &stage_y, &mut ks)?;
        if ks.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { t: t + C[s] * h, stage: s });
        }
        k.push(ks);
    }
    // stage 7 was evaluated at the fifth-order solution
    let y5 = stage_y;
    let err = (0..n).map(|i| h * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>()).collect();
    let k_last = k.pop().unwrap_or_default();
    Ok(StepOutput { y5, err, k_last })
}

/// RMS of `err_i / (atol + rtol·max(|a_i|, |b_i|))`.
pub(crate) fn error_norm(err: &[f64], a: &[f64], b: &[f64], cfg: &SolverConfig) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let s: f64 = err
        .iter()
        .zip(a.iter().zip(b))
        .map(|(e, (x, y))| {
            let sc = cfg.atol + cfg.rtol * x.abs().max(y.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / err.len() as f64).sqrt()
}

fn rms_scaled(v: &[f64], y: &[f64], cfg: &SolverConfig) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v.iter().zip(y).map(|(x, y)| (x / (cfg.atol + cfg.rtol * y.abs())).powi(2)).sum();
    (s / v.len() as f64).sqrt()
}

/// Hairer–Nørsett–Wanner starting step from the derivative at `t0`.
fn initial_step<S: OdeSystem + ?Sized>(sys: &S, t0: f64, y0: &[f64], f0: &[f64], cfg: &SolverConfig, stats: &mut SolverStats) -> Result<f64, SolverError> {
    let d0 = rms_scaled(y0, y0, cfg);
    let d1 = rms_scaled(f0, y0, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    sys.rhs(t0 + h0, &y1, &mut f1)?;
    stats.nfe += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, y0, cfg) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / dmax).powf(1.0 / cfg.order as f64) };
    Ok((100.0 * h0).min(h1))
}

/// Accepted steps `(t, h)` of a solve; replaying them reproduces it.
pub type StepSequence = Vec<(f64, f64)>;

pub(crate) struct FlatSolution {
    pub y1: Vec<f64>,
    pub stats: SolverStats,
    pub steps: StepSequence,
}

/// Adaptive integration of `sys` from `t0` to `t1 ≥ t0`, landing exactly on `t1`.
pub(crate) fn integrate_system<S: OdeSystem + ?Sized>(sys: &S, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<FlatSolution, SolverError> {
    cfg.validate()?;
    if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
        return Err(SolverError::InvalidHorizon { t0, t1 });
    }
    let mut stats = SolverStats::default();
    if t1 == t0 {
        return Ok(FlatSolution { y1: y0.to_vec(), stats, steps: Vec::new() });
    }
    let span = t1 - t0;
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; y.len()];
    sys.rhs(t, &y, &mut k1)?;
    stats.nfe += 1;
    let mut h = match cfg.initial_step {
        Some(h) => h,
        None => initial_step(sys, t0, &y, &k1, cfg, &mut stats)?,
    }
    .min(span);
    let mut steps = Vec::new();
    let exponent = -1.0 / cfg.order as f64;

    loop {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(SolverError::MaxSteps(cfg.max_steps));
        }
        if h < 1e-12 * span {
            return Err(SolverError::StepUnderflow { t, h });
        }
        // stretch rather than leave a sliver shorter than the underflow bound
        let last = t + h >= t1 - 1e-10 * span;
        if last {
            h = t1 - t;
        }
        let out = step_with_first_stage(sys, t, &y, h, &k1)?;
        stats.nfe += 6;
        let norm = error_norm(&out.err, &y, &out.y5, cfg);
        let factor = if norm == 0.0 { cfg.max_factor } else { (cfg.safety * norm.powf(exponent)).clamp(cfg.min_factor, cfg.max_factor) };
        if norm <= 1.0 {
            stats.accepted += 1;
            steps.push((t, h));
            y = out.y5;
            k1 = out.k_last;
            if last {
                break;
            }
            t += h;
        } else {
            stats.rejected += 1;
        }
        h *= factor;
    }
    Ok(FlatSolution { y1: y, stats, steps })
}
