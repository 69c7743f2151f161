//! Central finite-difference gradient checks.
//!
//! The numeric side only evaluates the forward function, so it is
//! independent of every backward rule it is compared against.

use super::{AutodiffError, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Magnitudes below this floor are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, floor: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_err: f64,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rel_tol
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Evaluates `f` once with all inputs as gradient leaves and compares the
/// backward pass against central differences of the scalar output.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheck) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t)).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get(*v).unwrap_or(&[]).to_vec()).collect();

    let eval = |ts: &[Tensor]| -> Result<f64, AutodiffError> {
        let g = Graph::new();
        let vars = ts.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            col.push((up - down) / (2.0 * cfg.step));
        }
        numeric.push(col);
    }

    let max_rel_err = analytic.iter().flatten().zip(numeric.iter().flatten()).map(|(a, n)| rel_err(*a, *n, cfg.floor)).fold(0.0, f64::max);
    Ok(GradCheckReport { analytic, numeric, max_rel_err, rel_tol: cfg.rel_tol })
}
