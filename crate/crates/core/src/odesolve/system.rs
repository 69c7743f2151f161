//! Right-hand sides seen by the stepper: plain closures, learned dynamics
//! (optionally in rescaled batch time) and the augmented adjoint system.

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

use super::SolverError;

/// A first-order system `dy/dt = F(t, y)` over a flat state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SolverError>;
}

/// Wraps a closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SolverError> {
        (self.f)(t, y, dy);
        Ok(())
    }
}

/// Learned dynamics `u(t, z; θ)` written as graph code.
///
/// `build` receives a `[b×1]` column of times, states `[b×d]` and graph
/// variables holding `params()`, and returns `[b×d]`. It must be a pure
/// function of its arguments.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn build(&self, g: &Graph, t: Var, z: Var, params: &[Var]) -> Result<Var, AutodiffError>;
}

#[derive(Clone, Debug)]
pub(crate) enum TimeMap {
    Plain,
    /// Row `i` runs on `t = t0s[i] + s·spans[i]` with `s ∈ [0, 1]`.
    Rescaled {
        t0s: Vec<f64>,
        spans: Vec<f64>,
    },
}

/// Stacked `[rows×d]` state driven by a [`Dynamics`].
pub(crate) struct DynSystem<'a> {
    f: &'a dyn Dynamics,
    rows: usize,
    time: TimeMap,
}

impl<'a> DynSystem<'a> {
    pub fn new(f: &'a dyn Dynamics, rows: usize, time: TimeMap) -> Self {
        Self { f, rows, time }
    }

    pub fn n_params(&self) -> usize {
        self.f.params().iter().map(Tensor::numel).sum()
    }

    fn time_column(&self, t: f64) -> Tensor {
        let col = match &self.time {
            TimeMap::Plain => vec![t; self.rows],
            TimeMap::Rescaled { t0s, spans } => t0s.iter().zip(spans).map(|(a, s)| a + t * s).collect(),
        };
        Tensor::new(vec![self.rows, 1], col).expect("time column matches row count")
    }

    /// Records `F(t, y)` on `g` for a `[rows×d]` state variable.
    pub fn build_rhs(&self, g: &Graph, t: f64, y: Var, params: &[Var]) -> Result<Var, AutodiffError> {
        let tc = g.constant(self.time_column(t))?;
        let out = self.f.build(g, tc, y, params)?;
        match &self.time {
            TimeMap::Plain => Ok(out),
            TimeMap::Rescaled { spans, .. } => g.scale_rows(out, spans),
        }
    }

    fn state(&self, y: &[f64]) -> Result<Tensor, AutodiffError> {
        Tensor::new(vec![self.rows, self.f.state_dim()], y.to_vec())
    }

    /// `F(t, y)` together with `a·∂F/∂y` and `a·∂F/∂θ` (parameters flattened in order).
    pub fn eval_vjp(&self, t: f64, y: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AutodiffError> {
        let g = Graph::new();
        let z = g.param(&self.state(y)?)?;
        let params = self.f.params().iter().map(|p| g.param(p)).collect::<Result<Vec<_>, _>>()?;
        let out = self.build_rhs(&g, t, z, &params)?;
        let value = g.data(out);
        let mut grads = g.backward_with(out, &self.state(a)?)?;
        let gz = grads.take(z).unwrap_or_else(|| vec![0.0; y.len()]);
        let mut gt = Vec::with_capacity(self.n_params());
        for (p, v) in self.f.params().iter().zip(&params) {
            match grads.take(*v) {
                Some(gp) => gt.extend(gp),
                None => gt.extend(std::iter::repeat_n(0.0, p.numel())),
            }
        }
        Ok((value, gz, gt))
    }
}

impl OdeSystem for DynSystem<'_> {
    fn dim(&self) -> usize {
        self.rows * self.f.state_dim()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SolverError> {
        let g = Graph::new();
        let z = g.constant(self.state(y)?)?;
        let params = self.f.params().iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = self.build_rhs(&g, t, z, &params)?;
        let v = g.value(out);
        if v.numel() != dy.len() {
            return Err(AutodiffError::Shape(format!("dynamics returned {:?} for {} state values", v.shape(), dy.len())).into());
        }
        dy.copy_from_slice(v.data());
        Ok(())
    }
}

/// Augmented system `[z, a, a_θ]` in reversed time `s = t_end − t`:
/// `dz/ds = −F`, `da/ds = a·∂F/∂z`, `da_θ/ds = a·∂F/∂θ`.
pub(crate) struct AdjointSystem<'a, 'b> {
    inner: &'b DynSystem<'a>,
    t_end: f64,
    n: usize,
}

impl<'a, 'b> AdjointSystem<'a, 'b> {
    pub fn new(inner: &'b DynSystem<'a>, t_end: f64) -> Self {
        Self { n: inner.dim(), inner, t_end }
    }
}

impl OdeSystem for AdjointSystem<'_, '_> {
    fn dim(&self) -> usize {
        2 * self.n + self.inner.n_params()
    }

    fn rhs(&self, s: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SolverError> {
        let n = self.n;
        let (f, az, at) = self.inner.eval_vjp(self.t_end - s, &y[..n], &y[n..2 * n])?;
        for (d, v) in dy[..n].iter_mut().zip(&f) {
            *d = -v;
        }
        dy[n..2 * n].copy_from_slice(&az);
        dy[2 * n..].copy_from_slice(&at);
        Ok(())
    }
}
