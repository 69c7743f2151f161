//! Fine-tuning models: an encoder plus a task head, and the NODE classifier.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::odesolve::{GradientMode, SolverConfig, SolverStats};

use super::{bind, component_rng, new_encoder, predict_next, stream, Activation, DynamicsNet, Lstm, Mlp, ModelBundle, ModelError, LATENT_DIM, N_GRADES};

/// Dense head `64 → 1024 → 64 → n_out` with LeakyReLU.
pub fn mlp_head(n_out: usize, seed: u64, stream: u64) -> Mlp {
    Mlp::new(&[LATENT_DIM, 1024, 64, n_out], Activation::LeakyRelu, &mut component_rng(seed, stream))
}

fn bind_parts(g: &Graph, parts: &[&[Tensor]], trainable: bool) -> Result<Vec<Var>, ModelError> {
    let mut out = Vec::new();
    for p in parts {
        out.extend(bind(g, p, trainable)?);
    }
    Ok(out)
}

fn check_len(vars: &[Var], n: usize) -> Result<(), ModelError> {
    if vars.len() != n {
        return Err(crate::autodiff::AutodiffError::Shape(format!("{} bound tensors for {n} parameters", vars.len())).into());
    }
    Ok(())
}

/// Encoder followed by a one-output MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeRegressor {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl AgeRegressor {
    pub fn new(encoder: Mlp, seed: u64) -> Self {
        Self { encoder, head: mlp_head(1, seed, stream::AGE_HEAD) }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.params.iter_mut().chain(self.head.params.iter_mut()).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.encoder.params.iter().chain(&self.head.params).map(Tensor::numel).collect()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<Vec<Var>, ModelError> {
        bind_parts(g, &[&self.encoder.params, &self.head.params], trainable)
    }

    /// `[b×32] → [b×1]`.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var) -> Result<Var, ModelError> {
        let ne = self.encoder.params.len();
        check_len(vars, ne + self.head.params.len())?;
        let z = self.encoder.forward(g, &vars[..ne], x)?;
        Ok(self.head.forward(g, &vars[ne..], z)?)
    }
}

/// Encoder applied to each of the past visits, then an LSTM over the
/// latents and a linear readout to grade logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NextVisitModel {
    pub encoder: Mlp,
    pub rnn: Lstm,
}

impl NextVisitModel {
    pub const HISTORY: usize = 3;

    pub fn new(encoder: Mlp, seed: u64) -> Self {
        let rnn = Lstm::new(LATENT_DIM, LATENT_DIM, N_GRADES, &mut component_rng(seed, stream::NEXT_VISIT_HEAD));
        Self { encoder, rnn }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.params.iter_mut().chain(self.rnn.params.iter_mut()).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.encoder.params.iter().chain(&self.rnn.params).map(Tensor::numel).collect()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<Vec<Var>, ModelError> {
        bind_parts(g, &[&self.encoder.params, &self.rnn.params], trainable)
    }

    /// `visits` are `[b×32]` inputs, oldest first; returns `[b×5]` logits.
    pub fn forward(&self, g: &Graph, vars: &[Var], visits: &[Var]) -> Result<Var, ModelError> {
        let ne = self.encoder.params.len();
        check_len(vars, ne + self.rnn.params.len())?;
        let zs = visits.iter().map(|x| self.encoder.forward(g, &vars[..ne], *x)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.rnn.forward(g, &vars[ne..], &zs)?)
    }
}

/// Backbone encoder, latent flow over the elapsed time, and an MLP head
/// giving the grade logits at the later time.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeClassifier {
    pub encoder: Mlp,
    pub dynamics: DynamicsNet,
    pub head: Mlp,
}

impl NodeClassifier {
    /// Takes the encoder and dynamics from a NODE-mode bundle.
    pub fn from_bundle(bundle: &ModelBundle, seed: u64) -> Result<Self, ModelError> {
        let dynamics = bundle.dynamics.clone().ok_or(ModelError::ModeMismatch { op: "node classifier", mode: bundle.mode })?;
        Ok(Self { encoder: bundle.encoder.clone(), dynamics, head: mlp_head(N_GRADES, seed, stream::NODE_CLS_HEAD) })
    }

    /// Freshly initialized backbone and dynamics.
    pub fn scratch(seed: u64) -> Self {
        Self { encoder: new_encoder(seed), dynamics: DynamicsNet::new(seed), head: mlp_head(N_GRADES, seed, stream::NODE_CLS_HEAD) }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.params.iter_mut().chain(self.dynamics.mlp.params.iter_mut()).chain(self.head.params.iter_mut()).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.encoder.params.iter().chain(&self.dynamics.mlp.params).chain(&self.head.params).map(Tensor::numel).collect()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<Vec<Var>, ModelError> {
        bind_parts(g, &[&self.encoder.params, &self.dynamics.mlp.params, &self.head.params], trainable)
    }

    /// Grade logits `[b×5]` at `t + dts[i]` from a single visit per row.
    pub fn forward(&self, g: &Graph, vars: &[Var], x: Var, dts: &[f64], cfg: &SolverConfig, grad: GradientMode) -> Result<(Var, SolverStats), ModelError> {
        let ne = self.encoder.params.len();
        let nd = ne + self.dynamics.mlp.params.len();
        check_len(vars, nd + self.head.params.len())?;
        let z = self.encoder.forward(g, &vars[..ne], x)?;
        let (z1, stats) = predict_next(g, Rc::new(self.dynamics.clone()), z, &vars[ne..nd], dts, cfg, grad)?;
        Ok((self.head.forward(g, &vars[nd..], z1)?, stats))
    }
}
