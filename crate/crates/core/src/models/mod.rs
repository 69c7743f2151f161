//! Encoder, decoder, direction net, latent dynamics and task heads.
//!
//! Every model keeps its tensors in flat lists; `bind` puts them on a graph
//! in a fixed order, and `params_mut` yields them in that same order so
//! gradients line up with the optimizer state.

mod heads;
mod layers;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::odesolve::{ode_block, Dynamics, GradientMode, SolverConfig, SolverError, SolverStats};

pub use heads::{mlp_head, AgeRegressor, NextVisitModel, NodeClassifier};
pub use layers::{bind, kaiming_uniform, Activation, Lstm, Mlp, LEAKY_SLOPE};

pub const INPUT_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 128;
pub const LATENT_DIM: usize = 64;
pub const N_GRADES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("loss weights λ_recon={recon}, λ_dir={dir} are invalid: {reason}")]
    InvalidWeights { recon: f64, dir: f64, reason: &'static str },
    #[error("{op} is not available in mode {mode}")]
    ModeMismatch { op: &'static str, mode: Mode },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Pretraining variant. Reconstruction and direction terms are present
/// according to the mode; the NODE variants predict the second latent of a
/// pair by integrating the dynamics net from the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ae")]
    Ae,
    #[serde(rename = "ae-node")]
    AeNode,
    #[serde(rename = "lssl")]
    Lssl,
    #[serde(rename = "lssl-node")]
    LsslNode,
    #[serde(rename = "s-lssl")]
    SLssl,
    #[serde(rename = "s-lssl-node")]
    SLsslNode,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Ae, Mode::AeNode, Mode::Lssl, Mode::LsslNode, Mode::SLssl, Mode::SLsslNode];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ae => "ae",
            Mode::AeNode => "ae-node",
            Mode::Lssl => "lssl",
            Mode::LsslNode => "lssl-node",
            Mode::SLssl => "s-lssl",
            Mode::SLsslNode => "s-lssl-node",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Ae => "AE",
            Mode::AeNode => "AE+NODE",
            Mode::Lssl => "LSSL",
            Mode::LsslNode => "LSSL+NODE",
            Mode::SLssl => "S-LSSL",
            Mode::SLsslNode => "S-LSSL+NODE",
        }
    }

    pub fn is_node(self) -> bool {
        matches!(self, Mode::AeNode | Mode::LsslNode | Mode::SLsslNode)
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, Mode::SLssl | Mode::SLsslNode)
    }

    pub fn has_direction(self) -> bool {
        !matches!(self, Mode::Ae | Mode::AeNode)
    }

    /// Default `(λ_recon, λ_dir)`.
    pub fn default_weights(self) -> (f64, f64) {
        (if self.has_decoder() { 1.0 } else { 0.0 }, if self.has_direction() { 1.0 } else { 0.0 })
    }

    /// The mode implied by a pair of loss weights.
    pub fn from_weights(recon: f64, dir: f64, node: bool) -> Result<Mode, ModelError> {
        let bad = |reason| Err(ModelError::InvalidWeights { recon, dir, reason });
        if !(recon.is_finite() && dir.is_finite()) || recon < 0.0 || dir < 0.0 {
            return bad("weights must be finite and non-negative");
        }
        let mode = match (recon > 0.0, dir > 0.0) {
            (false, false) => return bad("at least one term must be active"),
            (true, false) => Mode::Ae,
            (true, true) => Mode::Lssl,
            (false, true) => Mode::SLssl,
        };
        Ok(if node { mode.with_node() } else { mode })
    }

    pub fn with_node(self) -> Mode {
        match self {
            Mode::Ae | Mode::AeNode => Mode::AeNode,
            Mode::Lssl | Mode::LsslNode => Mode::LsslNode,
            Mode::SLssl | Mode::SLsslNode => Mode::SLsslNode,
        }
    }

    /// Whether `(λ_recon, λ_dir)` selects exactly this mode's terms.
    pub fn check_weights(self, recon: f64, dir: f64) -> Result<(), ModelError> {
        let implied = Mode::from_weights(recon, dir, self.is_node())?;
        if implied != self {
            return Err(ModelError::InvalidWeights { recon, dir, reason: "weights select a different mode" });
        }
        Ok(())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['_', '+'], "-");
        Mode::ALL.into_iter().find(|m| m.name() == key).ok_or_else(|| ModelError::UnknownMode(s.to_string()))
    }
}

/// Independent random stream per model component, so a component's initial
/// weights depend only on the seed and not on which other parts exist.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod stream {
    pub const ENCODER: u64 = 1;
    pub const DECODER: u64 = 2;
    pub const DIRECTION: u64 = 3;
    pub const DYNAMICS: u64 = 4;
    pub const AGE_HEAD: u64 = 5;
    pub const NEXT_VISIT_HEAD: u64 = 6;
    pub const NODE_CLS_HEAD: u64 = 7;
}

pub fn new_encoder(seed: u64) -> Mlp {
    Mlp::new(&[INPUT_DIM, HIDDEN_DIM, LATENT_DIM], Activation::Tanh, &mut component_rng(seed, stream::ENCODER))
}

/// Latent dynamics `u(t, z)`: `[t, z] → 64 → 64` with tanh on the hidden
/// layer; the output layer starts at zero so the initial flow is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsNet {
    pub mlp: Mlp,
}

impl DynamicsNet {
    pub fn new(seed: u64) -> Self {
        let mlp = Mlp::new(&[LATENT_DIM + 1, LATENT_DIM, LATENT_DIM], Activation::Tanh, &mut component_rng(seed, stream::DYNAMICS));
        Self { mlp: mlp.zero_last() }
    }

    pub fn n_params(&self) -> usize {
        self.mlp.params.iter().map(Tensor::numel).sum()
    }
}

impl Dynamics for DynamicsNet {
    fn state_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    fn params(&self) -> &[Tensor] {
        &self.mlp.params
    }

    fn build(&self, g: &Graph, t: Var, z: Var, params: &[Var]) -> Result<Var, AutodiffError> {
        let x = g.concat_cols(&[t, z])?;
        self.mlp.forward(g, params, x)
    }
}

/// Integrates `dynamics` from each row of `z0` over `[0, dts[i]]` on the
/// graph; returns the predicted latents and solver statistics.
pub fn predict_next(
    g: &Graph,
    dynamics: Rc<dyn Dynamics>,
    z0: Var,
    params: &[Var],
    dts: &[f64],
    cfg: &SolverConfig,
    mode: GradientMode,
) -> Result<(Var, SolverStats), ModelError> {
    let t0s = vec![0.0; dts.len()];
    Ok(ode_block(g, dynamics, z0, params, &t0s, dts, cfg, mode)?)
}

/// The trainable state of one pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub mode: Mode,
    pub encoder: Mlp,
    pub decoder: Option<Mlp>,
    pub direction: Option<Mlp>,
    pub dynamics: Option<DynamicsNet>,
}

/// Graph variables for a bound [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub encoder: Vec<Var>,
    pub decoder: Option<Vec<Var>>,
    pub direction: Option<Vec<Var>>,
    pub dynamics: Option<Vec<Var>>,
}

impl BundleVars {
    /// All variables in [`ModelBundle::params_mut`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.encoder.clone();
        for part in [&self.decoder, &self.direction, &self.dynamics].into_iter().flatten() {
            out.extend_from_slice(part);
        }
        out
    }
}

fn layer_names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}.{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" }))
}

/// Deterministic initialization: Kaiming-uniform weights, zero biases and
/// a zeroed dynamics output layer. Only the parts the mode uses are built.
pub fn init_bundle(mode: Mode, seed: u64) -> ModelBundle {
    let decoder = mode.has_decoder().then(|| Mlp::new(&[LATENT_DIM, HIDDEN_DIM, INPUT_DIM], Activation::Tanh, &mut component_rng(seed, stream::DECODER)));
    let direction = mode.has_direction().then(|| Mlp::new(&[LATENT_DIM, LATENT_DIM], Activation::Tanh, &mut component_rng(seed, stream::DIRECTION)));
    let dynamics = mode.is_node().then(|| DynamicsNet::new(seed));
    ModelBundle { mode, encoder: new_encoder(seed), decoder, direction, dynamics }
}

impl ModelBundle {
    fn parts(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = vec![("encoder", &self.encoder)];
        if let Some(d) = &self.decoder {
            out.push(("decoder", d));
        }
        if let Some(d) = &self.direction {
            out.push(("direction", d));
        }
        if let Some(d) = &self.dynamics {
            out.push(("dynamics", &d.mlp));
        }
        out
    }

    /// Parameter tensors with stable dotted names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.parts().into_iter().flat_map(|(name, m)| layer_names(name, m.params.len()).zip(m.params.iter())).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.parts().into_iter().flat_map(|(_, m)| m.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.params.iter_mut().collect();
        for m in [self.decoder.as_mut(), self.direction.as_mut(), self.dynamics.as_mut().map(|d| &mut d.mlp)].into_iter().flatten() {
            out.extend(m.params.iter_mut());
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|t| t.numel()).collect()
    }

    /// Replaces every tensor by name; shapes must match.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<(), ModelError> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = lookup(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(AutodiffError::Shape(format!("{name}: expected {:?}, got {:?}", slot.shape(), t.shape())).into());
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::round_to_f32);
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<BundleVars, ModelError> {
        let b = |m: &Mlp| bind(g, &m.params, trainable);
        Ok(BundleVars {
            encoder: b(&self.encoder)?,
            decoder: self.decoder.as_ref().map(b).transpose()?,
            direction: self.direction.as_ref().map(b).transpose()?,
            dynamics: self.dynamics.as_ref().map(|d| b(&d.mlp)).transpose()?,
        })
    }

    pub fn encode(&self, g: &Graph, v: &BundleVars, x: Var) -> Result<Var, ModelError> {
        Ok(self.encoder.forward(g, &v.encoder, x)?)
    }

    pub fn decode(&self, g: &Graph, v: &BundleVars, z: Var) -> Result<Var, ModelError> {
        match (&self.decoder, &v.decoder) {
            (Some(d), Some(p)) => Ok(d.forward(g, p, z)?),
            _ => Err(ModelError::ModeMismatch { op: "decode", mode: self.mode }),
        }
    }

    /// The direction vector τ `[64]`, from the all-ones input.
    pub fn tau(&self, g: &Graph, v: &BundleVars) -> Result<Var, ModelError> {
        match (&self.direction, &v.direction) {
            (Some(d), Some(p)) => {
                let ones = g.constant(Tensor::full(&[1, d.in_dim()], 1.0))?;
                let out = d.forward(g, p, ones)?;
                Ok(g.reshape(out, &[d.out_dim()])?)
            }
            _ => Err(ModelError::ModeMismatch { op: "tau", mode: self.mode }),
        }
    }

    /// Latents of both visits of each pair and `Δz = z_j − z_i`.
    pub fn encode_pair(&self, g: &Graph, v: &BundleVars, x_i: Var, x_j: Var) -> Result<(Var, Var, Var), ModelError> {
        if g.shape(x_i) != g.shape(x_j) {
            return Err(AutodiffError::Shape(format!("pair inputs {:?} and {:?}", g.shape(x_i), g.shape(x_j))).into());
        }
        let z_i = self.encode(g, v, x_i)?;
        let z_j = self.encode(g, v, x_j)?;
        let dz = g.sub(z_j, z_i)?;
        Ok((z_i, z_j, dz))
    }

    /// Encodes the first visit only and integrates the dynamics over each
    /// pair's elapsed time: `(z_i, z_node, Δz_node)`.
    pub fn encode_predict_next(
        &self,
        g: &Graph,
        v: &BundleVars,
        x_i: Var,
        dts: &[f64],
        cfg: &SolverConfig,
        grad: GradientMode,
    ) -> Result<(Var, Var, Var, SolverStats), ModelError> {
        let (f, p) = match (&self.dynamics, &v.dynamics) {
            (Some(f), Some(p)) => (f, p),
            _ => return Err(ModelError::ModeMismatch { op: "encode_predict_next", mode: self.mode }),
        };
        let z_i = self.encode(g, v, x_i)?;
        let (z_node, stats) = predict_next(g, Rc::new(f.clone()), z_i, p, dts, cfg, grad)?;
        let dz = g.sub(z_node, z_i)?;
        Ok((z_i, z_node, dz, stats))
    }

    /// Encoder output for plain inputs `[b×32]`.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.encoder.apply(x)?)
    }

    /// `τ` as a plain vector.
    pub fn tau_values(&self) -> Result<Tensor, ModelError> {
        let g = Graph::new();
        let v = self.bind(&g, false)?;
        let t = self.tau(&g, &v)?;
        Ok(g.value(t))
    }
}

#[cfg(test)]
mod tests;
