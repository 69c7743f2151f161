//! Experiment configuration: defaults, a flat TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lssl_core::eval::FinetuneConfig;
use lssl_core::models::Mode;
use lssl_core::objectives::LossWeights;
use lssl_core::odesolve::{GradientMode, SolverConfig};
use lssl_core::train::PretrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub lambda_recon: f64,
    pub lambda_dir: f64,
    pub node: bool,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub rtol: f64,
    pub atol: f64,
    pub gradient: GradientMode,
    pub n_subjects: usize,
    pub seed: u64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_weight_decay: f64,
    pub finetune_batch_size: usize,
    /// Pairs per speed class in the trajectory-norm test.
    pub norm_group_size: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        let solver = SolverConfig::default();
        Self {
            mode: Mode::Lssl,
            lambda_recon: 1.0,
            lambda_dir: 1.0,
            node: false,
            epochs: pre.epochs,
            lr: pre.lr,
            weight_decay: pre.weight_decay,
            batch_size: pre.batch_size,
            rtol: solver.rtol,
            atol: solver.atol,
            gradient: GradientMode::Adjoint,
            n_subjects: 1000,
            seed: 0,
            finetune_epochs: ft.epochs,
            finetune_lr: ft.lr,
            finetune_weight_decay: ft.weight_decay,
            finetune_batch_size: ft.batch_size,
            norm_group_size: 100,
            out: PathBuf::from("out"),
        }
    }
}

/// Every field optional; used for both the config file and the flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub mode: Option<Mode>,
    pub lambda_recon: Option<f64>,
    pub lambda_dir: Option<f64>,
    pub node: Option<bool>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub gradient: Option<GradientMode>,
    pub n_subjects: Option<usize>,
    pub seed: Option<u64>,
    pub finetune_epochs: Option<usize>,
    pub finetune_lr: Option<f64>,
    pub finetune_weight_decay: Option<f64>,
    pub finetune_batch_size: Option<usize>,
    pub norm_group_size: Option<usize>,
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        ConfigPatch { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ConfigPatch {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config file")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: ConfigPatch) -> ConfigPatch {
        let base = self;
        overlay!(base, top; mode, lambda_recon, lambda_dir, node, epochs, lr, weight_decay, batch_size, rtol, atol,
            gradient, n_subjects, seed, finetune_epochs, finetune_lr, finetune_weight_decay, finetune_batch_size,
            norm_group_size, out)
    }

    /// Fills unset fields from the defaults and checks the mode/weight
    /// algebra. A mode alone takes its default weights; weights alone
    /// imply the mode; both must agree.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let weights_given = self.lambda_recon.is_some() || self.lambda_dir.is_some();
        let (mode, lambda_recon, lambda_dir, node) = match (self.mode, weights_given) {
            (Some(m), false) => {
                let (r, dir) = m.default_weights();
                if self.node.is_some_and(|n| n != m.is_node()) {
                    bail!("--node {} contradicts mode {m}", self.node.unwrap_or_default());
                }
                (m, r, dir, m.is_node())
            }
            (mode, _) => {
                let base = mode.unwrap_or(d.mode).default_weights();
                let r = self.lambda_recon.unwrap_or(base.0);
                let dir = self.lambda_dir.unwrap_or(base.1);
                let node = self.node.unwrap_or(mode.is_some_and(Mode::is_node));
                let implied = Mode::from_weights(r, dir, node)?;
                if let Some(m) = mode {
                    if m != implied {
                        bail!("mode {m} is inconsistent with lambda_recon={r}, lambda_dir={dir}, node={node} (implies {implied})");
                    }
                }
                (implied, r, dir, node)
            }
        };
        let cfg = ExperimentConfig {
            mode,
            lambda_recon,
            lambda_dir,
            node,
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            rtol: self.rtol.unwrap_or(d.rtol),
            atol: self.atol.unwrap_or(d.atol),
            gradient: self.gradient.unwrap_or(d.gradient),
            n_subjects: self.n_subjects.unwrap_or(d.n_subjects),
            seed: self.seed.unwrap_or(d.seed),
            finetune_epochs: self.finetune_epochs.unwrap_or(d.finetune_epochs),
            finetune_lr: self.finetune_lr.unwrap_or(d.finetune_lr),
            finetune_weight_decay: self.finetune_weight_decay.unwrap_or(d.finetune_weight_decay),
            finetune_batch_size: self.finetune_batch_size.unwrap_or(d.finetune_batch_size),
            norm_group_size: self.norm_group_size.unwrap_or(d.norm_group_size),
            out: self.out.unwrap_or(d.out),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.check_weights(self.lambda_recon, self.lambda_dir)?;
        if self.node != self.mode.is_node() {
            bail!("node={} contradicts mode {}", self.node, self.mode);
        }
        if self.epochs == 0 || self.batch_size == 0 || self.finetune_epochs == 0 || self.finetune_batch_size == 0 {
            bail!("epoch and batch counts must be positive");
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) || !(self.weight_decay >= 0.0 && self.finetune_weight_decay >= 0.0) {
            bail!("learning rates must be positive and weight decays non-negative");
        }
        if self.norm_group_size < 2 {
            bail!("norm_group_size must be at least 2");
        }
        self.solver().validate()?;
        Ok(())
    }

    /// The same experiment under another pretraining mode with its default weights.
    pub fn with_mode(&self, mode: Mode) -> ExperimentConfig {
        let (lambda_recon, lambda_dir) = mode.default_weights();
        ExperimentConfig { mode, lambda_recon, lambda_dir, node: mode.is_node(), ..self.clone() }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig::with_tolerances(self.rtol, self.atol)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            weights: LossWeights { recon: self.lambda_recon, dir: self.lambda_dir },
            solver: self.solver(),
            grad_mode: self.gradient,
            seed: self.seed,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            weight_decay: self.finetune_weight_decay,
            batch_size: self.finetune_batch_size,
            seed: self.seed,
            solver: self.solver(),
            grad_mode: self.gradient,
        }
    }

    /// First 12 hex digits of SHA-256 over the settings that affect
    /// results (the output directory is excluded) and a row label.
    pub fn hash(&self, label: &str) -> String {
        let mut echo = self.clone();
        echo.out = PathBuf::new();
        let json = serde_json::to_string(&echo).expect("config serializes");
        let digest = Sha256::new().chain_update(json.as_bytes()).chain_update(b"\n").chain_update(label.as_bytes()).finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(text: &str) -> ConfigPatch {
        ConfigPatch::from_toml(text).unwrap()
    }

    #[test]
    fn defaults_are_desk_scale() {
        let c = ConfigPatch::default().resolve().unwrap();
        assert_eq!((c.epochs, c.finetune_epochs, c.n_subjects), (60, 30, 1000));
        assert_eq!((c.lr, c.weight_decay), (5e-4, 1e-5));
        assert_eq!((c.rtol, c.atol), (1e-3, 1e-4));
        assert_eq!(c.mode, Mode::Lssl);
    }

    #[test]
    fn mode_alone_takes_default_weights() {
        let c = patch("mode = \"s-lssl-node\"").resolve().unwrap();
        assert_eq!((c.lambda_recon, c.lambda_dir, c.node), (0.0, 1.0, true));
        let c = patch("mode = \"ae\"").resolve().unwrap();
        assert_eq!((c.lambda_recon, c.lambda_dir, c.node), (1.0, 0.0, false));
    }

    #[test]
    fn weights_imply_mode() {
        let c = patch("lambda_dir = 0.0\nlambda_recon = 2.0").resolve().unwrap();
        assert_eq!(c.mode, Mode::Ae);
        let c = patch("lambda_recon = 0.0\nnode = true").resolve().unwrap();
        assert_eq!(c.mode, Mode::SLsslNode);
    }

    #[test]
    fn inconsistent_mode_is_rejected() {
        assert!(patch("mode = \"s-lssl\"\nlambda_recon = 1.0").resolve().is_err());
        assert!(patch("mode = \"ae\"\nnode = true").resolve().is_err());
        assert!(patch("lambda_recon = 0.0\nlambda_dir = 0.0").resolve().is_err());
        assert!(patch("lambda_dir = -1.0").resolve().is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let file = patch("seed = 4\nepochs = 10\nmode = \"ae\"");
        let flags = ConfigPatch { seed: Some(7), mode: Some(Mode::SLssl), ..Default::default() };
        let c = file.overlay(flags).resolve().unwrap();
        assert_eq!((c.seed, c.epochs, c.mode), (7, 10, Mode::SLssl));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ConfigPatch::from_toml("epoch = 3").is_err());
        assert!(ConfigPatch::from_toml("mode = \"vae\"").is_err());
        assert!(patch("rtol = 0.0").resolve().is_err());
        assert!(patch("batch_size = 0").resolve().is_err());
    }

    #[test]
    fn hash_tracks_settings_not_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash("x"), b.hash("x"));
        assert_ne!(a.hash("x"), c.hash("x"));
        assert_ne!(a.hash("x"), a.hash("y"));
        assert_eq!(a.hash("x").len(), 12);
    }

    #[test]
    fn with_mode_resets_weights() {
        let c = ExperimentConfig::default().with_mode(Mode::AeNode);
        c.validate().unwrap();
        assert_eq!((c.lambda_recon, c.lambda_dir, c.node), (1.0, 0.0, true));
    }
}
