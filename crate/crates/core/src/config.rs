//! Experiment configuration. One TOML document describes a complete run:
//! the floating-point denoiser and its training budget, the calibration
//! corpus, the quantizer, the sample-weighting schedule, and the lemma
//! verification knobs. An experiment's identity is the SHA-256 of its
//! canonical JSON form with `seed` and `out_dir` removed, so the same
//! definition hashes identically wherever and under whichever seed it runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{FpTrainConfig, ToyDataset};
use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::weighting::{BatchScope, MetaConfig, OuterOptimizer};

/// Noise schedule, denoiser architecture, and floating-point training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Width of each hidden dense layer.
    pub width: usize,
    /// Number of hidden dense+activation blocks.
    pub hidden: usize,
    /// Sinusoidal time-embedding dimension; zero feeds the bare timestep.
    pub time_embed_dim: usize,
    pub layer_norm: bool,
    pub dataset: ToyDataset,
    pub train: FpTrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t_steps: 20,
            beta_start: 0.2,
            beta_end: 0.6,
            width: 64,
            hidden: 2,
            time_embed_dim: 16,
            layer_norm: false,
            dataset: ToyDataset::default(),
            train: FpTrainConfig::default(),
        }
    }
}

impl DiffusionSection {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps < 2 {
            return Err(Error::invalid("diffusion", "needs at least two timesteps"));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return Err(Error::invalid(
                "diffusion",
                format!(
                    "beta range [{}, {}] must be increasing within (0, 1)",
                    self.beta_start, self.beta_end
                ),
            ));
        }
        if self.width == 0 || self.hidden == 0 {
            return Err(Error::invalid("diffusion", "width and hidden must be positive"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("diffusion", "time embedding dim must be even"));
        }
        match &self.dataset {
            ToyDataset::GaussianMixture { centers, std } => {
                if centers.is_empty() {
                    return Err(Error::invalid("diffusion", "mixture needs at least one center"));
                }
                if !(*std > 0.0 && std.is_finite()) {
                    return Err(Error::invalid("diffusion", "mixture std must be positive"));
                }
            }
            ToyDataset::SwissRoll { turns, noise } => {
                if !(*turns > 0.0 && turns.is_finite()) || !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::invalid("diffusion", "roll needs turns > 0 and noise >= 0"));
                }
            }
        }
        let t = &self.train;
        if t.iters == 0 || t.batch_size == 0 || t.train_size == 0 || t.val_size == 0 {
            return Err(Error::invalid("diffusion", "training sizes must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::invalid("diffusion", "training lr must be positive"));
        }
        Ok(())
    }
}

/// Calibration corpus geometry: how many denoising trajectories to record,
/// how densely to sample the ladder, and how to split and group the states.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    /// Trajectories recorded; each contributes one state per collected step.
    pub trajectories: usize,
    /// Collect every `interval`-th timestep; must divide `t_steps`.
    pub interval: usize,
    /// Fraction of states held out for validation, stratified by timestep.
    pub val_fraction: f64,
    /// Number of contiguous timestep groups.
    pub groups: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            trajectories: 128,
            interval: 2,
            val_fraction: 0.05,
            groups: 5,
        }
    }
}

/// Temperature and meta-optimization schedule for the sample weights.
/// `eta_outer = 0` and `meta_iters = 0` are both legal and leave the
/// weights at their uniform initialization, which is what makes the
/// ablation runs comparable to an explicit uniform run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingSection {
    pub tau: f64,
    /// Step size of the one-step-ahead parameter update.
    pub eta_inner: f64,
    /// Step size of the score pseudo-updates inside a window.
    pub eta_pseudo: f64,
    /// Scale of the committed score update.
    pub eta_outer: f64,
    pub meta_iters: usize,
    /// Window length; drift is committed every `t_acc` iterations.
    pub t_acc: usize,
    pub batch_size: usize,
    pub outer: OuterOptimizer,
    pub scope: BatchScope,
    /// Re-run the weight optimization before every block instead of once
    /// before the first, so weights track the already-quantized prefix.
    pub update_every_block: bool,
}

impl Default for WeightingSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        WeightingSection {
            tau: 1.0,
            eta_inner: m.eta_inner,
            eta_pseudo: m.eta_pseudo,
            eta_outer: m.eta_outer,
            meta_iters: m.iters,
            t_acc: m.t_acc,
            batch_size: m.batch_size,
            outer: m.outer,
            scope: m.scope,
            update_every_block: true,
        }
    }
}

impl WeightingSection {
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            eta_inner: self.eta_inner,
            eta_pseudo: self.eta_pseudo,
            eta_outer: self.eta_outer,
            iters: self.meta_iters,
            t_acc: self.t_acc,
            batch_size: self.batch_size,
            outer: self.outer,
            scope: self.scope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("weighting", "tau must be positive"));
        }
        for (name, v) in [("eta_inner", self.eta_inner), ("eta_pseudo", self.eta_pseudo)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("weighting", format!("{name} must be positive")));
            }
        }
        if !(self.eta_outer >= 0.0 && self.eta_outer.is_finite()) {
            return Err(Error::invalid("weighting", "eta_outer must be non-negative"));
        }
        if self.t_acc == 0 || self.batch_size == 0 {
            return Err(Error::invalid("weighting", "t_acc and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Budgets for the two lemma verification procedures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    /// Pseudo-update step size for the drift-prediction check; small enough
    /// that the quadratic remainder sits well below the predicted terms.
    pub eta_pseudo: f64,
    pub eta_inner: f64,
    pub t_acc: usize,
    pub batch_size: usize,
    /// Random weight configurations for the direction check.
    pub lemma42_configs: usize,
    /// Standard deviation of the score perturbations around uniform.
    pub lemma42_spread: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            eta_pseudo: 1e-6,
            eta_inner: 0.1,
            t_acc: 4,
            batch_size: 6,
            lemma42_configs: 50,
            lemma42_spread: 0.5,
        }
    }
}

impl VerifySection {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_pseudo", self.eta_pseudo),
            ("eta_inner", self.eta_inner),
            ("lemma42_spread", self.lemma42_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("verify", format!("{name} must be positive")));
            }
        }
        if self.t_acc == 0 || self.batch_size == 0 {
            return Err(Error::invalid("verify", "t_acc and batch_size must be positive"));
        }
        if self.lemma42_configs < 2 {
            return Err(Error::invalid("verify", "direction check needs at least two configurations"));
        }
        Ok(())
    }
}

/// A complete experiment definition. `seed` and `out_dir` are defaults the
/// command line may override; they carry no experimental identity and are
/// excluded from [`ExperimentConfig::config_hash`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub diffusion: DiffusionSection,
    pub calibration: CalibrationSection,
    pub quant: QuantConfig,
    pub weighting: WeightingSection,
    pub verify: VerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            diffusion: DiffusionSection::default(),
            calibration: CalibrationSection::default(),
            quant: QuantConfig::default(),
            weighting: WeightingSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::BadArtifact {
            path: path.to_path_buf(),
            why: e.to_string(),
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        let c = &self.calibration;
        if c.trajectories == 0 {
            return Err(Error::invalid("calibration", "needs at least one trajectory"));
        }
        if c.interval == 0 || self.diffusion.t_steps % c.interval != 0 {
            return Err(Error::invalid(
                "calibration",
                format!(
                    "interval {} does not divide the {}-step ladder",
                    c.interval, self.diffusion.t_steps
                ),
            ));
        }
        if !(c.val_fraction > 0.0 && c.val_fraction < 1.0) {
            return Err(Error::invalid(
                "calibration",
                format!("validation fraction {} not in (0, 1)", c.val_fraction),
            ));
        }
        let collected = self.diffusion.t_steps / c.interval;
        if c.groups < 2 || c.groups > collected {
            return Err(Error::invalid(
                "calibration",
                format!("{} groups do not fit {collected} collected timesteps", c.groups),
            ));
        }
        self.quant.validate()?;
        self.weighting.validate()?;
        self.verify.validate()
    }

    /// The configuration as a JSON value with `seed` and `out_dir` removed.
    /// serde_json orders object keys, so serializing this value yields a
    /// canonical string.
    pub fn canonical_value(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seed");
            obj.remove("out_dir");
        }
        Ok(v)
    }

    /// Hex SHA-256 of the canonical form; this is the experiment identity.
    pub fn config_hash(&self) -> Result<String> {
        let canon = serde_json::to_string(&self.canonical_value()?)?;
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hashes_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let a = cfg.config_hash().unwrap();
        let b = cfg.config_hash().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn seed_and_out_dir_do_not_change_the_hash() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.seed = 99;
        other.out_dir = Some(PathBuf::from("/tmp/elsewhere"));
        assert_eq!(base.config_hash().unwrap(), other.config_hash().unwrap());

        let mut changed = base.clone();
        changed.quant.weight_bits = 3;
        assert_ne!(base.config_hash().unwrap(), changed.config_hash().unwrap());
    }

    #[test]
    fn toml_round_trip_preserves_the_hash() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.config_hash().unwrap(), back.config_hash().unwrap());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "seed = 7\n\n[diffusion]\nt_steps = 10\n\n[weighting]\ntau = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.diffusion.t_steps, 10);
        assert_eq!(cfg.diffusion.width, 64);
        assert_eq!(cfg.weighting.tau, 0.5);
        assert_eq!(cfg.calibration.groups, 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = ExperimentConfig::default();
        cfg.calibration.interval = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.calibration.groups = 11;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.weighting.tau = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.diffusion.beta_end = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.verify.lemma42_configs = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eta_outer_zero_is_a_legal_ablation() {
        let mut cfg = ExperimentConfig::default();
        cfg.weighting.eta_outer = 0.0;
        cfg.weighting.meta_iters = 0;
        cfg.validate().unwrap();
    }

    #[test]
    fn load_reports_missing_file_as_artifact_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/exp.toml")).unwrap_err();
        match err {
            Error::BadArtifact { path, .. } => {
                assert_eq!(path, PathBuf::from("/nonexistent/exp.toml"));
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn meta_config_mirrors_the_section() {
        let mut w = WeightingSection::default();
        w.eta_outer = 0.25;
        w.meta_iters = 9;
        let m = w.meta_config();
        assert_eq!(m.eta_outer, 0.25);
        assert_eq!(m.iters, 9);
        assert_eq!(m.t_acc, w.t_acc);
    }
}
