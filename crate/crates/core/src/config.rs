//! Run configuration. Defaults reproduce the reference hyperparameters; every
//! field can be overridden from a TOML file with flat dotted keys such as
//! `fit.w = 0.1` or `prune.t_m = 0.0`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Prior probability that a voxel is covered by the primitive being fitted.
    pub w: f64,
    /// Weight of the inside-voxel decay term.
    pub c: f64,
    pub max_outer_iters: usize,
    /// Levenberg-Marquardt iterations per reweighting round.
    pub max_inner_iters: usize,
    pub param_tol: f64,
    pub neighborhood_scale: f64,
    /// Lower bound on the matching variance; `None` means `tau^2`.
    pub sigma_floor: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            w: 0.02,
            c: 1.0,
            max_outer_iters: 40,
            max_inner_iters: 3,
            param_tol: 1e-4,
            neighborhood_scale: 1.3,
            sigma_floor: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(ConfigError::Invalid(format!("fit.w = {} not in (0, 1)", self.w)));
        }
        if !(self.c > 0.0) {
            return Err(ConfigError::Invalid(format!("fit.c = {} must be positive", self.c)));
        }
        if self.sigma_floor.is_some_and(|s| !(s > 0.0)) {
            return Err(ConfigError::Invalid("fit.sigma_floor must be positive".into()));
        }
        if !(self.neighborhood_scale >= 1.0) {
            return Err(ConfigError::Invalid("fit.neighborhood_scale must be >= 1".into()));
        }
        if self.max_inner_iters == 0 {
            return Err(ConfigError::Invalid("fit.max_inner_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// `C (1 - w) / w`, the inside-voxel decay term.
    pub fn decay(&self) -> f64 {
        self.c * (1.0 - self.w) / self.w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompConfig {
    pub alpha: f64,
    pub k: usize,
    /// Minimum distance between two chosen planes on the same axis, world units.
    pub min_spacing: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_m: f64,
    /// Curvature normalization; `None` means `1 / voxel_size`.
    pub h_max: Option<f64>,
    /// Pick the top K planes over all axes instead of K per axis.
    pub planes_global: bool,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            k: 6,
            min_spacing: 0.1,
            beta: 0.4,
            gamma: 0.6,
            tau_m: 0.7,
            h_max: None,
            planes_global: false,
        }
    }
}

impl DecompConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("decomp.{name} = {v} not in [0, 1]")));
            }
        }
        if self.k == 0 {
            return Err(ConfigError::Invalid("decomp.k must be >= 1".into()));
        }
        if !(self.tau_m > 0.0 && self.tau_m <= 1.0) {
            return Err(ConfigError::Invalid(format!("decomp.tau_m = {} not in (0, 1]", self.tau_m)));
        }
        if self.h_max.is_some_and(|h| !(h > 0.0)) {
            return Err(ConfigError::Invalid("decomp.h_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub p_m: f64,
    pub p_c: f64,
    pub p_o: f64,
    pub t_m: f64,
    pub t_c: f64,
    pub t_o: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            p_m: 0.5,
            p_c: 0.5,
            p_o: 0.5,
            t_m: 0.02,
            t_c: 0.03,
            t_o: 0.05,
        }
    }
}

impl PruneConfig {
    /// All size thresholds zero: nothing is pruned for being small.
    pub fn disabled() -> Self {
        Self {
            t_m: 0.0,
            t_c: 0.0,
            t_o: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("p_m", self.p_m), ("p_c", self.p_c), ("p_o", self.p_o)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("prune.{name} = {v} not in (0, 1]")));
            }
        }
        if !(self.t_m >= 0.0 && self.t_m <= self.t_c && self.t_c <= self.t_o) {
            return Err(ConfigError::Invalid(
                "prune thresholds must satisfy 0 <= t_m <= t_c <= t_o".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiscaleConfig {
    /// Dilation added to each scale; `None` means two voxels.
    pub dilation: Option<f64>,
    pub local_resolution: usize,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            dilation: None,
            local_resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub resolution: usize,
    pub tau_factor: f64,
    /// Primitives fitted per partition in the block stage.
    pub block_k: usize,
    pub seed: u64,
    pub force_parity: bool,
    pub fit: FitConfig,
    pub decomp: DecompConfig,
    pub prune: PruneConfig,
    pub multiscale: MultiscaleConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            resolution: 100,
            tau_factor: 1.0,
            block_k: 1,
            seed: 0,
            force_parity: false,
            fit: FitConfig::default(),
            decomp: DecompConfig::default(),
            prune: PruneConfig::default(),
            multiscale: MultiscaleConfig::default(),
            input: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.resolution < 8 {
            return Err(ConfigError::Invalid("resolution must be >= 8".into()));
        }
        if !(self.tau_factor > 0.0) {
            return Err(ConfigError::Invalid("tau_factor must be positive".into()));
        }
        if self.block_k == 0 {
            return Err(ConfigError::Invalid("block_k must be >= 1".into()));
        }
        if self.multiscale.local_resolution < 8 {
            return Err(ConfigError::Invalid("multiscale.local_resolution must be >= 8".into()));
        }
        if self.multiscale.dilation.is_some_and(|d| !(d >= 0.0)) {
            return Err(ConfigError::Invalid("multiscale.dilation must be >= 0".into()));
        }
        self.fit.validate()?;
        self.decomp.validate()?;
        self.prune.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.fit.w, 0.02);
        assert_eq!(c.fit.c, 1.0);
        assert!((c.fit.decay() - 49.0).abs() < 1e-12);
        assert_eq!((c.decomp.alpha, c.decomp.k, c.decomp.min_spacing), (0.7, 6, 0.1));
        assert_eq!((c.decomp.beta, c.decomp.gamma, c.decomp.tau_m), (0.4, 0.6, 0.7));
        assert_eq!((c.prune.p_m, c.prune.p_c, c.prune.p_o), (0.5, 0.5, 0.5));
        assert_eq!((c.prune.t_m, c.prune.t_c, c.prune.t_o), (0.02, 0.03, 0.05));
        assert_eq!(c.block_k, 1);
        assert_eq!(c.resolution, 100);
        assert_eq!(c.multiscale.local_resolution, 64);
        c.validate().unwrap();
    }

    #[test]
    fn flat_dotted_keys_override() {
        let c = RunConfig::from_toml_str("fit.w = 0.5\nprune.t_m = 0.0\nresolution = 64\n").unwrap();
        assert_eq!(c.fit.w, 0.5);
        assert_eq!(c.fit.c, 1.0);
        assert_eq!(c.prune.t_m, 0.0);
        assert_eq!(c.resolution, 64);
    }

    #[test]
    fn rejects_invalid() {
        assert!(RunConfig::from_toml_str("fit.w = 1.5").is_err());
        assert!(RunConfig::from_toml_str("prune.t_m = 0.1").is_err());
        assert!(RunConfig::from_toml_str("decomp.k = 0").is_err());
        assert!(RunConfig::from_toml_str("nonsense = 1").is_err());
        assert!(RunConfig::from_toml_str("fit.c = -1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.decomp.h_max = Some(12.5);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
