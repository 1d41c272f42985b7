//! Run configuration with config-file support.
//!
//! Precedence: command-line flags override config-file values, which
//! override the built-in defaults.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    pub count: usize,
    /// Materials for dataset synthesis ("identity" is the normal domain).
    pub materials: Vec<String>,
    pub exclude_material: Option<String>,
    pub noise_std: f64,
    pub teacher_noise: f64,
    /// "desk" or "full" channel schedule.
    pub arch: String,
    /// "complex", "real-concat", "i-only" or "q-only".
    pub variant: String,
    pub deterministic: bool,
    pub lambda_dd: f64,
    pub patience: usize,
    /// Weight of the heatmap-space alignment term during pretraining.
    pub heatmap_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: 0.5,
            batch_size: 8,
            learning_rate: 0.001,
            adam_betas: (0.9, 0.999),
            epochs: 5,
            count: 1000,
            materials: vec!["identity".to_string()],
            exclude_material: None,
            noise_std: 0.02,
            teacher_noise: 0.01,
            arch: "desk".to_string(),
            variant: "complex".to_string(),
            deterministic: false,
            lambda_dd: 1.0,
            patience: 5,
            heatmap_weight: 30.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn arch(&self) -> Result<crate::net::Arch> {
        let variant = match self.variant.as_str() {
            "complex" => crate::net::Variant::Complex,
            "real-concat" => crate::net::Variant::RealConcat,
            "i-only" => crate::net::Variant::RealI,
            "q-only" => crate::net::Variant::RealQ,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant '{other}'; valid: complex, real-concat, i-only, q-only"
                )))
            }
        };
        match self.arch.as_str() {
            "desk" => Ok(crate::net::Arch::desk(variant)),
            "full" => Ok(crate::net::Arch::full(variant)),
            other => Err(Error::Config(format!(
                "unknown arch '{other}'; valid: desk, full"
            ))),
        }
    }
}

/// Optional command-line values layered over a base config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub count: Option<usize>,
    pub materials: Option<Vec<String>>,
    pub exclude_material: Option<String>,
    pub deterministic: bool,
    pub arch: Option<String>,
    pub variant: Option<String>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda_dd: Option<f64>,
    pub heatmap_weight: Option<f64>,
}

/// defaults <- config file <- command-line flags.
pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = over.seed {
        cfg.seed = v;
    }
    if let Some(v) = over.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = over.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = over.count {
        cfg.count = v;
    }
    if let Some(v) = &over.materials {
        cfg.materials = v.clone();
    }
    if let Some(v) = &over.exclude_material {
        cfg.exclude_material = Some(v.clone());
    }
    if over.deterministic {
        cfg.deterministic = true;
    }
    if let Some(v) = &over.arch {
        cfg.arch = v.clone();
    }
    if let Some(v) = &over.variant {
        cfg.variant = v.clone();
    }
    if let Some(v) = over.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = over.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = over.lambda_dd {
        cfg.lambda_dd = v;
    }
    if let Some(v) = over.heatmap_weight {
        cfg.heatmap_weight = v;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_details() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.adam_betas, (0.9, 0.999));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alpha": 0.7, "seed": 9}"#).unwrap();
        let over = Overrides {
            alpha: Some(0.9),
            ..Overrides::default()
        };
        let cfg = resolve(Some(&path), &over).unwrap();
        assert_eq!(cfg.alpha, 0.9); // flag wins
        assert_eq!(cfg.seed, 9); // file wins over default
        assert_eq!(cfg.batch_size, 8); // default preserved
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"alhpa": 0.7}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }
}
