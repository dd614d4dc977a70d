//! Run configuration: a JSON file merged under command-line flags.

use std::path::Path;

use eigensde_core::nets::Architecture;
use eigensde_core::synth::GeneratorConfig;
use eigensde_core::train::{EvalOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Which rows of the control mapping are learned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ControlMask {
    /// Observed rows pinned to zero; control acts on latent rows only.
    #[default]
    Latent,
    /// Every row free.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seed of every randomized step; overrides the per-section seeds.
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    /// Try both all-real and all-pair spectra and keep the better validation NLL.
    pub select_spectrum: bool,
    /// Independent initializations per spectrum layout; the best validation NLL wins.
    pub restarts: usize,
    pub architecture: Architecture,
    pub ablate_hypernet: bool,
    pub control_mask: ControlMask,
    pub eval: EvalOptions,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            preset: None,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            select_spectrum: false,
            restarts: 1,
            architecture: Architecture::default(),
            ablate_hypernet: false,
            control_mask: ControlMask::Latent,
            eval: EvalOptions::default(),
            split: [0.6, 0.1, 0.3],
        }
    }
}

/// Recursively overlay `top` on `base`; objects merge key by key.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Defaults, then the preset named in the file or by `preset`, then the
    /// file's own values.
    pub fn load(path: Option<&Path>, preset: Option<&str>) -> CliResult<Self> {
        let file: Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let preset = preset.map(str::to_string).or_else(|| file.get("preset").and_then(Value::as_str).map(str::to_string));
        let mut base = serde_json::to_value(RunConfig::default()).map_err(config_err)?;
        if let Some(name) = &preset {
            let g = GeneratorConfig::preset(name).map_err(|e| CliError::Config(e.to_string()))?;
            base["generator"] = serde_json::to_value(g).map_err(config_err)?;
            base["preset"] = Value::String(name.clone());
        }
        merge(&mut base, &file);
        if preset.is_some() {
            base["preset"] = preset.clone().map(Value::String).unwrap_or(Value::Null);
        }
        serde_json::from_value(base).map_err(config_err)
    }

    /// Seed required by randomized commands.
    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Config("this command is randomized: pass --seed or set \"seed\" in the config".into()))
    }

    pub fn set_seed(&mut self, seed: Option<u64>) {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.generator.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate_split(&self) -> CliResult<()> {
        let s = self.split;
        if s.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s[0] <= 0.0 {
            return Err(CliError::Config(format!("split fractions must be non-negative and sum to 1, got {s:?}")));
        }
        Ok(())
    }
}
