//! Flat run configuration: one key per hyperparameter or path.

use std::path::{Path, PathBuf};

use schemata_core::model::ModelConfig;
use schemata_core::training::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub injection_hidden: usize,
    pub predicate_hidden: usize,
    pub object_dropout: f64,
    pub predicate_dropout: f64,
    pub slope: f64,
    pub directional_projections: bool,

    pub assimilations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kb_batch_size: usize,
    pub epochs: usize,
    pub max_rate: f64,
    pub ramp_end: Option<f64>,
    pub ic_weight: f64,
    pub icp_weight: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,

    pub data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(m: &ModelConfig, t: &TrainConfig) -> Self {
        Self {
            dim: m.dim,
            layers: m.layers,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            injection_hidden: m.injection_hidden,
            predicate_hidden: m.predicate_hidden,
            object_dropout: m.object_dropout,
            predicate_dropout: m.predicate_dropout,
            slope: m.slope,
            directional_projections: m.directional_projections,
            assimilations: t.assimilations,
            lr: t.lr,
            batch_size: t.batch_size,
            kb_batch_size: t.kb_batch_size,
            epochs: t.epochs,
            max_rate: t.max_rate,
            ramp_end: t.ramp_end,
            ic_weight: t.ic_weight,
            icp_weight: t.icp_weight,
            optimizer: t.optimizer,
            seed: t.seed,
            data: None,
            vocab: None,
            kb: None,
            out: None,
            log: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides, parsing each value as a TOML scalar
    /// (bare words are taken as strings).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        let mut table = toml::Table::try_from(&*self).expect("config serialises");
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
            let key = key.trim();
            if !table.contains_key(key) && !Self::OPTIONAL_KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "unknown configuration key {key:?}"
                )));
            }
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        *self = table.try_into().map_err(|e: toml::de::Error| {
            CliError::Usage(format!("configuration override: {e}"))
        })?;
        Ok(())
    }

    const OPTIONAL_KEYS: [&'static str; 6] = ["ramp_end", "data", "vocab", "kb", "out", "log"];

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            injection_hidden: self.injection_hidden,
            predicate_hidden: self.predicate_hidden,
            object_dropout: self.object_dropout,
            predicate_dropout: self.predicate_dropout,
            slope: self.slope,
            directional_projections: self.directional_projections,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            assimilations: self.assimilations,
            lr: self.lr,
            batch_size: self.batch_size,
            kb_batch_size: self.kb_batch_size,
            epochs: self.epochs,
            max_rate: self.max_rate,
            ramp_end: self.ramp_end,
            ic_weight: self.ic_weight,
            icp_weight: self.icp_weight,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_size_configuration() {
        let c = RunConfig::default();
        assert_eq!(
            (c.dim, c.layers, c.heads, c.ffn_hidden, c.injection_hidden),
            (512, 4, 5, 2048, 512)
        );
        assert_eq!(
            (c.object_dropout, c.predicate_dropout, c.slope),
            (0.8, 0.1, 0.2)
        );
        assert_eq!((c.lr, c.epochs, c.batch_size), (1e-5, 24, 14));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "dim = 32\nlr = 0.01\noptimizer = \"sgd\"\ndata = \"a.jsonl\"\n",
        )
        .unwrap();
        let mut c = RunConfig::load(&path).unwrap();
        assert_eq!((c.dim, c.lr, c.optimizer), (32, 0.01, OptimizerKind::Sgd));
        c.apply_overrides(&[
            "dim=16".into(),
            "ramp_end=2.5".into(),
            "kb=b.jsonl".into(),
            "optimizer=adam".into(),
        ])
        .unwrap();
        assert_eq!(c.dim, 16);
        assert_eq!(c.ramp_end, Some(2.5));
        assert_eq!(c.kb.as_deref(), Some(Path::new("b.jsonl")));
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.lr, 0.01);
        assert!(c.apply_overrides(&["width=3".into()]).is_err());
        assert!(c.apply_overrides(&["dim=many".into()]).is_err());
        std::fs::write(&path, "depth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));
    }
}
