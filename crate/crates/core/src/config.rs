//! Flat key-value training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::BankConfig;
use crate::error::{PbipError, Result};
use crate::matchnet::{MaskWeighting, MatchConfig, SimAggregation, ThresholdScope};
use crate::simnet::{ClsLossConfig, ClsLossKind};

/// Name of the effective-config snapshot written into output directories.
pub const CONFIG_LOCK: &str = "config.lock";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskHead {
    /// Cosine similarity to projected prototypes.
    #[default]
    Similarity,
    /// Learned per-level `1×1` projection.
    Conv1x1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub temp: f64,
    pub delta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub k: usize,
    pub n_k: usize,
    pub logit_scale: f64,
    pub level_weights: [f64; 3],
    pub threshold_scope: ThresholdScope,
    pub mask_weighting: MaskWeighting,
    pub adaptive_threshold: bool,
    pub sim_aggregation: SimAggregation,
    pub cls_loss: ClsLossKind,
    pub mask_head: MaskHead,
    pub channel_dims: [usize; 3],
    pub encoder_seed: u64,
    pub embed_dim: usize,
    pub white_level: f32,
    pub white_limit: f32,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub augment_flips: bool,
    pub label_gated_export: bool,
    pub biou_radius: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            theta1: 1.0,
            theta2: 0.5,
            temp: 1.0,
            delta: 0.15,
            lr: 1e-5,
            weight_decay: 0.003,
            epochs: 10,
            batch_size: 10,
            seed: 0,
            k: 3,
            n_k: 100,
            logit_scale: 10.0,
            level_weights: [1.0; 3],
            threshold_scope: ThresholdScope::PerClass,
            mask_weighting: MaskWeighting::Clamp,
            adaptive_threshold: true,
            sim_aggregation: SimAggregation::AsWritten,
            cls_loss: ClsLossKind::Bce,
            mask_head: MaskHead::Similarity,
            channel_dims: [16, 32, 64],
            encoder_seed: 0,
            embed_dim: 32,
            white_level: crate::data::DEFAULT_WHITE_LEVEL,
            white_limit: crate::data::DEFAULT_WHITE_LIMIT,
            kmeans_restarts: 10,
            kmeans_max_iter: 100,
            augment_flips: true,
            label_gated_export: true,
            biou_radius: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PbipError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PbipError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| PbipError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| PbipError::io(path, e))
    }

    /// Writes the `config.lock` snapshot into `dir`.
    pub fn write_lock(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PbipError::io(dir, e))?;
        self.save(&dir.join(CONFIG_LOCK))
    }

    /// Applies a `key=value` override, parsing the value as a TOML literal
    /// and falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| PbipError::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config is a table");
        if !table.contains_key(key) {
            return Err(PbipError::Config(format!("unknown config key `{key}`")));
        }
        table.insert(key.to_string(), parsed);
        let updated: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| PbipError::Config(format!("bad value for `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PbipError::Config(msg));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.level_weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("level weights must be non-negative".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 || self.n_k == 0 {
            return bad("K and N_K must be at least 1".into());
        }
        if !(self.logit_scale > 0.0) {
            return bad("logit_scale must be positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.white_level) || !(0.0..=1.0).contains(&self.white_limit) {
            return bad("white_level and white_limit must lie in [0, 1]".into());
        }
        if self.seed > i64::MAX as u64 || self.encoder_seed > i64::MAX as u64 {
            return bad("seeds must fit in a signed 64-bit integer".into());
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iter == 0 {
            return bad("k-means restarts and iterations must be at least 1".into());
        }
        crate::encoders::ToyBackbone::new(self.channel_dims)?;
        self.match_config().validate()
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            delta: self.delta,
            threshold_scope: self.threshold_scope,
            weighting: self.mask_weighting,
            adaptive_threshold: self.adaptive_threshold,
            temp: self.temp,
            theta1: self.theta1,
            theta2: self.theta2,
            aggregation: self.sim_aggregation,
        }
    }

    pub fn cls_config(&self) -> ClsLossConfig {
        ClsLossConfig {
            logit_scale: self.logit_scale,
            level_weights: self.level_weights,
            kind: self.cls_loss,
        }
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            k: self.k,
            n_k: self.n_k,
            white_level: self.white_level,
            white_limit: self.white_limit,
            seed: self.seed,
            max_iter: self.kmeans_max_iter,
            n_init: self.kmeans_restarts,
        }
    }

    pub fn hash(&self) -> String {
        crate::codec::short_hash(self.to_toml_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("threshold_scope = \"per_class\""));
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = TrainConfig::from_toml_str("beta = 0.0\nmask_head = \"conv1x1\"\n").unwrap();
        assert_eq!(cfg.beta, 0.0);
        assert_eq!(cfg.mask_head, MaskHead::Conv1x1);
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_toml_str("epochs = 0").is_err());
        assert!(TrainConfig::from_toml_str("delta = 1.5").is_err());
        assert!(TrainConfig::from_toml_str("lr = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("alpha = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = TrainConfig::default();
        cfg.set("k=5").unwrap();
        cfg.set("threshold_scope = global").unwrap();
        cfg.set("level_weights=[1.0, 0.5, 0.25]").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.threshold_scope, ThresholdScope::Global);
        assert_eq!(cfg.level_weights, [1.0, 0.5, 0.25]);
        assert!(cfg.set("epochs=0").is_err());
        assert_eq!(cfg.epochs, 10);
        assert!(cfg.set("bogus=1").is_err());
        assert!(cfg.set("novalue").is_err());
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            beta in 0.0f64..5.0, delta in 0.0f64..1.0, k in 1usize..8, seed in 0u64..(i64::MAX as u64), epochs in 1usize..50,
        ) {
            let cfg = TrainConfig { beta, delta, k, seed, epochs, ..TrainConfig::default() };
            let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
