//! Model and training configuration. Defaults are the reference
//! hyperparameters; fields without a reference value are marked.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length in hours.
    pub window: usize,
    /// Forecast horizon in hours.
    pub horizon: usize,
    /// Width of the per-series lift (no reference value; chosen here).
    pub lift_dim: usize,
    /// Temporal embedding width.
    pub temporal_dim: usize,
    /// Fine-tuned semantic embedding width.
    pub semantic_dim: usize,
    /// Raw sentence-embedding width (no reference value; chosen here).
    pub embed_dim: usize,
    /// Attention heads for the inter-series scores.
    pub heads: usize,
    /// Width of the two hidden graph-convolution layers (no reference value; chosen here).
    pub gcn_hidden: usize,
    /// Node embedding width after graph convolution.
    pub gcn_out: usize,
    /// Case-amplification exponent.
    pub amplification: f64,
    /// Adjacency threshold applied after amplification.
    pub threshold: f64,
    /// Gaussian-kernel cutoff as a multiple of the distance standard deviation.
    pub tau_factor: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 24,
            horizon: 6,
            lift_dim: 64,
            temporal_dim: 128,
            semantic_dim: 168,
            embed_dim: 768,
            heads: 8,
            gcn_hidden: 64,
            gcn_out: 32,
            amplification: 2.5,
            threshold: 0.15,
            tau_factor: 2.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("horizon", self.horizon),
            ("lift_dim", self.lift_dim),
            ("temporal_dim", self.temporal_dim),
            ("semantic_dim", self.semantic_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("gcn_hidden", self.gcn_hidden),
            ("gcn_out", self.gcn_out),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.temporal_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "temporal_dim {} is not divisible by {} heads",
                self.temporal_dim, self.heads
            )));
        }
        if self.amplification <= 0.0 {
            return Err(Error::Config("amplification must be > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.tau_factor <= 0.0 {
            return Err(Error::Config("tau_factor must be > 0".into()));
        }
        Ok(())
    }
}

/// Component switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop semantic features and semantic similarity (gate = spatial only).
    pub no_semantics: bool,
    /// Drop spatial similarity (gate = semantic only).
    pub no_space: bool,
    /// Drop category and global meta-nodes.
    pub no_metanodes: bool,
    /// Temporal embedding = layer_norm(final GRU state).
    pub no_self_attention: bool,
    /// Keep the fused adjacency unthresholded.
    pub no_adj_threshold: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = [
        "no_semantics",
        "no_space",
        "no_metanodes",
        "no_self_attention",
        "no_adj_threshold",
    ];

    pub fn single(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        a.enable(name)?;
        Ok(a)
    }

    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_semantics" => self.no_semantics = true,
            "no_space" => self.no_space = true,
            "no_metanodes" => self.no_metanodes = true,
            "no_self_attention" => self.no_self_attention = true,
            "no_adj_threshold" => self.no_adj_threshold = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn enabled(&self) -> Vec<&'static str> {
        let flags = [
            self.no_semantics,
            self.no_space,
            self.no_metanodes,
            self.no_self_attention,
            self.no_adj_threshold,
        ];
        Self::VARIANTS
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.enabled().is_empty()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = self.enabled();
        if on.is_empty() {
            write!(f, "full")
        } else {
            write!(f, "{}", on.join("+"))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean absolute error on normalised values.
    #[default]
    Mae,
    /// Mean squared error on normalised values.
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}` (mae|mse)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied every `decay_every` epochs; 1.0 disables decay.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// RMSProp smoothing constant (no reference value; chosen here).
    pub rho: f64,
    /// RMSProp denominator guard (no reference value; chosen here).
    pub eps: f64,
    /// Chronological train/validation/test fractions.
    pub split: [f64; 3],
    /// Window stride in hours (no reference value; chosen here).
    pub stride: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay_factor: 0.2,
            decay_every: 10,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            loss: LossKind::Mae,
            rho: 0.99,
            eps: 1e-8,
            split: [0.70, 0.20, 0.10],
            stride: 1,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Config("rho must lie in (0, 1) and eps be > 0".into()));
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.ablation.no_semantics && self.ablation.no_space {
            return Err(Error::Config(
                "no_semantics and no_space together leave the gate undefined".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            temporal_dim: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_names_round_trip() {
        for name in Ablation::VARIANTS {
            let a = Ablation::single(name).unwrap();
            assert_eq!(a.enabled(), vec![name]);
            assert_eq!(a.to_string(), name);
        }
        assert!(Ablation::single("no_gnn").is_err());
        assert_eq!(Ablation::default().to_string(), "full");
    }
}
