//! Run configuration: JSON-file schema plus derived geometry.

use crate::error::{Error, Result};
use crate::graph::MarginKind;
use crate::kernels::conv_out_len;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Linear,
    Metric,
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadVariant::Linear),
            "metric" => Ok(HeadVariant::Metric),
            other => Err(Error::usage(format!("unknown head variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// (1-alpha) * CE(metric logits) + alpha * CE(transformer logits)
    Weighted,
    /// CE(metric logits + transformer logits)
    SummedLogits,
    /// Metric branch only; the transformer head is not evaluated.
    MetricOnly,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(CombineMode::Weighted),
            "summed_logits" => Ok(CombineMode::SummedLogits),
            "metric_only" => Ok(CombineMode::MetricOnly),
            other => Err(Error::usage(format!("unknown combine mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    None,
    Learned,
}

impl std::str::FromStr for PositionalEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PositionalEncoding::None),
            "learned" => Ok(PositionalEncoding::Learned),
            other => Err(Error::usage(format!("unknown positional encoding '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// (channels, height, width)
    pub input_size: (usize, usize, usize),
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
    /// batchnorm after the L1 linear map (paper-faithful face heads)
    pub l1_batchnorm: bool,
    pub bn_momentum: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: (3, 32, 32),
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: vec![1, 1, 1],
            embedding_dim: 64,
            l1_batchnorm: false,
            bn_momentum: 0.1,
        }
    }
}

impl BackboneConfig {
    /// Final feature-map geometry (H_f, W_f, D_f): the stem keeps the input
    /// resolution, every stage entry block halves it.
    pub fn final_map(&self) -> Result<(usize, usize, usize)> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len()
        {
            return Err(Error::config(format!(
                "stage_channels ({}) and blocks_per_stage ({}) must be nonempty and equal length",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        let (mut h, mut w) = (self.input_size.1, self.input_size.2);
        for _ in &self.stage_channels {
            h = conv_out_len(h, 3, 2, 1);
            w = conv_out_len(w, 3, 2, 1);
        }
        if h <= 1 || w <= 1 {
            return Err(Error::config(format!(
                "final feature map {h}x{w} violates the split rule (needs height > 1 and width > 1)"
            )));
        }
        Ok((h, w, *self.stage_channels.last().unwrap()))
    }

    pub fn seq_len(&self) -> Result<usize> {
        let (h, w, _) = self.final_map()?;
        Ok(h * w)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// feedforward width as a multiple of the model dim
    pub feedforward_mult: usize,
    pub dropout: f32,
    pub positional_encoding: PositionalEncoding,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            feedforward_mult: 4,
            dropout: 0.0,
            positional_encoding: PositionalEncoding::None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.num_heads == 0 || model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {model_dim} not divisible by num_heads {}",
                self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: MarginKind,
    pub scale: f32,
    /// None picks the per-kind default: 0.35 cosface, 0.45 arcface, 0.4 adaface.
    pub margin: Option<f32>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: MarginKind::Arcface,
            scale: 64.0,
            margin: None,
        }
    }
}

impl HeadConfig {
    pub fn margin(&self) -> f32 {
        self.margin.unwrap_or(match self.kind {
            MarginKind::Softmax => 0.0,
            MarginKind::Cosface => 0.35,
            MarginKind::Arcface => 0.45,
            MarginKind::Adaface => 0.4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::config("scale must be positive"));
        }
        let m = self.margin();
        let ok = match self.kind {
            MarginKind::Softmax => true,
            MarginKind::Cosface | MarginKind::Adaface => (0.0..1.0).contains(&m),
            MarginKind::Arcface => (0.0..std::f32::consts::FRAC_PI_2).contains(&m),
        };
        if !ok {
            return Err(Error::config(format!(
                "margin {m} out of range for {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f32,
    pub combine_mode: CombineMode,
    pub head_variant: HeadVariant,
    pub lr0: f32,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// run holdout verification every k epochs; 0 disables
    pub eval_every: usize,
    /// checkpoint every k epochs in addition to epoch 0 and the final one; 0
    /// keeps only those two
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.4,
            combine_mode: CombineMode::Weighted,
            head_variant: HeadVariant::Linear,
            lr0: 0.1,
            lr_drop_epochs: vec![10, 18, 22],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 20,
            seed: 7,
            deterministic: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.combine_mode == CombineMode::Weighted && !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::usage(format!(
                "alpha {} outside (0, 1) in weighted mode",
                self.alpha
            )));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("lr_drop_epochs must be strictly increasing"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        Ok(())
    }

    /// lr(epoch) = lr0 / factor^(number of drops at or before `epoch`),
    /// 1-based epochs, drop effective at the start of the named epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr0 / self.lr_drop_factor.powi(drops as i32)
    }
}

/// Synthetic-data parameters used by `synth` and the end-to-end runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub holdout_fraction: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            holdout_fraction: 0.2,
        }
    }
}

/// Everything a run needs; this is the JSON config-file schema. CLI flags
/// override individual fields.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let (_, _, d_f) = self.backbone.final_map()?;
        self.encoder.validate(d_f)?;
        self.head.validate()?;
        self.train.validate()
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.final_map().unwrap(), (4, 4, 128));
        assert_eq!(cfg.seq_len().unwrap(), 16);
    }

    #[test]
    fn paper_faithful_geometry() {
        // 112x112 input, four stages -> 7x7 map, S_f = 49
        let cfg = BackboneConfig {
            input_size: (3, 112, 112),
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![1, 1, 1, 1],
            embedding_dim: 512,
            ..Default::default()
        };
        let (h, w, d) = cfg.final_map().unwrap();
        assert_eq!((h, w, d), (7, 7, 512));
        assert_eq!(cfg.seq_len().unwrap(), 49);
    }

    #[test]
    fn split_rule_enforced() {
        let cfg = BackboneConfig {
            input_size: (3, 8, 8),
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
            ..Default::default()
        };
        assert!(cfg.final_map().is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 0.1);
        assert_eq!(cfg.lr_at_epoch(9), 0.1);
        assert!((cfg.lr_at_epoch(10) - 0.01).abs() < 1e-9);
        assert!((cfg.lr_at_epoch(11) - 0.01).abs() < 1e-9);
        assert!((cfg.lr_at_epoch(18) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at_epoch(30) - 0.0001).abs() < 1e-9);
    }

    #[test]
    fn alpha_range_checked() {
        let mut cfg = TrainConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.combine_mode = CombineMode::MetricOnly;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn margin_defaults_per_kind() {
        let mk = |kind| HeadConfig {
            kind,
            ..Default::default()
        };
        assert_eq!(mk(MarginKind::Cosface).margin(), 0.35);
        assert_eq!(mk(MarginKind::Arcface).margin(), 0.45);
        assert_eq!(mk(MarginKind::Adaface).margin(), 0.4);
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.backbone.stage_channels, cfg.backbone.stage_channels);
        assert_eq!(back.train.alpha, cfg.train.alpha);
    }
}
