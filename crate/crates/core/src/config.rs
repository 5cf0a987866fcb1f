//! JSON configuration. Every field has a default, so a config file only
//! needs the keys it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SequenceSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub apn: ApnConfig,
    pub aan: AanConfig,
    pub heads: HeadsConfig,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Narrow network with the default spatial schedule and a 200-step
    /// schedule. Trains on a single CPU core in a few minutes.
    pub fn toy() -> Self {
        let mut cfg = Config::default();
        for (stage, width) in cfg.backbone.stages.iter_mut().zip([8, 16, 16, 16, 16]) {
            stage.out_channels = width;
        }
        cfg.apn.channels = 16;
        cfg.apn.ffn_hidden = 4;
        cfg.apn.head_channels = 16;
        cfg.aan.ffn_hidden = 4;
        cfg.heads.hidden_channels = 16;
        cfg.train.steps = 200;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "config",
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.tracker.validate()?;
        if self.apn.channels == 0 || self.apn.ffn_hidden == 0 || self.apn.head_channels == 0 {
            return Err(Error::Config("apn widths must be positive".into()));
        }
        if self.aan.ffn_hidden == 0 || self.heads.hidden_channels == 0 {
            return Err(Error::Config("aan/heads widths must be positive".into()));
        }
        if self.apn.anchor_base <= 0.0 {
            return Err(Error::Config("apn.anchor_base must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default)]
    pub pool: Option<PoolConfig>,
}

/// Five conv stages; the outputs of stages 4 and 5 are the feature pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let pool = Some(PoolConfig {
            kernel: 3,
            stride: 2,
        });
        let stage = |out_channels, kernel, stride, pad, pool| StageConfig {
            out_channels,
            kernel,
            stride,
            pad,
            pool,
        };
        Self {
            stages: vec![
                stage(96, 11, 2, 0, pool),
                stage(256, 5, 1, 0, pool),
                stage(384, 7, 1, 0, None),
                stage(384, 3, 1, 1, None),
                stage(256, 3, 1, 1, None),
            ],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs 5 stages, got {}",
                self.stages.len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("backbone stage {} has a zero field", i + 1)));
            }
        }
        for (i, s) in self.stages[3..].iter().enumerate() {
            let preserving = s.stride == 1 && s.kernel % 2 == 1 && s.pad == s.kernel / 2;
            if !preserving || s.pool.is_some() {
                return Err(Error::Config(format!(
                    "backbone stage {} must be stride 1 with spatial-preserving padding",
                    i + 4
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of both feature levels for an input of `size` pixels.
    pub fn feature_size(&self, size: usize) -> Result<usize> {
        let mut s = size;
        for (i, st) in self.stages.iter().enumerate() {
            s = crate::kernels::conv_out_len(s, st.kernel, st.stride, st.pad)
                .ok_or_else(|| too_small(size, i))?;
            if let Some(p) = st.pool {
                s = crate::kernels::conv_out_len(s, p.kernel, p.stride, 0)
                    .ok_or_else(|| too_small(size, i))?;
            }
        }
        Ok(s)
    }

    /// Product of all conv and pool strides.
    pub fn total_stride(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.stride * s.pool.map_or(1, |p| p.stride))
            .product()
    }

    pub fn f4_channels(&self) -> usize {
        self.stages[3].out_channels
    }

    pub fn f5_channels(&self) -> usize {
        self.stages[4].out_channels
    }
}

fn too_small(size: usize, stage: usize) -> Error {
    Error::Config(format!("input size {size} is too small for backbone stage {}", stage + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApnConfig {
    /// Width every reduction conv maps to.
    pub channels: usize,
    pub ffn_hidden: usize,
    /// Width of the first of the two anchor convs.
    pub head_channels: usize,
    /// Anchor side in search-image pixels at zero raw output.
    pub anchor_base: f64,
}

impl Default for ApnConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            ffn_hidden: 64,
            head_channels: 256,
            anchor_base: 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AanConfig {
    pub ffn_hidden: usize,
}

impl Default for AanConfig {
    fn default() -> Self {
        Self { ffn_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub hidden_channels: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 256,
        }
    }
}

/// Branch weights, the IoU-loss exponent and label thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Weight of the IoU loss on proposed anchors at cells inside the
    /// ground truth; 0 leaves the anchor head supervised only through the
    /// refined boxes.
    pub w_anchor: f64,
    pub alpha: f64,
    pub t_pos: f64,
    pub t_neg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w1: 1.2,
            w2: 1.0,
            w3: 1.0,
            w_anchor: 1.0,
            alpha: 1.5,
            t_pos: 0.6,
            t_neg: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 > 0.0 && self.w2 > 0.0 && self.w3 > 0.0) {
            return Err(Error::Config("loss weights w1, w2, w3 must be positive".into()));
        }
        if self.w_anchor.is_nan() || self.w_anchor < 0.0 {
            return Err(Error::Config("loss.w_anchor must be non-negative".into()));
        }
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(Error::Config(format!("alpha {} outside (1, 2]", self.alpha)));
        }
        if !(0.0 <= self.t_neg && self.t_neg < self.t_pos && self.t_pos <= 1.0) {
            return Err(Error::Config("need 0 <= t_neg < t_pos <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub template_size: usize,
    pub search_size: usize,
    /// Context margin as a fraction of `w + h`.
    pub context_amount: f64,
    pub window_influence: f64,
    pub penalty_k: f64,
    pub size_lr: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            template_size: 127,
            search_size: 287,
            context_amount: 0.5,
            window_influence: 0.4,
            penalty_k: 0.04,
            size_lr: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::Config("tracker.window_influence outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.size_lr) {
            return Err(Error::Config("tracker.size_lr outside [0, 1]".into()));
        }
        if self.template_size == 0 || self.search_size < self.template_size {
            return Err(Error::Config("need 0 < template_size <= search_size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; decays geometrically from `lr`.
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub num_triples: usize,
    /// Max shift of the search crop center, in search-image pixels.
    pub search_jitter: f64,
    /// Search crops are rescaled by `exp(u)`, `u` uniform in `[-s, s]`.
    pub scale_jitter: f64,
    pub sequence: SequenceSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 300,
            batch_size: 8,
            lr: 0.01,
            lr_end: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            num_triples: 16,
            search_jitter: 32.0,
            scale_jitter: 0.25,
            sequence: SequenceSpec::default(),
        }
    }
}
