//! Run configuration. Field names double as config-file keys; the
//! dimension fields keep their single-letter names (`T`, `L`, `N`, `H`, `W`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: LrDecay,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            lr_decay: LrDecay::Cosine,
            min_lr: 0.0,
            grad_clip: 0.0,
        }
    }
}

/// Backbone widths. `fields` lists the number of feature fields per U-Net
/// level; each field spans `group_order` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub equivariant: bool,
    pub fields: Vec<usize>,
    pub embed_fields: usize,
    pub head_hidden: usize,
    pub attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            equivariant: true,
            fields: vec![4, 8, 8],
            embed_fields: 8,
            head_hidden: 128,
            attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub schedule_kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Weight of the state noise error; the action error gets `1 - gamma`.
    pub gamma: f64,
    pub group_order: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    #[serde(rename = "N")]
    pub points: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub optimizer: OptimizerConfig,
    pub network: NetworkConfig,
}

impl Default for DiffusionConfig {
    /// Desk-scale defaults: 16x16 clips of 3 frames, 6-point trajectories.
    fn default() -> Self {
        Self {
            steps: 100,
            schedule_kind: ScheduleKind::Linear,
            beta_start: 1e-3,
            beta_end: 0.2,
            gamma: 0.5,
            group_order: 4,
            frames: 3,
            points: 6,
            height: 16,
            width: 16,
            optimizer: OptimizerConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl DiffusionConfig {
    /// Full-resolution preset: 128x128 inputs, batch 32, lr 1e-4, 200 epochs.
    pub fn full_scale() -> Self {
        Self {
            height: 128,
            width: 128,
            network: NetworkConfig {
                fields: vec![8, 16, 32],
                embed_fields: 16,
                head_hidden: 256,
                ..NetworkConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn state_len(&self) -> usize {
        self.frames * self.height * self.width * 3
    }

    pub fn action_len(&self) -> usize {
        self.points * 2
    }

    /// Input channels of the state image stack.
    pub fn state_channels(&self) -> usize {
        self.frames * 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("T", self.steps),
            ("L", self.frames),
            ("N", self.points),
            ("H", self.height),
            ("W", self.width),
            ("group_order", self.group_order),
            ("batch_size", self.optimizer.batch_size),
            ("embed_fields", self.network.embed_fields),
            ("head_hidden", self.network.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.height != self.width {
            return Err(Error::config("inputs must be square (H = W)"));
        }
        if 4 % self.group_order != 0 {
            return Err(Error::config(format!(
                "group order {} does not act exactly on the pixel grid (use 1, 2 or 4)",
                self.group_order
            )));
        }
        let levels = self.network.fields.len();
        if levels == 0 || self.network.fields.contains(&0) {
            return Err(Error::config("network.fields must be non-empty and positive"));
        }
        let down = 1usize << (levels - 1);
        if !self.height.is_multiple_of(down) {
            return Err(Error::config(format!(
                "H = {} is not divisible by {down} for {levels} U-Net levels",
                self.height
            )));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = DiffusionConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert!(text.contains("T = 100"));
        assert!(text.contains("gamma = 0.5"));
        assert_eq!(DiffusionConfig::from_toml_str(&text).unwrap(), cfg);
        DiffusionConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = DiffusionConfig::from_toml_str("T = 10\ngamma = 0.25\n[optimizer]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.gamma, 0.25);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.optimizer.batch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "gamma = 1.5",
            "group_order = 3",
            "H = 16\nW = 8",
            "beta_start = 0.3\nbeta_end = 0.2",
            "unknown_key = 1",
            "L = 0",
        ] {
            assert!(DiffusionConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}
