//! Run configuration, loaded from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model variants for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Separate encoder and transfer stacks per modality.
    NoSharing,
    /// Transfer loss is logged but kept out of the objective.
    NoFtloss,
    /// Transfer stack removed; Gram alignment applied directly to encoder outputs.
    NoSftnet,
    /// Image branch severed; fusion is the identity on point tokens.
    NoImage,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSharing,
        Variant::NoFtloss,
        Variant::NoSftnet,
        Variant::NoImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSharing => "no_sharing",
            Variant::NoFtloss => "no_ftloss",
            Variant::NoSftnet => "no_sftnet",
            Variant::NoImage => "no_image",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected one of full, no_sharing, no_ftloss, no_sftnet, no_image)")))
    }
}

/// One FPS + ball-query + pooling stage of the point tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub centers: usize,
    pub radius: f64,
    pub max_k: usize,
    /// Output feature width; the last stage must match the token width.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub sfe_depth: usize,
    pub sft_depth: usize,
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub input_points: usize,
    pub output_points: usize,
    pub stages: Vec<StageConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokens: 64,
            channels: 128,
            heads: 4,
            sfe_depth: 4,
            sft_depth: 2,
            decoder_depth: 2,
            decoder_hidden: 256,
            image_height: 64,
            image_width: 64,
            patch: 8,
            input_points: 512,
            output_points: 1024,
            stages: vec![
                StageConfig { centers: 128, radius: 0.2, max_k: 16, width: 64 },
                StageConfig { centers: 64, radius: 0.4, max_k: 16, width: 128 },
            ],
        }
    }
}

impl ModelConfig {
    /// A model small enough to train on a single CPU core in minutes:
    /// 16 tokens of width 32, 32×32 images, 128-point partial inputs.
    pub fn small() -> Self {
        ModelConfig {
            tokens: 16,
            channels: 32,
            heads: 2,
            sfe_depth: 2,
            sft_depth: 1,
            decoder_depth: 1,
            decoder_hidden: 64,
            image_height: 32,
            image_width: 32,
            patch: 8,
            input_points: 128,
            output_points: 256,
            stages: vec![
                StageConfig { centers: 48, radius: 0.2, max_k: 8, width: 16 },
                StageConfig { centers: 16, radius: 0.4, max_k: 8, width: 32 },
            ],
        }
    }

    /// The gradient-check model: 8 tokens of width 16, one block per stack.
    pub fn tiny() -> Self {
        ModelConfig {
            tokens: 8,
            channels: 16,
            heads: 2,
            sfe_depth: 1,
            sft_depth: 1,
            decoder_depth: 1,
            decoder_hidden: 16,
            image_height: 8,
            image_width: 16,
            patch: 4,
            input_points: 32,
            output_points: 32,
            stages: vec![
                StageConfig { centers: 16, radius: 0.3, max_k: 4, width: 8 },
                StageConfig { centers: 8, radius: 0.5, max_k: 4, width: 16 },
            ],
        }
    }

    pub fn image_tokens(&self) -> usize {
        if self.patch == 0 {
            return 0;
        }
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn points_per_token(&self) -> usize {
        self.output_points / self.tokens.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("heads", self.heads),
            ("decoder_hidden", self.decoder_hidden),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch", self.patch),
            ("input_points", self.input_points),
            ("output_points", self.output_points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!("channels {} not divisible by heads {}", self.channels, self.heads)));
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_height, self.image_width, self.patch
            )));
        }
        if self.image_tokens() != self.tokens {
            return Err(Error::config(format!(
                "image yields {} tokens but the point tokenizer yields {}",
                self.image_tokens(),
                self.tokens
            )));
        }
        if !self.output_points.is_multiple_of(self.tokens) {
            return Err(Error::config(format!(
                "output_points {} must be a multiple of tokens {}",
                self.output_points, self.tokens
            )));
        }
        let Some(last) = self.stages.last() else {
            return Err(Error::config("point tokenizer needs at least one stage"));
        };
        if last.centers != self.tokens || last.width != self.channels {
            return Err(Error::config(format!(
                "last tokenizer stage must produce {} centers of width {}",
                self.tokens, self.channels
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.centers == 0 || s.max_k == 0 || s.width == 0 || !(s.radius > 0.0) {
                return Err(Error::config(format!("tokenizer stage {i} has a zero size or non-positive radius")));
            }
        }
        if self.input_points < self.tokens {
            return Err(Error::config("input_points must be at least the token count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay from `learning_rate` down to `learning_rate * min_lr_ratio`.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr_ratio: 0.0,
        }
    }
}

/// Synthetic dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub complete_points: usize,
    pub partial_points: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Splat radius in pixels used when rendering views.
    pub splat_radius: f64,
    /// Minimum azimuth separation between occlusion and rendering viewpoints, degrees.
    pub min_view_separation_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 256,
            val_samples: 64,
            complete_points: 1024,
            partial_points: 512,
            image_height: 64,
            image_width: 64,
            splat_radius: 1.5,
            min_view_separation_deg: 30.0,
        }
    }
}

impl DataConfig {
    pub fn small() -> Self {
        DataConfig {
            complete_points: 256,
            partial_points: 128,
            image_height: 32,
            image_width: 32,
            splat_radius: 1.2,
            ..DataConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.complete_points == 0 || self.partial_points == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("data sizes must be at least 1"));
        }
        if !(self.splat_radius > 0.0) {
            return Err(Error::config("data.splat_radius must be positive"));
        }
        if !(0.0..=180.0).contains(&self.min_view_separation_deg) {
            return Err(Error::config("data.min_view_separation_deg must lie in [0, 180]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Weight of the feature-transfer loss in the total objective.
    pub alpha: f64,
    /// Threshold on squared nearest-neighbor distance for the F-score.
    pub fscore_threshold: f64,
    /// Dataset manifest used by `train`/`eval`.
    pub manifest: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            alpha: 0.01,
            fscore_threshold: 0.001,
            manifest: None,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EGIINET_SEED";

impl RunConfig {
    /// Small model and data preset matched to each other.
    pub fn small() -> Self {
        RunConfig {
            model: ModelConfig::small(),
            data: DataConfig::small(),
            optim: OptimConfig {
                learning_rate: 1e-3,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Gradient-check sized model with matching data.
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            data: DataConfig {
                complete_points: 64,
                partial_points: 32,
                image_height: 8,
                image_width: 16,
                splat_radius: 1.0,
                ..DataConfig::default()
            },
            optim: OptimConfig {
                learning_rate: 1e-3,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Reads a config file whose missing keys fall back to `base` rather
    /// than to the desk defaults.
    pub fn load_over(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: toml::Table = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let mut merged: toml::Table = toml::from_str(&base.to_toml_string()).expect("serialized config parses");
        merge(&mut merged, overlay);
        Self::from_toml_str(&toml::to_string(&merged).expect("table serializes")).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Applies `EGIINET_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.fscore_threshold > 0.0) {
            return Err(Error::config("fscore_threshold must be positive"));
        }
        if self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(Error::config("optim.epochs and optim.batch_size must be at least 1"));
        }
        if !(self.optim.learning_rate > 0.0) {
            return Err(Error::config("optim.learning_rate must be positive"));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.data.partial_points < self.model.tokens {
            return Err(Error::config("data.partial_points must be at least model.tokens"));
        }
        if (self.data.image_height, self.data.image_width) != (self.model.image_height, self.model.image_width) {
            return Err(Error::config("data image size must match model image size"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::small().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
        let mismatched = RunConfig {
            model: ModelConfig::tiny(),
            ..RunConfig::small()
        };
        assert!(mismatched.validate().is_err());
    }

    #[test]
    fn overlay_keeps_base_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "alpha = 0.5\n[optim]\nepochs = 2\n").unwrap();
        let cfg = RunConfig::load_over(&RunConfig::small(), &path).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.optim.learning_rate, 1e-3);
        assert_eq!(cfg.model, ModelConfig::small());
        std::fs::write(&path, "[model]\nwidth = 3\n").unwrap();
        assert!(RunConfig::load_over(&RunConfig::small(), &path).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::small();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 9\nvariant = \"no_image\"\n[optim]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.variant, Variant::NoImage);
        assert_eq!(cfg.optim.epochs, 3);
        assert_eq!(cfg.optim.batch_size, 8);
        assert_eq!(cfg.alpha, 0.01);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml_str("alpha = 0.0").is_err());
        assert!(RunConfig::from_toml_str("variant = \"no_decoder\"").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        let mut cfg = RunConfig::default();
        cfg.model.patch = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.model.output_points = 1000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("w/o image".parse::<Variant>().is_err());
    }
}
