//! Experiment configuration: one TOML file, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DomainStyle, SceneParams};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_DELTA;
use crate::net::{NetworkConfig, TotalLossConfig};
use crate::scf::ScfConfig;
use crate::ssw::SswConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "STEREO_CONSISTENCY_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Scenes stay strictly below this disparity.
    pub max_disp: usize,
    pub scene: SceneParams,
    /// Photometric style applied to training samples.
    pub train_style: DomainStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            height: 64,
            width: 64,
            max_disp: 48,
            scene: SceneParams::default(),
            train_style: DomainStyle::identity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfSection {
    pub enabled: bool,
    /// Momentum key encoder plus negative queue. When off, keys are the
    /// detached query features of the right view and no queue is kept.
    pub momentum_encoder: bool,
    pub momentum: f64,
    #[serde(flatten)]
    pub params: ScfConfig,
}

impl Default for ScfSection {
    fn default() -> Self {
        Self {
            enabled: true,
            momentum_encoder: true,
            momentum: 0.9,
            params: ScfConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SswSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: SswConfig,
}

impl Default for SswSection {
    fn default() -> Self {
        Self {
            enabled: true,
            params: SswConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for the first phase.
    pub lr: f64,
    /// Step size for the final `late_fraction` of the steps.
    pub lr_late: f64,
    pub late_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps between probe consistency measurements (0 disables).
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 1,
            lr: 1e-3,
            lr_late: 1e-4,
            late_fraction: 0.25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            probe_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedStyle {
    pub name: String,
    #[serde(flatten)]
    pub style: DomainStyle,
}

/// The held-out shift used throughout the acceptance runs: darker gamma,
/// reduced contrast, a brightness lift, a hue rotation and sensor noise,
/// the same transform for both views.
pub fn standard_shift() -> DomainStyle {
    DomainStyle {
        gamma: 1.8,
        brightness_offset: 0.1,
        contrast_scale: 0.6,
        noise_sigma: 0.02,
        hue_rotation: 1.0,
        ..DomainStyle::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub styles: Vec<NamedStyle>,
    /// Reprojection tolerance for the consistency pairs.
    pub delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            styles: vec![
                NamedStyle {
                    name: "in-style".into(),
                    style: DomainStyle::identity(),
                },
                NamedStyle {
                    name: "shifted".into(),
                    style: standard_shift(),
                },
            ],
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub net: NetworkConfig,
    pub scf: ScfSection,
    pub ssw: SswSection,
    pub loss: TotalLossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            net: NetworkConfig::default(),
            scf: ScfSection::default(),
            ssw: SswSection::default(),
            loss: TotalLossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Ablation cells: contrastive (C), momentum (M), whitening (W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub contrastive: bool,
    pub momentum: bool,
    pub whitening: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the output-root environment override, if present.
    pub fn with_env_output(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            self.output_dir = PathBuf::from(root);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        let d = &self.data;
        if d.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be positive".into()));
        }
        if d.height % self.net.stride != 0 || d.width % self.net.stride != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by net.stride {}",
                d.width, d.height, self.net.stride
            )));
        }
        if d.max_disp > self.net.max_disp {
            return Err(Error::Config(format!(
                "data.max_disp ({}) exceeds net.max_disp ({})",
                d.max_disp, self.net.max_disp
            )));
        }
        if d.max_disp >= d.width {
            return Err(Error::Config("data.max_disp must be below the image width".into()));
        }
        d.train_style.validate().map_err(|e| Error::Config(e.to_string()))?;
        for s in &self.eval.styles {
            s.style.validate().map_err(|e| Error::Config(format!("style `{}`: {e}", s.name)))?;
        }
        if self.scf.enabled {
            self.scf.params.validate().map_err(|e| Error::Config(e.to_string()))?;
            if !self.net.uses_encoder() {
                return Err(Error::Config("scf needs a feature encoder (volume_kind = rgb has none)".into()));
            }
            if self.scf.momentum_encoder && !(0.0..1.0).contains(&self.scf.momentum) {
                return Err(Error::Config("scf.momentum must lie in [0, 1)".into()));
            }
        }
        if self.ssw.enabled {
            self.ssw.params.validate()?;
            if let Some(l) = self.ssw.params.layers.iter().find(|l| !self.net.in_layers.contains(l)) {
                return Err(Error::Config(format!(
                    "ssw.layers entry {l} is not instance-normalized (net.in_layers = {:?})",
                    self.net.in_layers
                )));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0) || !(t.lr_late > 0.0) || !(0.0..=1.0).contains(&t.late_fraction) {
            return Err(Error::Config("invalid step-size schedule".into()));
        }
        if !(self.eval.delta > 0.0) {
            return Err(Error::Config("eval.delta must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of everything that influences results (the output
    /// location is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            contrastive: self.scf.enabled && self.loss.lambda_scf > 0.0,
            momentum: self.scf.enabled && self.scf.momentum_encoder,
            whitening: self.ssw.enabled && self.loss.lambda_ssw > 0.0,
        }
    }

    /// Sets the ablation switches; whitening also toggles instance
    /// normalization in the encoder.
    pub fn set_ablation(&mut self, a: Ablation) {
        self.scf.enabled = a.contrastive;
        self.scf.momentum_encoder = a.momentum;
        self.ssw.enabled = a.whitening;
        self.net.in_layers = if a.whitening { self.ssw.params.layers.clone() } else { Vec::new() };
    }

    /// Applies a `section.field=value` override (value parsed as TOML).
    /// Cross-field validation is left to the caller, so that dependent
    /// fields can be changed one at a time.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let parsed: toml::Value = toml::from_str(&format!("v = {}", value.trim()))
            .map(|t: toml::Table| t["v"].clone())
            .unwrap_or_else(|_| toml::Value::String(value.trim().to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
        }
        let updated: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        ensure_field(&updated, key)?;
        *self = updated;
        Ok(())
    }
}

/// Re-serializes `cfg` and checks that `key` survived, i.e. names a known field.
fn ensure_field(cfg: &ExperimentConfig, key: &str) -> Result<()> {
    let doc = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut slot = &doc;
    for part in key.trim().split('.') {
        slot = slot
            .get(part)
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_file_matches_builtin_defaults() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(ExperimentConfig::parse(text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::parse("seed = 9\n[scf]\nmomentum = 0.9\ntau = 0.1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scf.momentum, 0.9);
        assert_eq!(cfg.scf.params.tau, 0.1);
        assert_eq!(cfg.net, NetworkConfig::default());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::parse("[net]\nstride = 3\n").is_err());
        assert!(ExperimentConfig::parse("[net]\nin_layers = []\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nmax_disp = 60\n").is_err());
        assert!(ExperimentConfig::parse("seed = \"x\"").is_err());
    }

    #[test]
    fn overrides_and_ablations() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("scf.momentum=0.99").unwrap();
        cfg.apply_override("train.epochs = 2").unwrap();
        assert_eq!(cfg.scf.momentum, 0.99);
        assert_eq!(cfg.train.epochs, 2);
        assert!(cfg.apply_override("train.nonsense=1").is_err());
        assert!(cfg.apply_override("net.stride=x").is_err());
        let mut bad = cfg.clone();
        bad.apply_override("net.stride=5").unwrap();
        assert!(bad.validate().is_err());
        for bits in 0..8u8 {
            let a = Ablation {
                contrastive: bits & 1 != 0,
                momentum: bits & 2 != 0,
                whitening: bits & 4 != 0,
            };
            cfg.set_ablation(a);
            cfg.validate().unwrap();
            assert_eq!(cfg.ablation(), Ablation { momentum: a.momentum && a.contrastive, ..a });
        }
    }
}
