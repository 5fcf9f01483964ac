//! Experiment orchestration shared by the CLI and the acceptance suite:
//! corpus splits, in-memory training, and evaluation across styles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, NamedStyle};
use crate::data::{apply_style, generate_corpus_sample, sample_rng, StereoSample};
use crate::error::Result;
use crate::metrics::{self, MetricsReport};
use crate::params::ParamSet;
use crate::train::{PreparedSample, StepRecord, Trainer};

/// Held-out scenes use indices from here on, disjoint from training.
pub const TEST_INDEX_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Deterministic corpus split; training samples carry the training style.
pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<StereoSample>> {
    let d = &cfg.data;
    let (base, count) = match split {
        Split::Train => (0, d.train_scenes),
        Split::Test => (TEST_INDEX_BASE, d.test_scenes),
    };
    (0..count as u64)
        .map(|i| {
            let s = generate_corpus_sample(cfg.seed, base + i, d.height, d.width, d.max_disp, &d.scene)?;
            match split {
                Split::Train => apply_style(&s, &d.train_style, style_seed(cfg.seed, base + i, 0)),
                Split::Test => Ok(s),
            }
        })
        .collect()
}

/// Seed for the photometric noise of sample `index` under style slot `slot`.
pub fn style_seed(seed: u64, index: u64, slot: u64) -> u64 {
    let mut rng = sample_rng(seed ^ 0x5354_594c_4500_0000 ^ slot.wrapping_mul(0x9e37_79b9), index);
    rng.random()
}

/// The held-out samples rendered under one evaluation style.
pub fn styled(samples: &[StereoSample], style: &NamedStyle, seed: u64, slot: u64) -> Result<Vec<StereoSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut out = apply_style(s, &style.style, style_seed(seed, i as u64, slot + 1))?;
            out.style_tag = style.name.clone();
            Ok(out)
        })
        .collect()
}

pub fn prepare(cfg: &ExperimentConfig, samples: &[StereoSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| PreparedSample::new(s, cfg.net.max_disp, cfg.net.stride, cfg.eval.delta))
        .collect()
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<StepRecord>,
}

/// Trains on the generated training split without touching the disk.
pub fn train_in_memory(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let samples = generate_split(cfg, Split::Train)?;
    let prepared = prepare(cfg, &samples)?;
    let mut trainer = Trainer::new(cfg, prepared.len())?;
    let mut log = Vec::new();
    trainer.run(&prepared, samples.first(), |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome { trainer, log })
}

/// Per-style aggregate plus the per-sample rows behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEvaluation {
    pub style: String,
    pub aggregate: MetricsReport,
    pub samples: Vec<MetricsReport>,
}

pub fn evaluate(cfg: &ExperimentConfig, params: &ParamSet, test: &[StereoSample]) -> Result<Vec<StyleEvaluation>> {
    cfg.eval
        .styles
        .iter()
        .enumerate()
        .map(|(slot, style)| {
            let samples = styled(test, style, cfg.seed, slot as u64)?;
            let rows = samples
                .iter()
                .map(|s| metrics::evaluate_sample(s, params, &cfg.net))
                .collect::<Result<Vec<_>>>()?;
            Ok(StyleEvaluation {
                style: style.name.clone(),
                aggregate: MetricsReport::aggregate("all", &style.name, &rows)?,
                samples: rows,
            })
        })
        .collect()
}

/// Ablation label of a configuration (`baseline`, `C`, `C+M+W`, ...).
pub fn variant_label(cfg: &ExperimentConfig) -> String {
    let Ablation {
        contrastive,
        momentum,
        whitening,
    } = cfg.ablation();
    let mut parts = Vec::new();
    if contrastive {
        parts.push("C");
    }
    if momentum {
        parts.push("M");
    }
    if whitening {
        parts.push("W");
    }
    let core = if parts.is_empty() { "baseline".to_string() } else { parts.join("+") };
    match cfg.net.volume_kind {
        crate::net::VolumeKind::Correlation => core,
        other => format!("{core}/{other}-volume"),
    }
}

/// Momentum as reported in sweeps: 0 stands for "no key encoder / queue".
pub fn effective_momentum(cfg: &ExperimentConfig) -> f64 {
    if cfg.ablation().momentum {
        cfg.scf.momentum
    } else {
        0.0
    }
}

/// One row of a run summary (one per evaluation style).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub momentum: f64,
    pub volume_kind: String,
    pub style: String,
    pub mean_cosine: Option<f64>,
    pub mean_cosine_unmasked: Option<f64>,
    pub err_gt_1px: f64,
    pub err_gt_2px: f64,
    pub err_gt_3px: f64,
    pub d1_all: f64,
    pub pixel_count: usize,
    /// Version of the producing library.
    pub version: String,
}

pub fn summary_rows(cfg: &ExperimentConfig, evals: &[StyleEvaluation]) -> Vec<SummaryRow> {
    evals
        .iter()
        .map(|e| SummaryRow {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            variant: variant_label(cfg),
            momentum: effective_momentum(cfg),
            volume_kind: cfg.net.volume_kind.to_string(),
            style: e.style.clone(),
            mean_cosine: e.aggregate.mean_cosine,
            mean_cosine_unmasked: e.aggregate.mean_cosine_unmasked,
            err_gt_1px: e.aggregate.err_gt_1px,
            err_gt_2px: e.aggregate.err_gt_2px,
            err_gt_3px: e.aggregate.err_gt_3px,
            d1_all: e.aggregate.d1_all,
            pixel_count: e.aggregate.pixel_count,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_scenes = 2;
        cfg.data.test_scenes = 2;
        let a = generate_split(&cfg, Split::Train).unwrap();
        let b = generate_split(&cfg, Split::Train).unwrap();
        let t = generate_split(&cfg, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].left, t[0].left);
        assert_ne!(a[0].sample_id, t[0].sample_id);
    }

    #[test]
    fn labels_follow_ablation() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(variant_label(&cfg), "C+M+W");
        assert_eq!(effective_momentum(&cfg), 0.9);
        cfg.set_ablation(Ablation {
            contrastive: true,
            momentum: false,
            whitening: false,
        });
        assert_eq!(variant_label(&cfg), "C");
        assert_eq!(effective_momentum(&cfg), 0.0);
        cfg.scf.enabled = false;
        cfg.net.volume_kind = crate::net::VolumeKind::Rgb;
        assert_eq!(variant_label(&cfg), "baseline/rgb-volume");
    }

    #[test]
    fn identity_style_keeps_images() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.test_scenes = 1;
        let t = generate_split(&cfg, Split::Test).unwrap();
        let s = styled(&t, &cfg.eval.styles[0], 0, 0).unwrap();
        assert_eq!(s[0].left, t[0].left);
        assert_eq!(s[0].style_tag, "in-style");
        let shifted = styled(&t, &cfg.eval.styles[1], 0, 1).unwrap();
        assert_ne!(shifted[0].left, t[0].left);
        assert_eq!(shifted[0].disparity_left, t[0].disparity_left);
    }
}
