//! Cost volumes built without learned features: a winner-take-all SAD
//! matcher, and the RGB-volume versus feature-volume degradation study.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, NamedStyle};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::experiment::{self, Split};
use crate::grid::{Grid, Image};
use crate::metrics::{gt_valid, threshold_error_rate};
use crate::net::{self, VolumeKind};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineVariant {
    RgbVolume,
    FeatureVolume,
    WtaSad,
}

impl BaselineVariant {
    pub const ALL: [BaselineVariant; 3] = [Self::RgbVolume, Self::FeatureVolume, Self::WtaSad];

    pub fn name(self) -> &'static str {
        match self {
            Self::RgbVolume => "rgb-volume",
            Self::FeatureVolume => "feature-volume",
            Self::WtaSad => "wta-sad",
        }
    }
}

impl fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline variant '{s}'")))
    }
}

/// >3px error (percent) before and after the style shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub variant: BaselineVariant,
    pub in_style_err: f64,
    pub shifted_style_err: f64,
    pub degradation: f64,
}

impl BaselineResult {
    pub fn new(variant: BaselineVariant, in_style_err: f64, shifted_style_err: f64) -> Self {
        Self {
            variant,
            in_style_err,
            shifted_style_err,
            degradation: shifted_style_err - in_style_err,
        }
    }
}

/// Per-pixel arg-min over `d ∈ [0, max_disp)` of the windowed sum of
/// absolute colour differences. The window is clamped at the image border
/// (edge pixels replicate); disparities that would leave the right image
/// are not considered. Ties go to the smaller disparity.
pub fn wta_sad_match(left: &Image, right: &Image, window: usize, max_disp: usize) -> Result<Grid<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd and positive, got {window}")));
    }
    if max_disp == 0 {
        return Err(Error::InvalidArgument("max_disp must be positive".into()));
    }
    if left.dims() != right.dims() {
        return Err(Error::shape(format!("{:?}", left.dims()), format!("{:?}", right.dims())));
    }
    let (w, h) = left.dims();
    let r = (window / 2) as i64;
    let clamp = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
    let mut best = Grid::filled(w, h, (f64::INFINITY, 0usize));
    let mut diff = vec![0.0; w * h];
    for d in 0..max_disp.min(w) {
        // Per-pixel cost, with the right coordinate clamped like the window.
        for v in 0..h {
            for u in 0..w {
                let ur = clamp(u as i64 - d as i64, w);
                diff[v * w + u] = (0..Image::CHANNELS)
                    .map(|c| (left.get(c, u, v) - right.get(c, ur, v)).abs())
                    .sum();
            }
        }
        for v in 0..h {
            for u in d..w {
                let mut sad = 0.0;
                for dv in -r..=r {
                    let vv = clamp(v as i64 + dv, h);
                    for du in -r..=r {
                        sad += diff[vv * w + clamp(u as i64 + du, w)];
                    }
                }
                let cell = best.get_mut(u, v);
                if sad < cell.0 {
                    *cell = (sad, d);
                }
            }
        }
    }
    Ok(best.map(|&(_, d)| d as f64))
}

/// >3px error of the WTA matcher on one sample.
pub fn wta_error(sample: &StereoSample, window: usize, max_disp: usize) -> Result<f64> {
    let pred = wta_sad_match(&sample.left, &sample.right, window, max_disp)?;
    let gt = &sample.disparity_left;
    threshold_error_rate(&pred, gt, &gt_valid(gt), 3.0)
}

/// Configuration of a learned variant: either volume kind, no consistency losses.
pub fn variant_config(base: &ExperimentConfig, variant: BaselineVariant) -> Result<ExperimentConfig> {
    let kind = match variant {
        BaselineVariant::RgbVolume => VolumeKind::Rgb,
        BaselineVariant::FeatureVolume => VolumeKind::Correlation,
        BaselineVariant::WtaSad => {
            return Err(Error::InvalidArgument("wta-sad has no trainable configuration".into()));
        }
    };
    let mut cfg = base.clone();
    cfg.set_ablation(Ablation {
        contrastive: false,
        momentum: false,
        whitening: false,
    });
    cfg.net.volume_kind = kind;
    cfg.validate()?;
    Ok(cfg)
}

/// Pixel-weighted >3px error of `params` on `test` rendered in `style`.
fn styled_error(cfg: &ExperimentConfig, params: &ParamSet, test: &[StereoSample], style: &NamedStyle, slot: u64) -> Result<f64> {
    let (mut wrong, mut total) = (0.0, 0usize);
    for s in experiment::styled(test, style, cfg.seed, slot)? {
        let pred = net::infer(&s.left, &s.right, params, &cfg.net)?;
        let valid = gt_valid(&s.disparity_left);
        let n = valid.count_true();
        wrong += threshold_error_rate(&pred, &s.disparity_left, &valid, 3.0)? * n as f64;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { wrong / total as f64 })
}

/// Degradation of an already-trained learned variant.
pub fn evaluate_variant(
    cfg: &ExperimentConfig,
    params: &ParamSet,
    variant: BaselineVariant,
    test: &[StereoSample],
    in_style: &NamedStyle,
    shifted: &NamedStyle,
) -> Result<BaselineResult> {
    Ok(BaselineResult::new(
        variant,
        styled_error(cfg, params, test, in_style, 0)?,
        styled_error(cfg, params, test, shifted, 1)?,
    ))
}

/// Trains each learned variant on the training style only and measures the
/// >3px error on held-out scenes in the training style and in `shift`.
pub fn run_style_shift_comparison(
    base: &ExperimentConfig,
    shift: &NamedStyle,
    variants: &[BaselineVariant],
    wta_window: usize,
) -> Result<Vec<BaselineResult>> {
    let test = experiment::generate_split(base, Split::Test)?;
    let in_style = NamedStyle {
        name: "in-style".into(),
        style: base.data.train_style.clone(),
    };
    variants
        .iter()
        .map(|&variant| match variant {
            BaselineVariant::WtaSad => {
                let err = |style: &NamedStyle, slot: u64| -> Result<f64> {
                    let (mut wrong, mut total) = (0.0, 0usize);
                    for s in experiment::styled(&test, style, base.seed, slot)? {
                        let n = gt_valid(&s.disparity_left).count_true();
                        wrong += wta_error(&s, wta_window, base.net.max_disp)? * n as f64;
                        total += n;
                    }
                    Ok(if total == 0 { 0.0 } else { wrong / total as f64 })
                };
                Ok(BaselineResult::new(variant, err(&in_style, 0)?, err(shift, 1)?))
            }
            _ => {
                let cfg = variant_config(base, variant)?;
                let outcome = experiment::train_in_memory(&cfg)?;
                evaluate_variant(&cfg, &outcome.trainer.params, variant, &test, &in_style, shift)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_rds, sample_rng, DisparityPlane, SceneParams, SceneSpec};

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..3 * w * h)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Image::from_planar(w, h, data).unwrap()
    }

    #[test]
    fn zero_disparity_scene_predicts_zero() {
        let img = textured(20, 12, 3);
        let pred = wta_sad_match(&img, &img, 5, 8).unwrap();
        assert!(pred.as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn ties_prefer_smaller_disparity() {
        // Constant images: every disparity has SAD 0.
        let img = Image::from_gray(&Grid::filled(10, 4, 0.5));
        let pred = wta_sad_match(&img, &img, 3, 6).unwrap();
        assert!(pred.as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn recovers_integer_shift() {
        let right = textured(32, 10, 9);
        let left = right.shifted_right(4);
        let pred = wta_sad_match(&left, &right, 5, 10).unwrap();
        let ok = (8..32).flat_map(|u| (0..10).map(move |v| (u, v))).filter(|&(u, v)| *pred.get(u, v) == 4.0).count();
        assert_eq!(ok, 24 * 10);
    }

    #[test]
    fn brightness_offset_is_invisible() {
        let right = textured(24, 8, 5);
        let left = right.shifted_right(3);
        let plus = |img: &Image| {
            let mut out = img.clone();
            out.as_mut_slice().iter_mut().for_each(|x| *x += 0.25);
            out
        };
        let a = wta_sad_match(&left, &right, 3, 8).unwrap();
        let b = wta_sad_match(&plus(&left), &plus(&right), 3, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_even_window() {
        let img = textured(8, 8, 1);
        assert!(wta_sad_match(&img, &img, 4, 4).is_err());
        assert!(wta_sad_match(&img, &img, 0, 4).is_err());
    }

    #[test]
    fn noiseless_integer_rds_is_matched() {
        let (mut exact, mut total) = (0, 0);
        for seed in 0..4 {
            let mut spec = SceneSpec::random(&mut sample_rng(seed, 0), 64, 64, 32, &SceneParams::default());
            spec.background = DisparityPlane::flat(spec.background.base.round());
            for l in &mut spec.layers {
                l.plane = DisparityPlane::flat(l.plane.base.round());
            }
            let s = generate_rds(seed, 64, 64, 32, &spec).unwrap();
            let pred = wta_sad_match(&s.left, &s.right, 5, 32).unwrap();
            for v in 0..64 {
                for u in 0..64 {
                    if *s.occlusion_left.get(u, v) {
                        total += 1;
                        exact += (*pred.get(u, v) == *s.disparity_left.get(u, v)) as usize;
                    }
                }
            }
        }
        assert!(exact as f64 >= 0.95 * total as f64, "{exact}/{total}");
    }

    #[test]
    fn degradation_is_the_difference() {
        let r = BaselineResult::new(BaselineVariant::RgbVolume, 12.5, 20.0);
        assert_eq!(r.degradation, 7.5);
        assert_eq!("feature-volume".parse::<BaselineVariant>().unwrap(), BaselineVariant::FeatureVolume);
    }
}
