//! Feature-consistency and disparity-accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::geometry::{self, MatchMask, PositivePairSet, DEFAULT_DELTA};
use crate::grid::Grid;
use crate::net::{self, NetworkConfig};
use crate::params::ParamSet;
use crate::scf::{FeatureMap, View};

fn check_pairs(left: &FeatureMap, right: &FeatureMap, pairs: &PositivePairSet) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no positive pairs"));
    }
    if left.values.shape() != right.values.shape() {
        return Err(Error::shape(
            format!("{:?}", left.values.shape()),
            format!("{:?}", right.values.shape()),
        ));
    }
    let (w, h) = (left.width(), left.height());
    if pairs
        .pairs
        .iter()
        .any(|p| p.query.0 >= w || p.key.0 >= w || p.query.1 >= h || p.key.1 >= h)
    {
        return Err(Error::InvalidArgument("pair outside the feature map".into()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cosine similarity over paired feature vectors.
pub fn cosine_consistency(left: &FeatureMap, right: &FeatureMap, pairs: &PositivePairSet) -> Result<f64> {
    check_pairs(left, right, pairs)?;
    let mut total = 0.0;
    for p in &pairs.pairs {
        let q = left.vector(p.query.0, p.query.1);
        let k = right.vector(p.key.0, p.key.1);
        let (nq, nk) = (norm(&q), norm(&k));
        if nq == 0.0 || nk == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        total += q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (nq * nk);
    }
    Ok(total / pairs.len() as f64)
}

/// Per-channel mean absolute difference over pairs; vectors are
/// unit-normalized first when `normalize` is set.
pub fn per_channel_inconsistency(
    left: &FeatureMap,
    right: &FeatureMap,
    pairs: &PositivePairSet,
    normalize: bool,
) -> Result<Vec<f64>> {
    check_pairs(left, right, pairs)?;
    let mut out = vec![0.0; left.channels()];
    for p in &pairs.pairs {
        let mut q = left.vector(p.query.0, p.query.1);
        let mut k = right.vector(p.key.0, p.key.1);
        if normalize {
            for v in [&mut q, &mut k] {
                let n = norm(v);
                if n == 0.0 {
                    return Err(Error::DegenerateFeature);
                }
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        for (o, (a, b)) in out.iter_mut().zip(q.iter().zip(&k)) {
            *o += (a - b).abs();
        }
    }
    let n = pairs.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

fn count_errors(
    pred: &Grid<f64>,
    gt: &Grid<f64>,
    valid: &Grid<bool>,
    mut bad: impl FnMut(f64, f64) -> bool,
) -> Result<(usize, usize)> {
    if !pred.same_dims(gt) || !valid.same_dims(gt) {
        return Err(Error::shape(format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    let mut n = 0;
    let mut errors = 0;
    for ((&p, &g), &m) in pred.as_slice().iter().zip(gt.as_slice()).zip(valid.as_slice()) {
        if m {
            n += 1;
            errors += bad(p, g) as usize;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no valid ground-truth pixels"));
    }
    Ok((errors, n))
}

/// Percentage of valid pixels with `|pred − gt| > t`.
pub fn threshold_error_rate(pred: &Grid<f64>, gt: &Grid<f64>, valid: &Grid<bool>, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive (got {t})")));
    }
    let (e, n) = count_errors(pred, gt, valid, |p, g| (p - g).abs() > t)?;
    Ok(100.0 * e as f64 / n as f64)
}

/// KITTI D1: error above 3 px and above 5% of the ground truth.
pub fn d1(pred: &Grid<f64>, gt: &Grid<f64>, valid: &Grid<bool>) -> Result<f64> {
    let (e, n) = count_errors(pred, gt, valid, |p, g| {
        let err = (p - g).abs();
        err > 3.0 && err > 0.05 * g.abs()
    })?;
    Ok(100.0 * e as f64 / n as f64)
}

/// One evaluation row: one sample under one style (or an aggregate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_id: String,
    pub style_tag: String,
    /// Over mask-filtered pairs; `None` without a feature encoder or pairs.
    pub mean_cosine: Option<f64>,
    /// Over every in-bounds pair, ignoring the occlusion mask.
    pub mean_cosine_unmasked: Option<f64>,
    pub pair_count: usize,
    pub per_channel_abs_diff: Vec<f64>,
    pub err_gt_1px: f64,
    pub err_gt_2px: f64,
    pub err_gt_3px: f64,
    pub d1_all: f64,
    pub pixel_count: usize,
}

pub const CSV_HEADER: &str =
    "sample_id,style_tag,mean_cosine,mean_cosine_unmasked,pair_count,err_gt_1px,err_gt_2px,err_gt_3px,d1_all,pixel_count,per_channel_abs_diff";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let channels: Vec<String> = self.per_channel_abs_diff.iter().map(|x| format!("{x:.9}")).collect();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.sample_id,
            self.style_tag,
            opt(self.mean_cosine),
            opt(self.mean_cosine_unmasked),
            self.pair_count,
            self.err_gt_1px,
            self.err_gt_2px,
            self.err_gt_3px,
            self.d1_all,
            self.pixel_count,
            channels.join(";"),
        )
    }

    /// Pixel-count-weighted error rates and pair-count-weighted
    /// consistency over a set of per-sample reports.
    pub fn aggregate(id: &str, style_tag: &str, reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::UndefinedMetric("no reports to aggregate"));
        }
        let pixels: usize = reports.iter().map(|r| r.pixel_count).sum();
        let weighted = |f: fn(&MetricsReport) -> f64| {
            reports.iter().map(|r| f(r) * r.pixel_count as f64).sum::<f64>() / pixels.max(1) as f64
        };
        let pair_weighted = |f: fn(&MetricsReport) -> Option<f64>| {
            let (mut sum, mut n) = (0.0, 0usize);
            for r in reports {
                if let Some(v) = f(r) {
                    sum += v * r.pair_count as f64;
                    n += r.pair_count;
                }
            }
            (n > 0).then(|| sum / n as f64)
        };
        let pairs: usize = reports.iter().filter(|r| r.mean_cosine.is_some()).map(|r| r.pair_count).sum();
        let channels = reports.iter().map(|r| r.per_channel_abs_diff.len()).max().unwrap_or(0);
        let mut per_channel = vec![0.0; channels];
        if pairs > 0 {
            for r in reports.iter().filter(|r| r.per_channel_abs_diff.len() == channels) {
                for (o, v) in per_channel.iter_mut().zip(&r.per_channel_abs_diff) {
                    *o += v * r.pair_count as f64 / pairs as f64;
                }
            }
        }
        Ok(Self {
            sample_id: id.to_string(),
            style_tag: style_tag.to_string(),
            mean_cosine: pair_weighted(|r| r.mean_cosine),
            mean_cosine_unmasked: pair_weighted(|r| r.mean_cosine_unmasked),
            pair_count: pairs,
            per_channel_abs_diff: per_channel,
            err_gt_1px: weighted(|r| r.err_gt_1px),
            err_gt_2px: weighted(|r| r.err_gt_2px),
            err_gt_3px: weighted(|r| r.err_gt_3px),
            d1_all: weighted(|r| r.d1_all),
            pixel_count: pixels,
        })
    }
}

/// Ground-truth validity (finite, non-negative) of the left disparity.
pub fn gt_valid(gt: &Grid<f64>) -> Grid<bool> {
    gt.map(|d| d.is_finite() && *d >= 0.0)
}

/// Consistency of the query encoder's left/right features on one sample.
pub struct Consistency {
    pub masked: Option<f64>,
    pub unmasked: Option<f64>,
    pub per_channel: Vec<f64>,
    pub pair_count: usize,
}

pub fn feature_consistency(
    sample: &StereoSample,
    params: &ParamSet,
    cfg: &NetworkConfig,
    delta: f64,
) -> Result<Consistency> {
    let left = net::extract_features(&sample.left, params, cfg, View::Left)?;
    let right = net::extract_features(&sample.right, params, cfg, View::Right)?;
    let (mask, _) = geometry::mask_for(&sample.disparity_left, sample.disparity_right.as_ref(), delta)?;
    let pairs = geometry::collect_positive_pairs(&sample.disparity_left, &mask, cfg.stride)?;
    let all = MatchMask {
        m: sample.disparity_left.map(|_| true),
        delta,
    };
    let all_pairs = geometry::collect_positive_pairs(&sample.disparity_left, &all, cfg.stride)?;
    let masked = (!pairs.is_empty()).then(|| cosine_consistency(&left, &right, &pairs)).transpose()?;
    let unmasked = (!all_pairs.is_empty())
        .then(|| cosine_consistency(&left, &right, &all_pairs))
        .transpose()?;
    let per_channel = if pairs.is_empty() {
        Vec::new()
    } else {
        per_channel_inconsistency(&left, &right, &pairs, true)?
    };
    Ok(Consistency {
        masked,
        unmasked,
        per_channel,
        pair_count: pairs.len(),
    })
}

/// Predicts a sample and scores it against its ground truth.
pub fn evaluate_sample(sample: &StereoSample, params: &ParamSet, cfg: &NetworkConfig) -> Result<MetricsReport> {
    let pred = net::infer(&sample.left, &sample.right, params, cfg)?;
    let consistency = if cfg.uses_encoder() {
        Some(feature_consistency(sample, params, cfg, DEFAULT_DELTA)?)
    } else {
        None
    };
    report_for(sample, &pred, consistency)
}

pub fn report_for(sample: &StereoSample, pred: &Grid<f64>, consistency: Option<Consistency>) -> Result<MetricsReport> {
    let gt = &sample.disparity_left;
    let valid = gt_valid(gt);
    let c = consistency.unwrap_or(Consistency {
        masked: None,
        unmasked: None,
        per_channel: Vec::new(),
        pair_count: 0,
    });
    Ok(MetricsReport {
        sample_id: sample.sample_id.clone(),
        style_tag: sample.style_tag.clone(),
        mean_cosine: c.masked,
        mean_cosine_unmasked: c.unmasked,
        pair_count: c.pair_count,
        per_channel_abs_diff: c.per_channel,
        err_gt_1px: threshold_error_rate(pred, gt, &valid, 1.0)?,
        err_gt_2px: threshold_error_rate(pred, gt, &valid, 2.0)?,
        err_gt_3px: threshold_error_rate(pred, gt, &valid, 3.0)?,
        d1_all: d1(pred, gt, &valid)?,
        pixel_count: valid.count_true(),
    })
}
