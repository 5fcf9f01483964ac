//! Stereo contrastive feature loss.
//!
//! Left (query) feature vectors are pulled toward the right (key) vector at
//! the ground-truth match and pushed away from non-matching right vectors
//! sampled around the match plus every entry of a FIFO queue of keys from
//! earlier iterations. Keys come from a momentum copy of the query encoder
//! and never receive gradients.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PositivePair, PositivePairSet};
use crate::grid::Grid;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Left,
    Right,
}

/// `C × H × W` feature grid at a known stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
    pub view: View,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: usize, view: View) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shape("[C, H, W]", format!("{:?}", values.shape())));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if !values.all_finite() {
            return Err(Error::InvalidArgument("feature map has non-finite entries".into()));
        }
        Ok(Self { values, stride, view })
    }

    pub fn channels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    /// Feature vector at cell `(u, v)`.
    pub fn vector(&self, u: usize, v: usize) -> Vec<f64> {
        gather(&self.values, u, v)
    }
}

pub(crate) fn gather(values: &Tensor, u: usize, v: usize) -> Vec<f64> {
    let (c, h, w) = (values.dim(0), values.dim(1), values.dim(2));
    let data = values.data();
    (0..c).map(|k| data[(k * h + v) * w + u]).collect()
}

// ---------------------------------------------------------------------------
// Momentum encoder

/// Query parameters θ and their exponential moving average η.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoderPair {
    pub query: ParamSet,
    pub key: ParamSet,
    pub momentum: f64,
    pub iteration: u64,
}

impl MomentumEncoderPair {
    /// Starts with η equal to θ.
    pub fn new(query: ParamSet, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            key: query.clone(),
            query,
            momentum,
            iteration: 0,
        })
    }

    /// `η ← m·η + (1 − m)·θ`, then advances the iteration counter.
    pub fn update(&mut self) -> Result<()> {
        check_momentum(self.momentum)?;
        if !self.query.same_layout(&self.key) {
            return Err(Error::shape("key layout equal to query layout", "different layout"));
        }
        momentum_update(self.key.data_mut(), self.query.data(), self.momentum)?;
        self.iteration += 1;
        Ok(())
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("momentum must be in [0, 1], got {m}")))
    }
}

/// Elementwise moving average on raw parameter slices.
pub fn momentum_update(key: &mut [f64], query: &[f64], momentum: f64) -> Result<()> {
    check_momentum(momentum)?;
    if key.len() != query.len() {
        return Err(Error::shape(query.len(), key.len()));
    }
    if momentum == 1.0 {
        return Ok(());
    }
    if momentum == 0.0 {
        key.copy_from_slice(query);
        return Ok(());
    }
    for (k, q) in key.iter_mut().zip(query) {
        *k = momentum * *k + (1.0 - momentum) * q;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Queue

/// Fixed-capacity FIFO of key vectors; the oldest entries are evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn push(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        if let Some(bad) = keys.iter().find(|k| k.len() != self.dim) {
            return Err(Error::shape(self.dim, bad.len()));
        }
        let skip = keys.len().saturating_sub(self.capacity);
        for key in &keys[skip..] {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(key.clone());
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Positive term included (standard InfoNCE, always non-negative).
    #[default]
    IncludePositive,
    /// Negatives only in the denominator (can go negative).
    NegativesOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCenter {
    /// Around the ground-truth match `(u - d, v)` in the right map.
    #[default]
    Match,
    /// Around the query's own coordinate.
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfConfig {
    /// Window negatives per query (`N`).
    pub negatives: usize,
    /// Window side in image pixels; divided by the stride for feature cells.
    pub window: usize,
    /// Queue capacity (`K`).
    pub queue_capacity: usize,
    pub tau: f64,
    pub normalize: bool,
    pub queue_push_per_step: usize,
    pub denominator: Denominator,
    pub window_center: WindowCenter,
    /// Horizontal cells on each side of the match excluded from sampling.
    pub exclusion_radius: usize,
    /// Optional cap on positive pairs per sample (uniform subsample).
    pub max_pairs: Option<usize>,
}

impl Default for ScfConfig {
    fn default() -> Self {
        Self {
            negatives: 60,
            window: 50,
            queue_capacity: 6000,
            tau: 0.07,
            normalize: true,
            queue_push_per_step: 256,
            denominator: Denominator::IncludePositive,
            window_center: WindowCenter::Match,
            exclusion_radius: 1,
            max_pairs: None,
        }
    }
}

impl ScfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("scf.tau must be positive, got {}", self.tau)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("scf.negatives must be at least 1".into()));
        }
        if self.window < 3 {
            return Err(Error::Config(format!("scf.window must be at least 3, got {}", self.window)));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("scf.queue_capacity must be positive".into()));
        }
        Ok(())
    }

    /// Window side in feature cells.
    pub fn window_cells(&self, stride: usize) -> usize {
        (self.window / stride.max(1)).max(1)
    }
}

// ---------------------------------------------------------------------------
// Negative sampling

/// Sampled negative cells for one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeDraw {
    pub cells: Vec<(usize, usize)>,
    /// Fewer candidates than requested; drawn with replacement.
    pub with_replacement: bool,
}

/// Candidate cells in the clamped window around `center`, minus the center
/// and its horizontal neighbors within `exclusion_radius`.
pub fn negative_candidates(
    width: usize,
    height: usize,
    center: (usize, usize),
    window_cells: usize,
    exclusion_radius: usize,
) -> Vec<(usize, usize)> {
    let half = (window_cells / 2) as i64;
    let (cu, cv) = (center.0 as i64, center.1 as i64);
    let u0 = (cu - half).max(0);
    let u1 = (cu - half + window_cells as i64).min(width as i64);
    let v0 = (cv - half).max(0);
    let v1 = (cv - half + window_cells as i64).min(height as i64);
    let mut out = Vec::new();
    for v in v0..v1 {
        for u in u0..u1 {
            if v == cv && (u - cu).unsigned_abs() as usize <= exclusion_radius {
                continue;
            }
            out.push((u as usize, v as usize));
        }
    }
    out
}

pub fn sample_negative_cells(
    width: usize,
    height: usize,
    center: (usize, usize),
    stride: usize,
    cfg: &ScfConfig,
    rng: &mut impl Rng,
) -> NegativeDraw {
    let candidates = negative_candidates(
        width,
        height,
        center,
        cfg.window_cells(stride),
        cfg.exclusion_radius,
    );
    let n = cfg.negatives;
    if candidates.is_empty() {
        return NegativeDraw {
            cells: Vec::new(),
            with_replacement: true,
        };
    }
    if candidates.len() >= n {
        let picks = index::sample(rng, candidates.len(), n);
        NegativeDraw {
            cells: picks.iter().map(|i| candidates[i]).collect(),
            with_replacement: false,
        }
    } else {
        NegativeDraw {
            cells: (0..n)
                .map(|_| candidates[rng.random_range(0..candidates.len())])
                .collect(),
            with_replacement: true,
        }
    }
}

/// `N` negative vectors from `right` around `match_coord`.
pub fn sample_negatives(
    right: &FeatureMap,
    match_coord: (usize, usize),
    cfg: &ScfConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, NegativeDraw)> {
    if match_coord.0 >= right.width() || match_coord.1 >= right.height() {
        return Err(Error::InvalidArgument(format!(
            "match coordinate {match_coord:?} outside {}x{} map",
            right.width(),
            right.height()
        )));
    }
    let draw = sample_negative_cells(right.width(), right.height(), match_coord, right.stride, cfg, rng);
    let vectors = draw.cells.iter().map(|&(u, v)| right.vector(u, v)).collect();
    Ok((vectors, draw))
}

// ---------------------------------------------------------------------------
// InfoNCE

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Pixel-wise InfoNCE with the positive in the denominator.
pub fn pixel_infonce(
    query: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    normalize: bool,
) -> Result<f64> {
    pixel_infonce_with(query, positive, negatives, tau, normalize, Denominator::IncludePositive)
}

pub fn pixel_infonce_with(
    query: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    normalize: bool,
    denominator: Denominator,
) -> Result<f64> {
    let dim = query.len();
    if positive.len() != dim {
        return Err(Error::shape(dim, positive.len()));
    }
    if let Some(n) = negatives.iter().find(|n| n.len() != dim) {
        return Err(Error::shape(dim, n.len()));
    }
    let prep = |x: &[f64]| -> Result<Vec<f64>> {
        if normalize {
            normalized(x)
        } else {
            Ok(x.to_vec())
        }
    };
    let q = prep(query)?;
    let z_pos = dot(&q, &prep(positive)?) / tau;
    let z_neg = negatives
        .iter()
        .map(|n| Ok(dot(&q, &prep(n)?) / tau))
        .collect::<Result<Vec<f64>>>()?;
    Ok(match denominator {
        Denominator::IncludePositive => {
            let lse = log_sum_exp(std::iter::once(z_pos).chain(z_neg.iter().copied()));
            (lse - z_pos).max(0.0)
        }
        Denominator::NegativesOnly => {
            if z_neg.is_empty() {
                0.0
            } else {
                log_sum_exp(z_neg.iter().copied()) - z_pos
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Full loss

/// Negatives drawn for every positive pair of one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScfBatch {
    pub pairs: Vec<PositivePair>,
    pub negatives: Vec<Vec<(usize, usize)>>,
    /// Pairs whose window held fewer than `N` candidates.
    pub undersampled: usize,
}

impl ScfBatch {
    pub fn sample(
        pairs: &PositivePairSet,
        width: usize,
        height: usize,
        cfg: &ScfConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let selected: Vec<PositivePair> = match cfg.max_pairs {
            Some(cap) if pairs.len() > cap => {
                let mut idx = index::sample(rng, pairs.len(), cap).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| pairs.pairs[i]).collect()
            }
            _ => pairs.pairs.clone(),
        };
        let mut undersampled = 0;
        let negatives = selected
            .iter()
            .map(|p| {
                let center = match cfg.window_center {
                    WindowCenter::Match => p.key,
                    WindowCenter::Query => p.query,
                };
                let draw = sample_negative_cells(width, height, center, pairs.stride, cfg, rng);
                undersampled += draw.with_replacement as usize;
                draw.cells
            })
            .collect();
        Self {
            pairs: selected,
            negatives,
            undersampled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScfOutput {
    pub loss: f64,
    /// Per-query loss at feature resolution (zero where no pair).
    pub per_pixel: Grid<f64>,
    /// No positive pairs: loss is zero and the batch contributed nothing.
    pub skipped: bool,
    pub undersampled: usize,
    /// Gradient with respect to the left feature values, when requested.
    pub grad_left: Option<Tensor>,
}

/// Evaluates the loss (and optionally its gradient with respect to the left
/// features) for pre-sampled negatives.
pub fn scf_evaluate(
    left: &Tensor,
    right: &Tensor,
    batch: &ScfBatch,
    queue: &NegativeQueue,
    cfg: &ScfConfig,
    want_grad: bool,
) -> Result<ScfOutput> {
    if left.shape() != right.shape() || left.shape().len() != 3 {
        return Err(Error::shape(format!("{:?}", left.shape()), format!("{:?}", right.shape())));
    }
    let (c, h, w) = (left.dim(0), left.dim(1), left.dim(2));
    if !queue.is_empty() && queue.dim() != c {
        return Err(Error::shape(c, queue.dim()));
    }
    let mut per_pixel = Grid::filled(w, h, 0.0);
    let mut grad = want_grad.then(|| Tensor::zeros(left.shape()));
    if batch.pairs.is_empty() {
        return Ok(ScfOutput {
            loss: 0.0,
            per_pixel,
            skipped: true,
            undersampled: batch.undersampled,
            grad_left: grad,
        });
    }
    let prep = |x: Vec<f64>| -> Result<Vec<f64>> {
        if cfg.normalize {
            normalized(&x)
        } else {
            Ok(x)
        }
    };
    // Queue entries are used as stored; normalize them only when needed.
    let queue_vecs: Vec<Vec<f64>> = queue
        .iter()
        .map(|k| prep(k.clone()))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.pairs.len() as f64;
    let inv_tau = 1.0 / cfg.tau;
    let mut total = 0.0;
    let mut logits: Vec<f64> = Vec::new();
    let mut keys: Vec<Vec<f64>> = Vec::new();
    for (pair, negs) in batch.pairs.iter().zip(&batch.negatives) {
        let raw_q = gather(left, pair.query.0, pair.query.1);
        let q_norm = norm(&raw_q);
        let q = prep(raw_q)?;
        keys.clear();
        keys.push(prep(gather(right, pair.key.0, pair.key.1))?);
        for &(u, v) in negs {
            keys.push(prep(gather(right, u, v))?);
        }
        logits.clear();
        logits.extend(keys.iter().map(|k| dot(&q, k) * inv_tau));
        logits.extend(queue_vecs.iter().map(|k| dot(&q, k) * inv_tau));
        let z_pos = logits[0];
        let (loss, probs_from) = match cfg.denominator {
            Denominator::IncludePositive => {
                ((log_sum_exp(logits.iter().copied()) - z_pos).max(0.0), 0)
            }
            Denominator::NegativesOnly if logits.len() > 1 => {
                (log_sum_exp(logits[1..].iter().copied()) - z_pos, 1)
            }
            Denominator::NegativesOnly => (0.0, 1),
        };
        per_pixel.set(pair.query.0, pair.query.1, loss);
        total += loss;

        if let Some(g) = grad.as_mut() {
            // dL/dz: softmax over the denominator terms, minus 1 on the positive.
            let tail = &logits[probs_from..];
            let lse = log_sum_exp(tail.iter().copied());
            let mut dq = vec![0.0; c];
            if !tail.is_empty() {
                for (j, &z) in logits.iter().enumerate().skip(probs_from) {
                    let p = (z - lse).exp();
                    let key = if j < keys.len() { &keys[j] } else { &queue_vecs[j - keys.len()] };
                    for (d, k) in dq.iter_mut().zip(key) {
                        *d += p * k;
                    }
                }
            }
            for (d, k) in dq.iter_mut().zip(&keys[0]) {
                *d -= k;
            }
            for d in &mut dq {
                *d *= inv_tau * scale;
            }
            if cfg.normalize {
                // Chain through q̂ = q / |q|.
                let proj = dot(&q, &dq);
                for (d, qh) in dq.iter_mut().zip(&q) {
                    *d = (*d - qh * proj) / q_norm;
                }
            }
            let data = g.data_mut();
            for (k, d) in dq.iter().enumerate() {
                data[(k * h + pair.query.1) * w + pair.query.0] += d;
            }
        }
    }
    Ok(ScfOutput {
        loss: total * scale,
        per_pixel,
        skipped: false,
        undersampled: batch.undersampled,
        grad_left: grad,
    })
}

/// Samples negatives for every pair and evaluates the masked-average loss.
pub fn scf_loss(
    left: &FeatureMap,
    right: &FeatureMap,
    pairs: &PositivePairSet,
    queue: &NegativeQueue,
    cfg: &ScfConfig,
    rng: &mut impl Rng,
) -> Result<ScfOutput> {
    if left.stride != right.stride {
        return Err(Error::InvalidArgument(format!(
            "stride mismatch: left {} vs right {}",
            left.stride, right.stride
        )));
    }
    if left.values.shape() != right.values.shape() {
        return Err(Error::shape(
            format!("{:?}", left.values.shape()),
            format!("{:?}", right.values.shape()),
        ));
    }
    if !pairs.is_empty() && pairs.stride != left.stride {
        return Err(Error::InvalidArgument(format!(
            "pair stride {} does not match feature stride {}",
            pairs.stride, left.stride
        )));
    }
    let (w, h) = (left.width(), left.height());
    if let Some(p) = pairs
        .pairs
        .iter()
        .find(|p| p.query.0 >= w || p.key.0 >= w || p.query.1 >= h || p.key.1 >= h)
    {
        return Err(Error::InvalidArgument(format!("pair {p:?} outside {w}x{h} map")));
    }
    let batch = ScfBatch::sample(pairs, w, h, cfg, rng);
    scf_evaluate(&left.values, &right.values, &batch, queue, cfg, false)
}

/// Key vectors to enqueue after a step: `count` cells drawn uniformly
/// without replacement from the key map (all cells if fewer).
pub fn select_queue_keys(right_keys: &Tensor, count: usize, normalize: bool, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let (h, w) = (right_keys.dim(1), right_keys.dim(2));
    let cells = h * w;
    let picks: Vec<usize> = if count >= cells {
        (0..cells).collect()
    } else {
        index::sample(rng, cells, count).into_vec()
    };
    picks
        .into_iter()
        .map(|i| {
            let v = gather(right_keys, i % w, i / w);
            if normalize {
                normalized(&v)
            } else {
                Ok(v)
            }
        })
        .collect()
}
