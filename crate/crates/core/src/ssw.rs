//! Stereo selective whitening loss.
//!
//! Channel covariances of instance-normalized left and right features are
//! compared across samples; channel pairs whose covariance differs most
//! between the views form a selective mask, and the loss is the L1 norm of
//! the masked strict-upper covariance of the left features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Instance-normalized `C × N` matrix with the statistics needed for backprop.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFeature {
    pub x_hat: Tensor,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub layer: usize,
}

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [c, n] => Ok((c, n)),
        [c, h, w] => Ok((c, h * w)),
        _ => Err(Error::shape("[C, N] or [C, H, W]", format!("{:?}", x.shape()))),
    }
}

/// Per-row `(x - mean) / sqrt(var + epsilon)` with population variance.
/// Accepts `[C, N]` or `[C, H, W]` and keeps the input shape.
pub fn instance_normalize(x: &Tensor, epsilon: f64) -> Result<NormalizedFeature> {
    let (c, n) = rows(x)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 positions per row, got {n}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut out = x.clone();
    let mut mean = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    for (row, src) in out.data_mut().chunks_exact_mut(n).zip(x.data().chunks_exact(n)) {
        let mu = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + epsilon).sqrt();
        for (o, s) in row.iter_mut().zip(src) {
            *o = (s - mu) * is;
        }
        mean.push(mu);
        inv_std.push(is);
    }
    Ok(NormalizedFeature {
        x_hat: out,
        mean,
        inv_std,
        layer: 0,
    })
}

/// Gradient through instance normalization: maps `dL/dX̂` to `dL/dX`.
pub fn instance_normalize_backward(f: &NormalizedFeature, grad_out: &Tensor) -> Tensor {
    let (_, n) = rows(&f.x_hat).expect("normalized feature shape");
    let nf = n as f64;
    let mut grad = grad_out.clone();
    for ((g, xh), &is) in grad
        .data_mut()
        .chunks_exact_mut(n)
        .zip(f.x_hat.data().chunks_exact(n))
        .zip(&f.inv_std)
    {
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        for (gi, &x) in g.iter_mut().zip(xh) {
            *gi = is / nf * (nf * *gi - sum_g - x * sum_gx);
        }
    }
    grad
}

/// `Σ = X̂ X̂ᵀ / N`, exactly symmetric.
pub fn covariance(x_hat: &Tensor) -> Result<Tensor> {
    let (c, n) = rows(x_hat)?;
    let data = x_hat.data();
    let mut cov = Tensor::zeros(&[c, c]);
    let out = cov.data_mut();
    for i in 0..c {
        let ri = &data[i * n..(i + 1) * n];
        for j in i..c {
            let rj = &data[j * n..(j + 1) * n];
            let s = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            out[i * c + j] = s;
            out[j * c + i] = s;
        }
    }
    Ok(cov)
}

/// Elementwise left-right covariance variance over `N` samples.
pub fn variance_matrix(left: &[Tensor], right: &[Tensor]) -> Result<Tensor> {
    if left.len() != right.len() {
        return Err(Error::shape(left.len(), right.len()));
    }
    if left.is_empty() {
        return Err(Error::InvalidArgument("variance_matrix needs at least one sample".into()));
    }
    let shape = left[0].shape().to_vec();
    let mut v = Tensor::zeros(&shape);
    for (l, r) in left.iter().zip(right) {
        if l.shape() != shape.as_slice() || r.shape() != shape.as_slice() {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?} / {:?}", l.shape(), r.shape())));
        }
        for ((acc, &a), &b) in v.data_mut().iter_mut().zip(l.data()).zip(r.data()) {
            let mu = 0.5 * (a + b);
            *acc += (a - mu) * (a - mu) + (b - mu) * (b - mu);
        }
    }
    v.scale(1.0 / (2.0 * left.len() as f64));
    Ok(v)
}

/// Symmetric boolean `C × C` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub channels: usize,
    pub bits: Vec<bool>,
}

impl ChannelMask {
    pub fn empty(channels: usize) -> Self {
        Self {
            channels,
            bits: vec![false; channels * channels],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.channels + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Optimal 1-D k-means partition of weighted sorted points into `k`
/// contiguous groups; returns the start index of each group.
fn kmeans_1d(points: &[(f64, f64)], k: usize) -> Vec<usize> {
    let m = points.len();
    let mut pw = vec![0.0; m + 1];
    let mut pwx = vec![0.0; m + 1];
    let mut pwxx = vec![0.0; m + 1];
    for (i, &(x, w)) in points.iter().enumerate() {
        pw[i + 1] = pw[i] + w;
        pwx[i + 1] = pwx[i] + w * x;
        pwxx[i + 1] = pwxx[i] + w * x * x;
    }
    // Weighted SSE of points[i..j].
    let sse = |i: usize, j: usize| -> f64 {
        let w = pw[j] - pw[i];
        let s = pwx[j] - pwx[i];
        (pwxx[j] - pwxx[i] - s * s / w).max(0.0)
    };
    let inf = f64::INFINITY;
    // cost[c][j]: best cost of the first j points in c + 1 groups.
    let mut cost = vec![vec![inf; m + 1]; k];
    let mut split = vec![vec![0usize; m + 1]; k];
    for j in 1..=m {
        cost[0][j] = sse(0, j);
    }
    for c in 1..k {
        for j in (c + 1)..=m {
            for i in c..j {
                let candidate = cost[c - 1][i] + sse(i, j);
                if candidate < cost[c][j] {
                    cost[c][j] = candidate;
                    split[c][j] = i;
                }
            }
        }
    }
    let mut starts = vec![0usize; k];
    let mut j = m;
    for c in (1..k).rev() {
        let i = split[c][j];
        starts[c] = i;
        j = i;
    }
    starts
}

/// Clusters the strict-upper entries of `v` by magnitude and selects the
/// highest-centroid cluster, mirrored to the lower triangle.
///
/// Clustering is exact 1-D k-means over the distinct values (weighted by
/// multiplicity) with `k = min(clusters, distinct)`. With a single distinct
/// value the fallback rule keeps entries above `mean + 2·std`, which is
/// empty.
pub fn select_mask(v: &Tensor, clusters: usize) -> Result<ChannelMask> {
    let c = match *v.shape() {
        [a, b] if a == b => a,
        _ => return Err(Error::shape("[C, C]", format!("{:?}", v.shape()))),
    };
    if clusters < 2 {
        return Err(Error::InvalidArgument(format!("clusters must be at least 2, got {clusters}")));
    }
    let data = v.data();
    let mut upper: Vec<f64> = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in (i + 1)..c {
            upper.push(data[i * c + j]);
        }
    }
    let mut mask = ChannelMask::empty(c);
    if upper.is_empty() {
        return Ok(mask);
    }
    if upper.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("variance matrix has non-finite entries".into()));
    }
    let mut sorted = upper.clone();
    sorted.sort_by(f64::total_cmp);
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &x in &sorted {
        match points.last_mut() {
            Some((last, w)) if *last == x => *w += 1.0,
            _ => points.push((x, 1.0)),
        }
    }
    let threshold_inclusive = if points.len() < 2 {
        let n = upper.len() as f64;
        let mean = upper.iter().sum::<f64>() / n;
        let std = (upper.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let t = mean + 2.0 * std;
        // Strictly greater than t.
        match sorted.iter().find(|&&x| x > t) {
            Some(&x) => x,
            None => return Ok(mask),
        }
    } else {
        let k = clusters.min(points.len());
        let starts = kmeans_1d(&points, k);
        points[starts[k - 1]].0
    };
    for i in 0..c {
        for j in (i + 1)..c {
            if data[i * c + j] >= threshold_inclusive {
                mask.bits[i * c + j] = true;
                mask.bits[j * c + i] = true;
            }
        }
    }
    Ok(mask)
}

/// Loss value and gradients with respect to each layer's `X̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct SswOutput {
    pub loss: f64,
    /// False until every layer has a mask; the loss is then zero.
    pub ready: bool,
    pub grads: Vec<Tensor>,
}

/// `(1/Γ) Σ_γ ‖Σ_γ(X̂) ⊙ M̃_γ ⊙ M̂‖₁` over strict-upper entries.
pub fn ssw_loss(x_hats: &[&Tensor], masks: &[Option<&ChannelMask>], want_grad: bool) -> Result<SswOutput> {
    if x_hats.len() != masks.len() {
        return Err(Error::shape(x_hats.len(), masks.len()));
    }
    let zero_grads = || x_hats.iter().map(|x| Tensor::zeros(x.shape())).collect::<Vec<_>>();
    if x_hats.is_empty() || masks.iter().any(Option::is_none) {
        return Ok(SswOutput {
            loss: 0.0,
            ready: false,
            grads: if want_grad { zero_grads() } else { Vec::new() },
        });
    }
    let gamma = x_hats.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (x, mask) in x_hats.iter().zip(masks) {
        let mask = mask.expect("checked above");
        let (c, n) = rows(x)?;
        if mask.channels != c {
            return Err(Error::shape(c, mask.channels));
        }
        let data = x.data();
        let mut g = want_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..c {
            for j in (i + 1)..c {
                if !mask.get(i, j) {
                    continue;
                }
                let ri = &data[i * n..(i + 1) * n];
                let rj = &data[j * n..(j + 1) * n];
                let s = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                loss += s.abs() / gamma;
                if let Some(g) = g.as_mut() {
                    let coef = if s > 0.0 {
                        1.0
                    } else if s < 0.0 {
                        -1.0
                    } else {
                        0.0
                    } / (gamma * n as f64);
                    if coef != 0.0 {
                        let gd = g.data_mut();
                        for t in 0..n {
                            gd[i * n + t] += coef * rj[t];
                            gd[j * n + t] += coef * ri[t];
                        }
                    }
                }
            }
        }
        if let Some(g) = g {
            grads.push(g);
        }
    }
    Ok(SswOutput {
        loss,
        ready: true,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SswConfig {
    pub epsilon: f64,
    /// Encoder stages that use instance normalization and receive the loss.
    pub layers: Vec<usize>,
    pub clusters: usize,
    /// Steps of variance accumulation before the first mask; `None` = one epoch.
    pub warmup_steps: Option<usize>,
    /// Steps between mask recomputations; `None` = once per epoch.
    pub mask_refresh: Option<usize>,
}

impl Default for SswConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            layers: vec![0, 1],
            clusters: 3,
            warmup_steps: None,
            mask_refresh: None,
        }
    }
}

impl SswConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("ssw.epsilon must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("ssw.layers must not be empty".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config("ssw.clusters must be at least 2".into()));
        }
        Ok(())
    }
}

/// Running left-right variance per layer and the derived selective masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStats {
    pub layers: Vec<usize>,
    pub clusters: usize,
    pub v_sum: Vec<Tensor>,
    pub sample_count: usize,
    pub masks: Vec<Option<ChannelMask>>,
    pub steps: usize,
    pub warmup_steps: usize,
    pub mask_refresh: usize,
}

impl CovarianceStats {
    pub fn new(layers: Vec<usize>, channels: &[usize], clusters: usize, warmup_steps: usize, mask_refresh: usize) -> Self {
        Self {
            v_sum: channels.iter().map(|&c| Tensor::zeros(&[c, c])).collect(),
            masks: vec![None; layers.len()],
            layers,
            clusters,
            sample_count: 0,
            steps: 0,
            warmup_steps,
            mask_refresh: mask_refresh.max(1),
        }
    }

    /// Adds one sample's left/right covariances for every layer
    /// (`sample_count` advances once per call).
    pub fn accumulate(&mut self, left: &[Tensor], right: &[Tensor]) -> Result<()> {
        if left.len() != self.v_sum.len() || right.len() != self.v_sum.len() {
            return Err(Error::shape(self.v_sum.len(), left.len()));
        }
        for ((acc, l), r) in self.v_sum.iter_mut().zip(left).zip(right) {
            let v = variance_matrix(std::slice::from_ref(l), std::slice::from_ref(r))?;
            acc.add_assign(&v);
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Running mean `V` for layer slot `k`.
    pub fn variance(&self, k: usize) -> Tensor {
        let mut v = self.v_sum[k].clone();
        if self.sample_count > 0 {
            v.scale(1.0 / self.sample_count as f64);
        }
        v
    }

    /// Advances the step counter; recomputes masks at the end of warmup and
    /// every `mask_refresh` steps after it.
    pub fn end_step(&mut self) -> Result<bool> {
        self.steps += 1;
        let due = self.steps >= self.warmup_steps
            && (self.steps - self.warmup_steps) % self.mask_refresh == 0;
        if due && self.sample_count > 0 {
            self.refresh_masks()?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn refresh_masks(&mut self) -> Result<()> {
        for k in 0..self.v_sum.len() {
            self.masks[k] = Some(select_mask(&self.variance(k), self.clusters)?);
        }
        Ok(())
    }

    pub fn ready(&self) -> bool {
        self.masks.iter().all(Option::is_some)
    }

    pub fn mask_refs(&self) -> Vec<Option<&ChannelMask>> {
        self.masks.iter().map(Option::as_ref).collect()
    }
}
