//! Toy end-to-end stereo network: a three-stage convolutional encoder, a
//! cost volume, a small 3-D aggregation stack and soft-argmin regression.
//!
//! Every forward pass is recorded on an [`autodiff::Tape`] so the same code
//! serves inference, training and gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::params::{ParamSet, ParamSpec};
use crate::scf::{FeatureMap, View};
use crate::tensor::Tensor;

/// Per-channel input standardization (ImageNet statistics).
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Concat,
    Correlation,
    Rgb,
}

impl FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "correlation" | "corr" => Ok(Self::Correlation),
            "rgb" => Ok(Self::Rgb),
            other => Err(Error::Config(format!("unknown volume kind `{other}`"))),
        }
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Correlation => "correlation",
            Self::Rgb => "rgb",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub channels: usize,
    /// Power of two in {1, 2, 4, 8}.
    pub stride: usize,
    pub max_disp: usize,
    pub volume_kind: VolumeKind,
    /// Hidden 3×3×3 layers between the input projection and the output.
    pub aggregation_depth: usize,
    pub aggregation_channels: usize,
    /// Encoder stages (0..3) followed by instance normalization.
    pub in_layers: Vec<usize>,
    pub leaky_slope: f64,
    pub norm_epsilon: f64,
    /// Start the first layer after a stacked volume with right-view weights
    /// equal to the negated left-view weights (a left−right contrast).
    pub difference_init: bool,
    /// Keep the RGB mixing weights antisymmetric during training, so the
    /// RGB volume only sees left−right photometric differences.
    pub tied_rgb_mixing: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            stride: 4,
            max_disp: 48,
            volume_kind: VolumeKind::Correlation,
            aggregation_depth: 1,
            aggregation_channels: 8,
            in_layers: vec![0, 1],
            leaky_slope: 0.2,
            norm_epsilon: 1e-5,
            difference_init: true,
            tied_rgb_mixing: true,
        }
    }
}

pub const ENCODER_STAGES: usize = 3;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!("net.stride must be 1, 2, 4 or 8 (got {})", self.stride)));
        }
        if self.channels < 4 {
            return Err(Error::Config("net.channels must be at least 4".into()));
        }
        if self.max_disp == 0 || self.max_disp % self.stride != 0 {
            return Err(Error::Config(format!(
                "net.max_disp ({}) must be a positive multiple of the stride ({})",
                self.max_disp, self.stride
            )));
        }
        if self.aggregation_channels == 0 {
            return Err(Error::Config("net.aggregation_channels must be positive".into()));
        }
        if let Some(l) = self.in_layers.iter().find(|&&l| l >= ENCODER_STAGES) {
            return Err(Error::Config(format!("net.in_layers entry {l} is not an encoder stage")));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("net.norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.max_disp / self.stride
    }

    fn stage_stride(&self, stage: usize) -> usize {
        if stage < self.stride.trailing_zeros() as usize {
            2
        } else {
            1
        }
    }

    /// Channels entering the aggregation stack.
    pub fn volume_channels(&self) -> usize {
        match self.volume_kind {
            VolumeKind::Concat | VolumeKind::Rgb => 2 * self.channels,
            VolumeKind::Correlation => 1,
        }
    }

    pub fn uses_encoder(&self) -> bool {
        self.volume_kind != VolumeKind::Rgb
    }
}

// ---------------------------------------------------------------------------
// Parameters

pub fn encoder_param_name(stage: usize, part: &str) -> String {
    format!("enc.{stage}.{part}")
}

/// Randomly initialized parameters (He-normal weights, zero biases).
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6e6574);
    let mut params = ParamSet::new();
    let mut conv = |params: &mut ParamSet, name: &str, shape: &[usize], gain: f64| {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
        params.push(format!("{name}.w"), Tensor::from_vec(shape, w).expect("shape"));
        params.push(format!("{name}.b"), Tensor::zeros(&shape[..1]));
    };
    let c = cfg.channels;
    if cfg.uses_encoder() {
        for stage in 0..ENCODER_STAGES {
            let cin = if stage == 0 { 3 } else { c };
            conv(&mut params, &format!("enc.{stage}"), &[c, cin, 3, 3], 1.0);
        }
    } else {
        let s = cfg.stride;
        conv(&mut params, "mix", &[2 * c, 6, s, s, s], 1.0);
    }
    let a = cfg.aggregation_channels;
    conv(&mut params, "agg.in", &[a, cfg.volume_channels(), 1, 1, 1], 1.0);
    for i in 0..cfg.aggregation_depth {
        conv(&mut params, &format!("agg.{i}"), &[a, a, 3, 3, 3], 1.0);
    }
    conv(&mut params, "agg.out", &[1, a, 3, 3, 3], 0.5);
    if cfg.difference_init || (cfg.tied_rgb_mixing && cfg.volume_kind == VolumeKind::Rgb) {
        match cfg.volume_kind {
            VolumeKind::Concat => mirror_halves(&mut params, "agg.in.w", c),
            VolumeKind::Rgb => mirror_halves(&mut params, "mix.w", 3),
            VolumeKind::Correlation => {}
        }
    }
    Ok(params)
}

/// For weights `[O, 2·half, ...]`, sets the second input half to the
/// negated first half.
fn mirror_halves(params: &mut ParamSet, name: &str, half: usize) {
    let mut w = params.tensor(name).expect("parameter exists");
    let out = w.dim(0);
    let block: usize = w.shape()[2..].iter().product();
    let data = w.data_mut();
    for o in 0..out {
        let base = o * 2 * half * block;
        for i in 0..half * block {
            data[base + half * block + i] = -data[base + i];
        }
    }
    params.set(name, &w).expect("same shape");
}

/// Projects `[O, 2·half, ...]` weights onto the antisymmetric subspace
/// (second half = −first half), i.e. a filter on the difference of halves.
fn tie_halves(params: &mut ParamSet, name: &str, half: usize) {
    let mut w = params.tensor(name).expect("parameter exists");
    let out = w.dim(0);
    let block: usize = w.shape()[2..].iter().product();
    let data = w.data_mut();
    for o in 0..out {
        let base = o * 2 * half * block;
        for i in 0..half * block {
            let a = 0.5 * (data[base + i] - data[base + half * block + i]);
            data[base + i] = a;
            data[base + half * block + i] = -a;
        }
    }
    params.set(name, &w).expect("same shape");
}

/// Re-imposes structural weight constraints after an optimizer step.
pub fn project_params(params: &mut ParamSet, cfg: &NetworkConfig) {
    if cfg.volume_kind == VolumeKind::Rgb && cfg.tied_rgb_mixing {
        tie_halves(params, "mix.w", 3);
    }
}

/// Parameters as tape leaves, looked up by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
    order: Vec<String>,
}

impl ParamVars {
    pub fn new(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Result<Self> {
        let list = tape.params(params, requires_grad)?;
        Ok(Self {
            order: list.iter().map(|(n, _)| n.clone()).collect(),
            vars: list.into_iter().collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    /// Flat gradient in the layout of the originating parameter set.
    pub fn flat_grad(&self, tape: &Tape, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for name in &self.order {
            let v = self.vars[name];
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward pieces

/// Standardized `[3, H, W]` tensor.
pub fn normalize_image(image: &Image) -> Tensor {
    let (w, h) = image.dims();
    let mut data = image.as_slice().to_vec();
    for (c, plane) in data.chunks_mut(w * h).enumerate() {
        for v in plane {
            *v = (*v - INPUT_MEAN[c]) / INPUT_STD[c];
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image layout")
}

pub struct EncoderOutput {
    pub features: Var,
    /// `(stage, X̂)` for every instance-normalized stage.
    pub normalized: Vec<(usize, Var)>,
}

/// Three conv stages; the first `log2(stride)` downsample by two. Stages
/// listed in `in_layers` are instance-normalized; all but the last apply a
/// leaky ReLU.
pub fn encode(tape: &mut Tape, params: &ParamVars, image: Var, cfg: &NetworkConfig) -> Result<EncoderOutput> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] % cfg.stride != 0 || shape[2] % cfg.stride != 0 {
        return Err(Error::shape(format!("[3, H, W] with H, W divisible by {}", cfg.stride), format!("{shape:?}")));
    }
    let mut x = image;
    let mut normalized = Vec::new();
    for stage in 0..ENCODER_STAGES {
        let w = params.get(&encoder_param_name(stage, "w"))?;
        let b = params.get(&encoder_param_name(stage, "b"))?;
        x = tape.conv2d(x, w, b, cfg.stage_stride(stage), 1)?;
        if cfg.in_layers.contains(&stage) {
            x = tape.instance_norm(x, cfg.norm_epsilon)?;
            normalized.push((stage, x));
        }
        if stage + 1 < ENCODER_STAGES {
            x = tape.leaky_relu(x, cfg.leaky_slope);
        }
    }
    Ok(EncoderOutput { features: x, normalized })
}

/// `[F, D/stride, H/stride, W/stride]` volume node.
pub fn volume(tape: &mut Tape, params: &ParamVars, left: Var, right: Var, cfg: &NetworkConfig) -> Result<Var> {
    let levels = cfg.levels();
    match cfg.volume_kind {
        VolumeKind::Concat => tape.concat_volume(left, right, levels),
        VolumeKind::Correlation => tape.corr_volume(left, right, levels),
        VolumeKind::Rgb => {
            let (w, b) = (params.get("mix.w")?, params.get("mix.b")?);
            tape.rgb_volume(left, right, w, b, cfg.stride, levels)
        }
    }
}

/// Aggregated scores, `[1, D/stride, H/stride, W/stride]`.
pub fn aggregate_on(tape: &mut Tape, params: &ParamVars, vol: Var, cfg: &NetworkConfig) -> Result<Var> {
    let mut x = tape.conv3d(vol, params.get("agg.in.w")?, params.get("agg.in.b")?)?;
    x = tape.leaky_relu(x, cfg.leaky_slope);
    for i in 0..cfg.aggregation_depth {
        x = tape.conv3d(x, params.get(&format!("agg.{i}.w"))?, params.get(&format!("agg.{i}.b"))?)?;
        x = tape.leaky_relu(x, cfg.leaky_slope);
    }
    tape.conv3d(x, params.get("agg.out.w")?, params.get("agg.out.b")?)
}

/// Result of the disparity branch for one stereo pair.
pub struct Forward {
    pub left: Option<EncoderOutput>,
    pub right: Option<EncoderOutput>,
    pub scores: Var,
    pub disparity: Var,
}

/// Images → disparity with the same parameters for both views.
pub fn forward(tape: &mut Tape, params: &ParamVars, left: Var, right: Var, cfg: &NetworkConfig) -> Result<Forward> {
    let (h, w) = (tape.value(left).dim(1), tape.value(left).dim(2));
    let (l_out, r_out, vol) = if cfg.uses_encoder() {
        let l = encode(tape, params, left, cfg)?;
        let r = encode(tape, params, right, cfg)?;
        let vol = volume(tape, params, l.features, r.features, cfg)?;
        (Some(l), Some(r), vol)
    } else {
        (None, None, volume(tape, params, left, right, cfg)?)
    };
    let agg = aggregate_on(tape, params, vol, cfg)?;
    let scores = tape.upsample(agg, [cfg.max_disp, h, w])?;
    let disparity = tape.soft_argmin(scores)?;
    Ok(Forward {
        left: l_out,
        right: r_out,
        scores,
        disparity,
    })
}

// ---------------------------------------------------------------------------
// Tape-free convenience API

/// Encoder features of one image (no gradient tracking).
pub fn extract_features(image: &Image, params: &ParamSet, cfg: &NetworkConfig, view: View) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false)?;
    let x = tape.constant(normalize_image(image));
    let out = encode(&mut tape, &pv, x, cfg)?;
    FeatureMap::new(tape.value(out.features).clone(), cfg.stride, view)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    /// `[F, D/stride, H/stride, W/stride]`.
    pub values: Tensor,
    pub kind: VolumeKind,
}

/// Feature-based volume; the RGB variant needs images, see [`build_rgb_volume`].
pub fn build_cost_volume(left: &FeatureMap, right: &FeatureMap, kind: VolumeKind, max_disp: usize) -> Result<CostVolume> {
    if left.stride != right.stride {
        return Err(Error::InvalidArgument("feature maps have different strides".into()));
    }
    if max_disp < left.stride {
        return Err(Error::InvalidArgument(format!("max_disp {max_disp} below stride {}", left.stride)));
    }
    let levels = max_disp / left.stride;
    let mut tape = Tape::new();
    let l = tape.constant(left.values.clone());
    let r = tape.constant(right.values.clone());
    let v = match kind {
        VolumeKind::Concat => tape.concat_volume(l, r, levels)?,
        VolumeKind::Correlation => tape.corr_volume(l, r, levels)?,
        VolumeKind::Rgb => {
            return Err(Error::InvalidArgument(
                "the rgb volume is built from images, not feature maps".into(),
            ))
        }
    };
    Ok(CostVolume {
        values: tape.value(v).clone(),
        kind,
    })
}

/// RGB volume reduced by the learned mixing stage (`mix.*` parameters).
pub fn build_rgb_volume(left: &Image, right: &Image, params: &ParamSet, cfg: &NetworkConfig) -> Result<CostVolume> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false)?;
    let l = tape.constant(normalize_image(left));
    let r = tape.constant(normalize_image(right));
    let cfg = NetworkConfig {
        volume_kind: VolumeKind::Rgb,
        ..cfg.clone()
    };
    let v = volume(&mut tape, &pv, l, r, &cfg)?;
    Ok(CostVolume {
        values: tape.value(v).clone(),
        kind: VolumeKind::Rgb,
    })
}

/// Aggregated and upsampled scores, `[D, H, W]`.
pub fn aggregate(volume: &CostVolume, params: &ParamSet, cfg: &NetworkConfig, out_dims: (usize, usize)) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false)?;
    let v = tape.constant(volume.values.clone());
    let agg = aggregate_on(&mut tape, &pv, v, cfg)?;
    let up = tape.upsample(agg, [cfg.max_disp, out_dims.0, out_dims.1])?;
    Ok(tape.value(up).clone())
}

/// Expected disparity under softmax(−scores) along the first axis.
pub fn soft_argmin(scores: &Tensor) -> Result<Grid<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let d = tape.soft_argmin(s)?;
    let (h, w) = (scores.dim(1), scores.dim(2));
    Ok(Grid::from_vec(w, h, tape.value(d).data().to_vec()).expect("disparity layout"))
}

/// Pixels usable as disparity supervision: valid and below `max_disp`.
pub fn supervision_mask(gt: &Grid<f64>, valid: Option<&Grid<bool>>, max_disp: usize) -> Grid<bool> {
    let (w, h) = gt.dims();
    Grid::from_fn(w, h, |u, v| {
        let d = *gt.get(u, v);
        valid.is_none_or(|m| *m.get(u, v)) && d.is_finite() && d >= 0.0 && d < max_disp as f64
    })
}

/// Mean smooth-L1 over valid pixels; `(0, true)` when nothing is valid.
pub fn smooth_l1_disparity_loss(pred: &Grid<f64>, gt: &Grid<f64>, valid: &Grid<bool>, beta: f64) -> Result<(f64, bool)> {
    if !pred.same_dims(gt) || !valid.same_dims(gt) {
        return Err(Error::shape(format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("smooth-L1 beta must be positive".into()));
    }
    let mut tape = Tape::new();
    let (w, h) = pred.dims();
    let p = tape.constant(Tensor::from_vec(&[h, w], pred.as_slice().to_vec())?);
    let (l, n) = tape.smooth_l1(p, Rc::new(gt.clone()), Rc::new(valid.clone()), beta)?;
    Ok((tape.value(l).item(), n == 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TotalLossConfig {
    pub lambda_scf: f64,
    pub lambda_ssw: f64,
    pub smooth_l1_beta: f64,
}

impl Default for TotalLossConfig {
    fn default() -> Self {
        Self {
            lambda_scf: 1.0,
            lambda_ssw: 0.1,
            smooth_l1_beta: 1.0,
        }
    }
}

impl TotalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_scf >= 0.0) || !(self.lambda_ssw >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("loss.smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

/// `L = L_disp + λ_scf·L_scf + λ_ssw·L_ssw`.
pub fn total_loss(disp: f64, scf: f64, ssw: f64, cfg: &TotalLossConfig) -> Result<f64> {
    if !disp.is_finite() || !scf.is_finite() || !ssw.is_finite() {
        return Err(Error::InvalidArgument("component losses must be finite".into()));
    }
    Ok(disp + cfg.lambda_scf * scf + cfg.lambda_ssw * ssw)
}

/// Disparity map predicted with the query parameters for both views.
pub fn infer(left: &Image, right: &Image, params: &ParamSet, cfg: &NetworkConfig) -> Result<Grid<f64>> {
    if left.dims() != right.dims() {
        return Err(Error::shape(format!("{:?}", left.dims()), format!("{:?}", right.dims())));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false)?;
    let l = tape.constant(normalize_image(left));
    let r = tape.constant(normalize_image(right));
    let out = forward(&mut tape, &pv, l, r, cfg)?;
    let (w, h) = left.dims();
    Ok(Grid::from_vec(w, h, tape.value(out.disparity).data().to_vec()).expect("disparity layout"))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"STCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config_hash: String,
    network: NetworkConfig,
    query: Vec<ParamSpec>,
    key: Option<Vec<ParamSpec>>,
}

/// Named-array archive: magic, manifest length, JSON manifest, then the
/// little-endian `f64` values of the query and (optional) key parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub network: NetworkConfig,
    pub query: ParamSet,
    pub key: Option<ParamSet>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = CheckpointManifest {
            config_hash: self.config_hash.clone(),
            network: self.network.clone(),
            query: self.query.specs().to_vec(),
            key: self.key.as_ref().map(|k| k.specs().to_vec()),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.query.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.query.data().iter().chain(self.key.iter().flat_map(|k| k.data())) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| fail(8, "manifest length exceeds file"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(json).map_err(|e| fail(16, &format!("bad manifest: {e}")))?;
        let mut values = bytes[16 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |specs: Vec<ParamSpec>| -> Result<ParamSet> {
            let n: usize = specs.iter().map(ParamSpec::len).sum();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(fail(bytes.len(), "truncated parameter data"));
            }
            ParamSet::from_parts(specs, data)
        };
        let query = take(manifest.query)?;
        let key = manifest.key.map(&mut take).transpose()?;
        if (bytes.len() - 16 - len) % 8 != 0 || values.next().is_some() {
            return Err(fail(bytes.len(), "trailing bytes after parameter data"));
        }
        Ok(Self {
            config_hash: manifest.config_hash,
            network: manifest.network,
            query,
            key,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
