//! Sequential training loop: forward → losses → Adam step on the query
//! parameters → momentum update of the key encoder → queue push.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::geometry::{self, PositivePairSet};
use crate::grid::Grid;
use crate::metrics;
use crate::net::{self, Checkpoint, ParamVars};
use crate::params::ParamSet;
use crate::scf::{self, NegativeQueue, ScfBatch};
use crate::ssw::{self, ChannelMask, CovarianceStats};
use crate::tensor::Tensor;

/// A training sample with everything that does not depend on parameters
/// precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub left: Tensor,
    pub right: Tensor,
    pub gt: Rc<Grid<f64>>,
    pub supervision: Rc<Grid<bool>>,
    pub pairs: PositivePairSet,
}

impl PreparedSample {
    pub fn new(sample: &StereoSample, max_disp: usize, stride: usize, delta: f64) -> Result<Self> {
        let (mask, _) = geometry::mask_for(&sample.disparity_left, sample.disparity_right.as_ref(), delta)?;
        let pairs = geometry::collect_positive_pairs(&sample.disparity_left, &mask, stride)?;
        Ok(Self {
            sample_id: sample.sample_id.clone(),
            left: net::normalize_image(&sample.left),
            right: net::normalize_image(&sample.right),
            supervision: Rc::new(net::supervision_mask(&sample.disparity_left, None, max_disp)),
            gt: Rc::new(sample.disparity_left.clone()),
            pairs,
        })
    }

    fn feature_dims(&self, stride: usize) -> (usize, usize) {
        (self.left.dim(2) / stride, self.left.dim(1) / stride)
    }
}

/// Everything a single-sample loss evaluation needs besides parameters.
pub struct LossInputs<'a> {
    /// Detached key features of the right view (`None` → use the query
    /// encoder's own right features, detached).
    pub key_right: Option<&'a Tensor>,
    pub scf_batch: Option<&'a ScfBatch>,
    pub queue: Option<&'a NegativeQueue>,
    /// Selective masks for the whitening loss, one per configured layer.
    pub ssw_masks: Option<Vec<Option<&'a ChannelMask>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub disp: f64,
    pub scf: Option<f64>,
    pub ssw: Option<f64>,
    pub total: f64,
}

pub struct SampleEval {
    pub parts: LossParts,
    /// Gradient in the parameter layout.
    pub grad: Option<Vec<f64>>,
    /// Gradients with respect to the standardized input images.
    pub input_grads: Option<(Tensor, Tensor)>,
    /// `X̂` of the whitening layers, left and right.
    pub left_xhat: Vec<Tensor>,
    pub right_xhat: Vec<Tensor>,
    /// Query-encoder features of the right view.
    pub right_features: Option<Tensor>,
}

/// Forward pass and total objective for one sample.
pub fn sample_loss(
    cfg: &ExperimentConfig,
    params: &ParamSet,
    sample: &PreparedSample,
    inputs: &LossInputs<'_>,
    want_grad: bool,
    want_input_grad: bool,
) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, want_grad)?;
    let l = tape.leaf(sample.left.clone(), want_input_grad);
    let r = tape.leaf(sample.right.clone(), want_input_grad);
    let fwd = net::forward(&mut tape, &pv, l, r, &cfg.net)?;
    let (disp, _) = tape.smooth_l1(
        fwd.disparity,
        sample.gt.clone(),
        sample.supervision.clone(),
        cfg.loss.smooth_l1_beta,
    )?;
    let mut terms: Vec<Var> = vec![disp];
    let mut weights = vec![1.0];
    let mut parts = LossParts {
        disp: tape.value(disp).item(),
        ..LossParts::default()
    };

    if let (true, Some(batch), Some(left), Some(right)) =
        (cfg.scf.enabled, inputs.scf_batch, fwd.left.as_ref(), fwd.right.as_ref())
    {
        let keys = inputs.key_right.unwrap_or_else(|| tape.value(right.features));
        let empty;
        let queue = match inputs.queue {
            Some(q) => q,
            None => {
                empty = NegativeQueue::new(1, 0)?;
                &empty
            }
        };
        let out = scf::scf_evaluate(tape.value(left.features), keys, batch, queue, &cfg.scf.params, want_grad || want_input_grad)?;
        let grads = out.grad_left.map(|g| vec![g]).unwrap_or_else(|| vec![Tensor::zeros(tape.value(left.features).shape())]);
        let node = tape.fused_scalar(out.loss, vec![left.features], grads)?;
        parts.scf = Some(out.loss);
        terms.push(node);
        weights.push(cfg.loss.lambda_scf);
    }

    let mut left_xhat = Vec::new();
    let mut right_xhat = Vec::new();
    if cfg.ssw.enabled {
        if let (Some(left), Some(right)) = (fwd.left.as_ref(), fwd.right.as_ref()) {
            let pick = |out: &net::EncoderOutput| -> Result<Vec<Var>> {
                cfg.ssw
                    .params
                    .layers
                    .iter()
                    .map(|layer| {
                        out.normalized
                            .iter()
                            .find(|(stage, _)| stage == layer)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| Error::Config(format!("whitening layer {layer} is not instance-normalized")))
                    })
                    .collect()
            };
            let lvars = pick(left)?;
            let rvars = pick(right)?;
            left_xhat = lvars.iter().map(|v| tape.value(*v).clone()).collect();
            right_xhat = rvars.iter().map(|v| tape.value(*v).clone()).collect();
            if let Some(masks) = &inputs.ssw_masks {
                let refs: Vec<&Tensor> = lvars.iter().map(|v| tape.value(*v)).collect();
                let out = ssw::ssw_loss(&refs, masks, true)?;
                let node = tape.fused_scalar(out.loss, lvars.clone(), out.grads)?;
                parts.ssw = Some(out.loss);
                terms.push(node);
                weights.push(cfg.loss.lambda_ssw);
            } else {
                parts.ssw = Some(0.0);
            }
        }
    }

    let total = tape.weighted_sum(terms, weights)?;
    parts.total = tape.value(total).item();
    let right_features = fwd.right.as_ref().map(|r| tape.value(r.features).clone());
    let (grad, input_grads) = if want_grad || want_input_grad {
        let grads = tape.backward(total);
        let g = want_grad.then(|| pv.flat_grad(&tape, &grads));
        let ig = want_input_grad.then(|| {
            let get = |v: Var| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (get(l), get(r))
        });
        (g, ig)
    } else {
        (None, None)
    };
    Ok(SampleEval {
        parts,
        grad,
        input_grads,
        left_xhat,
        right_xhat,
        right_features,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Two-phase schedule: `lr` until the last `late_fraction` of the steps.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let switch = ((1.0 - cfg.late_fraction) * total_steps as f64).round() as usize;
    if step < switch {
        cfg.lr
    } else {
        cfg.lr_late
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_disp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_scf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ssw: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_cosine: Option<f64>,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub params: ParamSet,
    /// Momentum key encoder (encoder parameters only).
    pub key: Option<ParamSet>,
    pub queue: Option<NegativeQueue>,
    pub stats: Option<CovarianceStats>,
    adam: Adam,
    pub step: usize,
    /// Contrastive sampling and queue pushes.
    rng: ChaCha8Rng,
    /// Epoch shuffling; kept separate so that disabled or zero-weighted
    /// losses cannot change the visiting order.
    shuffle_rng: ChaCha8Rng,
    total_steps: usize,
    steps_per_epoch: usize,
}

fn encoder_only(params: &ParamSet) -> ParamSet {
    params.subset("enc.")
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, corpus_len: usize) -> Result<Self> {
        cfg.validate()?;
        if corpus_len == 0 {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let params = net::init_params(&cfg.net, cfg.seed)?;
        let steps_per_epoch = corpus_len.div_ceil(cfg.train.batch_size);
        let use_momentum = cfg.scf.enabled && cfg.scf.momentum_encoder;
        let key = use_momentum.then(|| encoder_only(&params));
        let queue = if use_momentum {
            Some(NegativeQueue::new(cfg.scf.params.queue_capacity, cfg.net.channels)?)
        } else {
            None
        };
        let stats = cfg.ssw.enabled.then(|| {
            let p = &cfg.ssw.params;
            CovarianceStats::new(
                p.layers.clone(),
                &vec![cfg.net.channels; p.layers.len()],
                p.clusters,
                p.warmup_steps.unwrap_or(steps_per_epoch),
                p.mask_refresh.unwrap_or(steps_per_epoch),
            )
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x747261696e);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(0x73687566);
        Ok(Self {
            adam: Adam::new(params.len(), &cfg.train),
            cfg: cfg.clone(),
            params,
            key,
            queue,
            stats,
            step: 0,
            rng,
            shuffle_rng,
            total_steps: steps_per_epoch * cfg.train.epochs,
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn key_features(&self, sample: &PreparedSample) -> Result<Option<Tensor>> {
        let Some(key) = &self.key else { return Ok(None) };
        let mut tape = Tape::new();
        let pv = ParamVars::new(&mut tape, key, false)?;
        let x = tape.constant(sample.right.clone());
        let out = net::encode(&mut tape, &pv, x, &self.cfg.net)?;
        Ok(Some(tape.value(out.features).clone()))
    }

    /// One optimization step over `batch` (gradients averaged).
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<StepRecord> {
        let lr = learning_rate(&self.cfg.train, self.step, self.total_steps);
        let mut grad = vec![0.0; self.params.len()];
        let mut parts_sum = LossParts::default();
        let mut pending_keys: Vec<Tensor> = Vec::new();
        let mut cov_updates: Vec<(Vec<Tensor>, Vec<Tensor>)> = Vec::new();
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let key_right = if self.cfg.scf.enabled { self.key_features(sample)? } else { None };
            let scf_batch = if self.cfg.scf.enabled {
                let (fw, fh) = sample.feature_dims(self.cfg.net.stride);
                Some(ScfBatch::sample(&sample.pairs, fw, fh, &self.cfg.scf.params, &mut self.rng))
            } else {
                None
            };
            let masks = self.stats.as_ref().filter(|s| s.ready()).map(|s| s.mask_refs());
            let inputs = LossInputs {
                key_right: key_right.as_ref(),
                scf_batch: scf_batch.as_ref(),
                queue: self.queue.as_ref(),
                ssw_masks: masks,
            };
            let eval = sample_loss(&self.cfg, &self.params, sample, &inputs, true, false)?;
            if !eval.parts.total.is_finite() {
                return Err(Error::Data(format!("non-finite loss on sample {}", sample.sample_id)));
            }
            for (g, d) in grad.iter_mut().zip(eval.grad.as_deref().unwrap_or_default()) {
                *g += scale * d;
            }
            parts_sum.disp += scale * eval.parts.disp;
            parts_sum.total += scale * eval.parts.total;
            if let Some(v) = eval.parts.scf {
                *parts_sum.scf.get_or_insert(0.0) += scale * v;
            }
            if let Some(v) = eval.parts.ssw {
                *parts_sum.ssw.get_or_insert(0.0) += scale * v;
            }
            if let Some(k) = key_right {
                pending_keys.push(k);
            }
            if self.stats.is_some() {
                let cov = |xs: &[Tensor]| xs.iter().map(ssw::covariance).collect::<Result<Vec<_>>>();
                cov_updates.push((cov(&eval.left_xhat)?, cov(&eval.right_xhat)?));
            }
        }

        self.adam.step(self.params.data_mut(), &grad, lr);
        crate::net::project_params(&mut self.params, &self.cfg.net);
        if let Some(key) = self.key.as_mut() {
            let fresh = encoder_only(&self.params);
            scf::momentum_update(key.data_mut(), fresh.data(), self.cfg.scf.momentum)?;
        }
        if let Some(queue) = self.queue.as_mut() {
            for k in &pending_keys {
                let picked = scf::select_queue_keys(
                    k,
                    self.cfg.scf.params.queue_push_per_step,
                    self.cfg.scf.params.normalize,
                    &mut self.rng,
                )?;
                queue.push(&picked)?;
            }
        }
        if let Some(stats) = self.stats.as_mut() {
            for (l, r) in &cov_updates {
                stats.accumulate(l, r)?;
            }
            stats.end_step()?;
        }

        let record = StepRecord {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            lr,
            l_disp: parts_sum.disp,
            l_scf: parts_sum.scf,
            l_ssw: parts_sum.ssw,
            total: parts_sum.total,
            probe_cosine: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// Full schedule over `corpus`; `log` sees every step record.
    pub fn run(
        &mut self,
        corpus: &[PreparedSample],
        probe: Option<&StereoSample>,
        mut log: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for _ in 0..self.cfg.train.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(self.cfg.train.batch_size) {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &corpus[i]).collect();
                let mut record = self.train_step(&batch)?;
                let every = self.cfg.train.probe_every;
                if let (Some(p), true) = (probe, every > 0 && self.cfg.net.uses_encoder()) {
                    if record.step % every == 0 || self.step == self.total_steps {
                        let c = metrics::feature_consistency(p, &self.params, &self.cfg.net, self.cfg.eval.delta)?;
                        record.probe_cosine = c.masked;
                    }
                }
                log(&record)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            network: self.cfg.net.clone(),
            query: self.params.clone(),
            key: self.key.clone(),
        }
    }
}

/// Scalar ops on prepared configs used by the gradient checks: the loss of
/// a sample as a function of the flat parameter vector.
pub fn loss_at(
    cfg: &ExperimentConfig,
    layout: &ParamSet,
    flat: &[f64],
    sample: &PreparedSample,
    inputs: &LossInputs<'_>,
) -> Result<f64> {
    let params = ParamSet::from_parts(layout.specs().to_vec(), flat.to_vec())?;
    Ok(sample_loss(cfg, &params, sample, inputs, false, false)?.parts.total)
}
