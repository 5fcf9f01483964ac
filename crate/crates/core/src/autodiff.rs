//! Reverse-mode differentiation over a per-sample tape.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse.
//! Only the operations the stereo network needs are provided.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::ParamSet;
use crate::ssw;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    ConcatVolume {
        l: Var,
        r: Var,
        levels: usize,
    },
    CorrVolume {
        l: Var,
        r: Var,
        levels: usize,
    },
    RgbVolume {
        l: Var,
        r: Var,
        w: Var,
        b: Var,
        stride: usize,
        levels: usize,
    },
    Upsample {
        x: Var,
        plans: [Rc<Vec<Tap>>; 3],
    },
    SoftArgmin {
        x: Var,
        probs: Tensor,
    },
    SmoothL1 {
        x: Var,
        target: Rc<Grid<f64>>,
        valid: Rc<Grid<bool>>,
        beta: f64,
        count: usize,
    },
    /// Scalar with a precomputed gradient for each input.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum {
        xs: Vec<Var>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear interpolation taps for one output index.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Stride-1 3-D convolution with a cubic kernel and "same" padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv3d { x, w, b }, rg))
    }

    pub fn instance_norm(&mut self, x: Var, epsilon: f64) -> Result<Var> {
        let f = ssw::instance_normalize(self.value(x), epsilon)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            f.x_hat,
            Op::InstanceNorm {
                x,
                inv_std: f.inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// `[C,H,W] × 2 → [2C, levels, H, W]`; the right half at level `k` is
    /// the right map shifted `k` columns, zero where `x < k`.
    pub fn concat_volume(&mut self, l: Var, r: Var, levels: usize) -> Result<Var> {
        let out = concat_volume_forward(self.value(l), self.value(r), levels)?;
        let rg = self.any_grad(&[l, r]);
        Ok(self.push(out, Op::ConcatVolume { l, r, levels }, rg))
    }

    /// `[C,H,W] × 2 → [1, levels, H, W]` of per-pixel dot products.
    pub fn corr_volume(&mut self, l: Var, r: Var, levels: usize) -> Result<Var> {
        let out = corr_volume_forward(self.value(l), self.value(r), levels)?;
        let rg = self.any_grad(&[l, r]);
        Ok(self.push(out, Op::CorrVolume { l, r, levels }, rg))
    }

    /// Full-resolution RGB volume reduced by one strided patch mixing stage.
    pub fn rgb_volume(&mut self, l: Var, r: Var, w: Var, b: Var, stride: usize, levels: usize) -> Result<Var> {
        let out = rgb_volume_forward(self.value(l), self.value(r), self.value(w), self.value(b), stride, levels)?;
        let rg = self.any_grad(&[l, r, w, b]);
        Ok(self.push(
            out,
            Op::RgbVolume {
                l,
                r,
                w,
                b,
                stride,
                levels,
            },
            rg,
        ))
    }

    /// Trilinear resize of a `[1, D, H, W]` (or `[D, H, W]`) volume to `[D', H', W']`.
    pub fn upsample(&mut self, x: Var, out_dims: [usize; 3]) -> Result<Var> {
        let src = self.value(x);
        let dims = match *src.shape() {
            [1, d, h, w] | [d, h, w] => [d, h, w],
            _ => return Err(Error::shape("[1, D, H, W]", format!("{:?}", src.shape()))),
        };
        let plans = [
            Rc::new(linear_taps(dims[0], out_dims[0])),
            Rc::new(linear_taps(dims[1], out_dims[1])),
            Rc::new(linear_taps(dims[2], out_dims[2])),
        ];
        let mut cur = Tensor::from_vec(&dims, src.data().to_vec())?;
        for axis in 0..3 {
            cur = resize_axis(&cur, axis, &plans[axis], false);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(cur, Op::Upsample { x, plans }, rg))
    }

    /// `[D, H, W]` costs → `[H, W]` expected disparity under softmax(−cost).
    pub fn soft_argmin(&mut self, x: Var) -> Result<Var> {
        let (out, probs) = soft_argmin_forward(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftArgmin { x, probs }, rg))
    }

    /// Mean Huber-style penalty over valid pixels. Returns the scalar node
    /// and the number of valid pixels (zero means the loss is zero).
    pub fn smooth_l1(&mut self, x: Var, target: Rc<Grid<f64>>, valid: Rc<Grid<bool>>, beta: f64) -> Result<(Var, usize)> {
        let pred = self.value(x);
        let (w, h) = target.dims();
        if pred.shape() != [h, w] || !valid.same_dims(&target) {
            return Err(Error::shape(format!("[{h}, {w}]"), format!("{:?}", pred.shape())));
        }
        let count = valid.count_true();
        let mut total = 0.0;
        for ((p, t), &m) in pred.data().iter().zip(target.as_slice()).zip(valid.as_slice()) {
            if m {
                total += huber(p - t, beta);
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.any_grad(&[x]);
        Ok((
            self.push(
                Tensor::scalar(loss),
                Op::SmoothL1 {
                    x,
                    target,
                    valid,
                    beta,
                    count,
                },
                rg,
            ),
            count,
        ))
    }

    /// Scalar node whose gradient with respect to each input was computed
    /// alongside its value.
    pub fn fused_scalar(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape(inputs.len(), grads.len()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape(format!("{:?}", self.value(*v).shape()), format!("{:?}", g.shape())));
            }
        }
        let rg = self.any_grad(&inputs);
        Ok(self.push(Tensor::scalar(value), Op::Fused { inputs, grads }, rg))
    }

    pub fn weighted_sum(&mut self, xs: Vec<Var>, weights: Vec<f64>) -> Result<Var> {
        if xs.len() != weights.len() {
            return Err(Error::shape(xs.len(), weights.len()));
        }
        let value = xs
            .iter()
            .zip(&weights)
            .map(|(x, w)| self.value(*x).item() * w)
            .sum();
        let rg = self.any_grad(&xs);
        Ok(self.push(Tensor::scalar(value), Op::WeightedSum { xs, weights }, rg))
    }

    /// Leaves for every tensor of `params`, in layout order.
    pub fn params(&mut self, params: &ParamSet, requires_grad: bool) -> Result<Vec<(String, Var)>> {
        params
            .specs()
            .iter()
            .map(|s| Ok((s.name.clone(), self.leaf(params.tensor(&s.name)?, requires_grad))))
            .collect()
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(self.value(root).shape(), vec![1.0; self.value(root).len()]).unwrap());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w) || self.wants(*b),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some((dw, db)) = dw.zip(db) {
                    self.accumulate(grads, *w, dw);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv3d { x, w, b } => {
                let (dx, dw, db) = conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.wants(*x),
                    self.wants(*w) || self.wants(*b),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some((dw, db)) = dw.zip(db) {
                    self.accumulate(grads, *w, dw);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                // The node's own value is X̂.
                let f = ssw::NormalizedFeature {
                    x_hat: self.nodes[idx].value.clone(),
                    mean: Vec::new(),
                    inv_std: inv_std.clone(),
                    layer: 0,
                };
                self.accumulate(grads, *x, ssw::instance_normalize_backward(&f, g));
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatVolume { l, r, levels } => {
                let (dl, dr) = concat_volume_backward(self.value(*l).shape(), g, *levels);
                self.accumulate(grads, *l, dl);
                self.accumulate(grads, *r, dr);
            }
            Op::CorrVolume { l, r, levels } => {
                let (dl, dr) = corr_volume_backward(self.value(*l), self.value(*r), g, *levels);
                self.accumulate(grads, *l, dl);
                self.accumulate(grads, *r, dr);
            }
            Op::RgbVolume {
                l,
                r,
                w,
                b,
                stride,
                levels,
            } => {
                let (dl, dr, dw, db) = rgb_volume_backward(
                    self.value(*l),
                    self.value(*r),
                    self.value(*w),
                    g,
                    *stride,
                    *levels,
                    self.wants(*l) || self.wants(*r),
                );
                if let Some((dl, dr)) = dl.zip(dr) {
                    self.accumulate(grads, *l, dl);
                    self.accumulate(grads, *r, dr);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Upsample { x, plans } => {
                let mut cur = g.clone();
                for axis in (0..3).rev() {
                    let in_len = plans[axis].iter().map(|t| t.i1 + 1).max().unwrap_or(0);
                    cur = resize_axis_transpose(&cur, axis, &plans[axis], in_len);
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, cur.reshape(&shape).expect("upsample grad shape"));
            }
            Op::SoftArgmin { x, probs } => {
                let (d, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2));
                let hw = h * w;
                let mut dx = Tensor::zeros(probs.shape());
                let pd = probs.data();
                let gd = g.data();
                let mut mean = vec![0.0; hw];
                for k in 0..d {
                    for i in 0..hw {
                        mean[i] += k as f64 * pd[k * hw + i];
                    }
                }
                let out = dx.data_mut();
                for k in 0..d {
                    for i in 0..hw {
                        out[k * hw + i] = -gd[i] * pd[k * hw + i] * (k as f64 - mean[i]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SmoothL1 {
                x,
                target,
                valid,
                beta,
                count,
            } => {
                let pred = self.value(*x);
                let mut dx = Tensor::zeros(pred.shape());
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for (((d, p), t), &m) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(pred.data())
                        .zip(target.as_slice())
                        .zip(valid.as_slice())
                    {
                        if m {
                            *d = scale * huber_grad(p - t, *beta);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Fused { inputs, grads: local } => {
                let s = g.item();
                for (v, lg) in inputs.iter().zip(local) {
                    let mut d = lg.clone();
                    d.scale(s);
                    self.accumulate(grads, *v, d);
                }
            }
            Op::WeightedSum { xs, weights } => {
                for (x, w) in xs.iter().zip(weights) {
                    self.accumulate(grads, *x, Tensor::scalar(g.item() * w));
                }
            }
        }
    }
}

pub fn huber(e: f64, beta: f64) -> f64 {
    let a = e.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn huber_grad(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

// ---------------------------------------------------------------------------
// Kernels

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(Error::InvalidArgument(format!("input {n} too small for kernel {k}")));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output index range `o` for which `o*stride + offset` lies in `[0, n)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_excl = if (n as isize) - offset <= 0 {
        0
    } else {
        ((n as isize - offset + s - 1) / s).min(out_len as isize)
    };
    (lo as usize, (hi_excl.max(lo as isize)) as usize)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (&[cin, h, wd], &[cout, wcin, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("x [C,H,W], w [O,C,k,k]", format!("{:?}, {:?}", x.shape(), w.shape())));
    };
    if wcin != cin || b.shape() != [cout] {
        return Err(Error::shape(format!("{cin} input channels"), format!("{wcin}")));
    }
    let (ho, wo) = (conv_out(h, kh, stride, pad)?, conv_out(wd, kw, stride, pad)?);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for co in 0..cout {
        let plane = &mut od[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, stride, ky as isize - pad as isize, h);
                for kx in 0..kw {
                    let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(wo, stride, kx as isize - pad as isize, wd);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize, want_x: bool, want_w: bool) -> ConvGrads {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let (ho, wo) = (g.dim(1), g.dim(2));
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut db = want_w.then(|| Tensor::zeros(&[cout]));
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for co in 0..cout {
        let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
        if let Some(db) = db.as_mut() {
            db.data_mut()[co] = gplane.iter().sum();
        }
        for ci in 0..cin {
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, stride, ky as isize - pad as isize, h);
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let (ox0, ox1) = valid_range(wo, stride, kx as isize - pad as isize, wd);
                    let mut acc = 0.0;
                    let wv = wdat[widx];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let base = ci * h * wd + iy * wd;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        if dw.is_some() {
                            let row = &xd[base..base + wd];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * stride + kx - pad];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx.data_mut()[base..base + wd];
                            for ox in ox0..ox1 {
                                drow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[cin, d, h, wd], &[cout, wcin, k, k1, k2]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("x [C,D,H,W], w [O,C,k,k,k]", format!("{:?}, {:?}", x.shape(), w.shape())));
    };
    if wcin != cin || k != k1 || k != k2 || k % 2 == 0 || b.shape() != [cout] {
        return Err(Error::shape(format!("w [O,{cin},k,k,k] with odd k"), format!("{:?}", w.shape())));
    }
    let p = k / 2;
    let vol = d * h * wd;
    let mut out = Tensor::zeros(&[cout, d, h, wd]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for co in 0..cout {
        let ovol = &mut od[co * vol..(co + 1) * vol];
        ovol.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..cin {
            let xin = &xd[ci * vol..(ci + 1) * vol];
            for kz in 0..k {
                let (z0, z1) = valid_range(d, 1, kz as isize - p as isize, d);
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, 1, ky as isize - p as isize, h);
                    for kx in 0..k {
                        let wv = wdat[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(wd, 1, kx as isize - p as isize, wd);
                        let shift = kx as isize - p as isize;
                        for z in z0..z1 {
                            let iz = z + kz - p;
                            for y in y0..y1 {
                                let iy = y + ky - p;
                                let src = &xin[(iz * h + iy) * wd..(iz * h + iy + 1) * wd];
                                let dst = &mut ovol[(z * h + y) * wd..(z * h + y + 1) * wd];
                                for xx in x0..x1 {
                                    dst[xx] += wv * src[(xx as isize + shift) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv3d_backward(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool, want_w: bool) -> ConvGrads {
    let (cin, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    let p = k / 2;
    let vol = d * h * wd;
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut db = want_w.then(|| Tensor::zeros(&[cout]));
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for co in 0..cout {
        let gvol = &gd[co * vol..(co + 1) * vol];
        if let Some(db) = db.as_mut() {
            db.data_mut()[co] = gvol.iter().sum();
        }
        for ci in 0..cin {
            let xin = &xd[ci * vol..(ci + 1) * vol];
            for kz in 0..k {
                let (z0, z1) = valid_range(d, 1, kz as isize - p as isize, d);
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, 1, ky as isize - p as isize, h);
                    for kx in 0..k {
                        let widx = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let (x0, x1) = valid_range(wd, 1, kx as isize - p as isize, wd);
                        let shift = kx as isize - p as isize;
                        let mut acc = 0.0;
                        for z in z0..z1 {
                            let iz = z + kz - p;
                            for y in y0..y1 {
                                let iy = y + ky - p;
                                let grow = &gvol[(z * h + y) * wd..(z * h + y + 1) * wd];
                                let sbase = (iz * h + iy) * wd;
                                if dw.is_some() {
                                    let src = &xin[sbase..sbase + wd];
                                    for xx in x0..x1 {
                                        acc += grow[xx] * src[(xx as isize + shift) as usize];
                                    }
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let dst = &mut dx.data_mut()[ci * vol + sbase..ci * vol + sbase + wd];
                                    for xx in x0..x1 {
                                        dst[(xx as isize + shift) as usize] += wv * grow[xx];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn check_pair(l: &Tensor, r: &Tensor) -> Result<(usize, usize, usize)> {
    match (l.shape(), r.shape()) {
        (&[c, h, w], b) if b == [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{:?}", l.shape()), format!("{:?}", r.shape()))),
    }
}

fn concat_volume_forward(l: &Tensor, r: &Tensor, levels: usize) -> Result<Tensor> {
    let (c, h, w) = check_pair(l, r)?;
    if levels == 0 {
        return Err(Error::InvalidArgument("cost volume needs at least one level".into()));
    }
    let mut out = Tensor::zeros(&[2 * c, levels, h, w]);
    let (ld, rd) = (l.data(), r.data());
    let od = out.data_mut();
    for ch in 0..c {
        for k in 0..levels {
            for y in 0..h {
                let src_l = &ld[(ch * h + y) * w..(ch * h + y + 1) * w];
                let src_r = &rd[(ch * h + y) * w..(ch * h + y + 1) * w];
                let base_l = ((ch * levels + k) * h + y) * w;
                od[base_l..base_l + w].copy_from_slice(src_l);
                let base_r = (((c + ch) * levels + k) * h + y) * w;
                for x in k.min(w)..w {
                    od[base_r + x] = src_r[x - k];
                }
            }
        }
    }
    Ok(out)
}

fn concat_volume_backward(shape: &[usize], g: &Tensor, levels: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut dl = Tensor::zeros(shape);
    let mut dr = Tensor::zeros(shape);
    let gd = g.data();
    for ch in 0..c {
        for k in 0..levels {
            for y in 0..h {
                let base_l = ((ch * levels + k) * h + y) * w;
                let base_r = (((c + ch) * levels + k) * h + y) * w;
                let dst_l = &mut dl.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
                for x in 0..w {
                    dst_l[x] += gd[base_l + x];
                }
                let dst_r = &mut dr.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
                for x in k.min(w)..w {
                    dst_r[x - k] += gd[base_r + x];
                }
            }
        }
    }
    (dl, dr)
}

fn corr_volume_forward(l: &Tensor, r: &Tensor, levels: usize) -> Result<Tensor> {
    let (c, h, w) = check_pair(l, r)?;
    if levels == 0 {
        return Err(Error::InvalidArgument("cost volume needs at least one level".into()));
    }
    let mut out = Tensor::zeros(&[1, levels, h, w]);
    let (ld, rd) = (l.data(), r.data());
    let od = out.data_mut();
    for k in 0..levels {
        for ch in 0..c {
            for y in 0..h {
                let row_l = &ld[(ch * h + y) * w..(ch * h + y + 1) * w];
                let row_r = &rd[(ch * h + y) * w..(ch * h + y + 1) * w];
                let base = (k * h + y) * w;
                for x in k.min(w)..w {
                    od[base + x] += row_l[x] * row_r[x - k];
                }
            }
        }
    }
    Ok(out)
}

fn corr_volume_backward(l: &Tensor, r: &Tensor, g: &Tensor, levels: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (l.dim(0), l.dim(1), l.dim(2));
    let mut dl = Tensor::zeros(l.shape());
    let mut dr = Tensor::zeros(r.shape());
    let (ld, rd, gd) = (l.data(), r.data(), g.data());
    for k in 0..levels {
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                let base = (k * h + y) * w;
                for x in k.min(w)..w {
                    let gv = gd[base + x];
                    dl.data_mut()[row + x] += gv * rd[row + x - k];
                    dr.data_mut()[row + x - k] += gv * ld[row + x];
                }
            }
        }
    }
    (dl, dr)
}

/// Output `[F, levels, H/s, W/s]`: each cell mixes the `s×s×s` block of
/// the full-resolution volume `[left RGB, right RGB shifted by d]`,
/// `d = level·s + a`.
fn rgb_volume_forward(l: &Tensor, r: &Tensor, w: &Tensor, b: &Tensor, s: usize, levels: usize) -> Result<Tensor> {
    let (c, h, wd) = check_pair(l, r)?;
    let &[f, wc, s0, s1, s2] = w.shape() else {
        return Err(Error::shape("[F, 2C, s, s, s]", format!("{:?}", w.shape())));
    };
    if wc != 2 * c || s0 != s || s1 != s || s2 != s || h % s != 0 || wd % s != 0 || b.shape() != [f] {
        return Err(Error::shape(format!("[F, {}, {s}, {s}, {s}]", 2 * c), format!("{:?}", w.shape())));
    }
    let (hs, ws) = (h / s, wd / s);
    let mut out = Tensor::zeros(&[f, levels, hs, ws]);
    let (ld, rd, wdat, bd) = (l.data(), r.data(), w.data(), b.data());
    // The left half does not depend on disparity: fold the disparity taps.
    let mut wl = vec![0.0; f * c * s * s];
    for fo in 0..f {
        for ch in 0..c {
            for a in 0..s {
                for py in 0..s {
                    for px in 0..s {
                        wl[((fo * c + ch) * s + py) * s + px] += wdat[((((fo * 2 * c) + ch) * s + a) * s + py) * s + px];
                    }
                }
            }
        }
    }
    let od = out.data_mut();
    for fo in 0..f {
        for k in 0..levels {
            for i in 0..hs {
                for j in 0..ws {
                    let mut acc = bd[fo];
                    for ch in 0..c {
                        for py in 0..s {
                            let y = i * s + py;
                            for px in 0..s {
                                let x = j * s + px;
                                acc += wl[((fo * c + ch) * s + py) * s + px] * ld[(ch * h + y) * wd + x];
                                for a in 0..s {
                                    let disp = k * s + a;
                                    if x >= disp {
                                        acc += wdat[((((fo * 2 * c) + c + ch) * s + a) * s + py) * s + px]
                                            * rd[(ch * h + y) * wd + x - disp];
                                    }
                                }
                            }
                        }
                    }
                    od[((fo * levels + k) * hs + i) * ws + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

type RgbGrads = (Option<Tensor>, Option<Tensor>, Tensor, Tensor);

fn rgb_volume_backward(l: &Tensor, r: &Tensor, w: &Tensor, g: &Tensor, s: usize, levels: usize, want_img: bool) -> RgbGrads {
    let (c, h, wd) = (l.dim(0), l.dim(1), l.dim(2));
    let f = w.dim(0);
    let (hs, ws) = (h / s, wd / s);
    let mut dl = want_img.then(|| Tensor::zeros(l.shape()));
    let mut dr = want_img.then(|| Tensor::zeros(r.shape()));
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[f]);
    let (ld, rd, wdat, gd) = (l.data(), r.data(), w.data(), g.data());
    for fo in 0..f {
        for k in 0..levels {
            for i in 0..hs {
                for j in 0..ws {
                    let gv = gd[((fo * levels + k) * hs + i) * ws + j];
                    if gv == 0.0 {
                        continue;
                    }
                    db.data_mut()[fo] += gv;
                    for ch in 0..c {
                        for py in 0..s {
                            let y = i * s + py;
                            for px in 0..s {
                                let x = j * s + px;
                                let li = (ch * h + y) * wd + x;
                                for a in 0..s {
                                    let wl_idx = ((((fo * 2 * c) + ch) * s + a) * s + py) * s + px;
                                    dw.data_mut()[wl_idx] += gv * ld[li];
                                    if let Some(dl) = dl.as_mut() {
                                        dl.data_mut()[li] += gv * wdat[wl_idx];
                                    }
                                    let disp = k * s + a;
                                    if x >= disp {
                                        let wr_idx = ((((fo * 2 * c) + c + ch) * s + a) * s + py) * s + px;
                                        let ri = li - disp;
                                        dw.data_mut()[wr_idx] += gv * rd[ri];
                                        if let Some(dr) = dr.as_mut() {
                                            dr.data_mut()[ri] += gv * wdat[wr_idx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dl, dr, dw, db)
}

/// Half-pixel-centered linear resampling taps (edge-clamped).
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

fn resize_axis(x: &Tensor, axis: usize, taps: &[Tap], _transpose: bool) -> Tensor {
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = taps.len();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (n_in, n_out) = (shape[axis], taps.len());
    let mut out = Tensor::zeros(&out_shape);
    let (xd, od) = (x.data(), out.data_mut());
    for o in 0..outer {
        for (t, tap) in taps.iter().enumerate() {
            let dst = &mut od[(o * n_out + t) * inner..(o * n_out + t + 1) * inner];
            let a = &xd[(o * n_in + tap.i0) * inner..(o * n_in + tap.i0 + 1) * inner];
            let b = &xd[(o * n_in + tap.i1) * inner..(o * n_in + tap.i1 + 1) * inner];
            let w0 = 1.0 - tap.w1;
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * av + tap.w1 * bv;
            }
        }
    }
    out
}

fn resize_axis_transpose(g: &Tensor, axis: usize, taps: &[Tap], n_in: usize) -> Tensor {
    let shape = g.shape();
    let mut in_shape = shape.to_vec();
    in_shape[axis] = n_in;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n_out = taps.len();
    let mut out = Tensor::zeros(&in_shape);
    let (gd, od) = (g.data(), out.data_mut());
    for o in 0..outer {
        for (t, tap) in taps.iter().enumerate() {
            let src = &gd[(o * n_out + t) * inner..(o * n_out + t + 1) * inner];
            let w0 = 1.0 - tap.w1;
            for (q, &gv) in src.iter().enumerate() {
                od[(o * n_in + tap.i0) * inner + q] += w0 * gv;
                od[(o * n_in + tap.i1) * inner + q] += tap.w1 * gv;
            }
        }
    }
    out
}

fn soft_argmin_forward(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[d, h, w] = x.shape() else {
        return Err(Error::shape("[D, H, W]", format!("{:?}", x.shape())));
    };
    let hw = h * w;
    let xd = x.data();
    let mut probs = Tensor::zeros(&[d, h, w]);
    let mut out = Tensor::zeros(&[h, w]);
    let pd = probs.data_mut();
    for i in 0..hw {
        let mut min = f64::INFINITY;
        for k in 0..d {
            min = min.min(xd[k * hw + i]);
        }
        let mut z = 0.0;
        for k in 0..d {
            let e = (-(xd[k * hw + i] - min)).exp();
            pd[k * hw + i] = e;
            z += e;
        }
        let mut disp = 0.0;
        for k in 0..d {
            pd[k * hw + i] /= z;
            disp += k as f64 * pd[k * hw + i];
        }
        out.data_mut()[i] = disp;
    }
    Ok((out, probs))
}
