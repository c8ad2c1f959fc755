//! Reverse-mode automatic differentiation over feature maps.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes that do not depend on a trainable parameter are not tracked and
//! keep no saved state, so frozen sub-networks cost only their forward.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    /// Stride-1 geometry that preserves spatial size for a `k x k` kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

enum Value<'s> {
    Owned(Tensor),
    Borrowed(&'s Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Box<[Var]>),
    Channel { x: Var, index: usize },
    AdaptiveAvgPool(Var),
    ResizeBilinear(Var),
    SoftmaxChannels(Var),
    MaskedAvgPool { x: Var, weights: Vec<f64>, denom: f64 },
    Broadcast(Var),
    WeightedSum { items: Box<[Var]>, weights: Var },
    Squash { x: Var, median: f64 },
    CrossEntropy { probs: Var, labels: Vec<u8> },
    Bce { p: Var, targets: Vec<u8> },
}

struct Node<'s> {
    value: Value<'s>,
    op: Op,
    tracked: bool,
}

/// Clamp applied inside every logarithm of the losses.
pub const LOG_CLAMP: f64 = 1e-12;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    param_vars: Vec<Option<Var>>,
    no_grad: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            no_grad: false,
        }
    }

    /// A graph that tracks nothing, whatever the freeze state of the store.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            no_grad: true,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Value<'s>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.push(Value::Owned(value), op, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'s Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// The node for a stored parameter; repeated calls share one node so
    /// weight-shared layers accumulate into a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let tracked = !self.no_grad && self.store.is_trainable(id);
        let v = self.push(Value::Param(id), Op::Leaf, tracked);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape();
        if ws.len() != 4 || ws[1] != c {
            return Err(Error::shape(alloc::format!(
                "conv kernel {:?} against {c} input channels",
                ws
            )));
        }
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv bias length"));
            }
        }
        let (oh, ow) = match (geom.output_len(h, kh), geom.output_len(wd, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape(alloc::format!("{h}x{wd} input too small for kernel"))),
        };
        let tracked = self.is_tracked(x) || self.is_tracked(w) || b.is_some_and(|b| self.is_tracked(b));
        let pointwise = kh == 1 && kw == 1 && geom == ConvGeom::UNIT;
        let cols = if pointwise {
            None
        } else {
            Some(im2col(self.value(x), kh, kw, geom, oh, ow))
        };
        let mut out = vec![0.0; o * oh * ow];
        {
            let xs = self.value(x).data();
            let wv = self.value(w).data();
            let k = c * kh * kw;
            let rhs = cols.as_deref().unwrap_or(xs);
            gemm(o, k, oh * ow, wv, false, rhs, false, &mut out, 0.0);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (row, bias) in out.chunks_mut(oh * ow).zip(bv) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::from_vec(&[o, oh, ow], out)?;
        let cols = if tracked { cols } else { None };
        Ok(self.push_owned(out, Op::Conv2d { x, w, b, geom, cols }, tracked))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3();
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(alloc::format!("{c} channels into {groups} groups")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("group norm affine length"));
        }
        let per = c / groups * h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; groups];
        for gi in 0..groups {
            let seg = &xs[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / libm::sqrt(var + 1e-5);
            rstd[gi] = r;
            for (dst, v) in xhat[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
                *dst = (v - mean) * r;
            }
        }
        let hw = h * w;
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        let out = Tensor::from_vec(&[c, h, w], out)?;
        let (xhat, rstd) = if tracked { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push_owned(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("same shape");
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::Relu(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add operands differ in shape"));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push_owned(out, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(factor);
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::Scale(x, factor), tracked)
    }

    /// Channel-wise concatenation of same-sized feature maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).dims3();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3();
            if (ph, pw) != (h, w) {
                return Err(Error::shape(alloc::format!(
                    "concat of {ph}x{pw} onto {h}x{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        let out = Tensor::from_vec(&[channels, h, w], data)?;
        Ok(self.push_owned(out, Op::Concat(parts.into()), tracked))
    }

    pub fn channel(&mut self, x: Var, index: usize) -> Var {
        let t = self.value(x);
        let (_, h, w) = t.dims3();
        let out = Tensor::from_vec(&[1, h, w], t.channel(index).to_vec()).expect("one channel");
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::Channel { x, index }, tracked)
    }

    /// Average pooling onto a fixed `oh x ow` grid with PyTorch's bin edges.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = out.channel_mut(ch);
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    dst[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::AdaptiveAvgPool(x), tracked)
    }

    /// Bilinear resize with corner alignment.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        if (h, w) == (oh, ow) {
            let out = t.clone();
            let tracked = self.is_tracked(x);
            return self.push_owned(out, Op::ResizeBilinear(x), tracked);
        }
        let ys = bilinear_taps(h, oh);
        let xs = bilinear_taps(w, ow);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = out.channel_mut(ch);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::ResizeBilinear(x), tracked)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = softmax_channels(self.value(x));
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::SoftmaxChannels(x), tracked)
    }

    /// `sum(f * m) / (sum(m) + eps)` per channel; `weights` is the `h x w`
    /// mask already resized to the feature grid. Output is `C x 1 x 1`.
    pub fn masked_avg_pool(&mut self, x: Var, weights: Vec<f64>, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        if weights.len() != h * w {
            return Err(Error::shape(alloc::format!(
                "mask of {} cells for a {h}x{w} feature map",
                weights.len()
            )));
        }
        let denom = weights.iter().sum::<f64>() + eps;
        let data = (0..c)
            .map(|ch| {
                t.channel(ch)
                    .iter()
                    .zip(&weights)
                    .map(|(f, m)| f * m)
                    .sum::<f64>()
                    / denom
            })
            .collect();
        let out = Tensor::from_vec(&[c, 1, 1], data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push_owned(out, Op::MaskedAvgPool { x, weights, denom }, tracked))
    }

    /// Expands a `C x 1 x 1` vector over an `h x w` grid.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, th, tw) = t.dims3();
        if (th, tw) != (1, 1) {
            return Err(Error::shape("broadcast needs a C x 1 x 1 input"));
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let v = t.data()[ch];
            out.channel_mut(ch).iter_mut().for_each(|d| *d = v);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push_owned(out, Op::Broadcast(x), tracked))
    }

    /// `sum_k weights[k] * items[k]`, with `weights` a `K x 1 x 1` node.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        let wt = self.value(weights).data();
        if wt.len() != items.len() || items.is_empty() {
            return Err(Error::shape("one weight per summand"));
        }
        let mut out = Tensor::zeros(self.value(items[0]).shape());
        for (&item, &wk) in items.iter().zip(wt) {
            let t = self.value(item);
            if t.shape() != out.shape() {
                return Err(Error::shape("weighted sum of differently shaped maps"));
            }
            for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                *o += wk * v;
            }
        }
        let tracked = self.is_tracked(weights) || items.iter().any(|&i| self.is_tracked(i));
        Ok(self.push_owned(
            out,
            Op::WeightedSum {
                items: items.into(),
                weights,
            },
            tracked,
        ))
    }

    /// Elementwise `x / (x + median)`, mapping non-negative reals into `[0, 1)`.
    pub fn squash(&mut self, x: Var, median: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| squash(v, median)).collect();
        let out = Tensor::from_vec(t.shape(), data).expect("same shape");
        let tracked = self.is_tracked(x);
        self.push_owned(out, Op::Squash { x, median }, tracked)
    }

    /// Mean pixel-wise cross-entropy of class probabilities against labels.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        let t = self.value(probs);
        let (c, h, w) = t.dims3();
        if labels.len() != h * w {
            return Err(Error::shape("label map size"));
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let l = usize::from(l);
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, max: c - 1 });
            }
            total -= libm::log(t.data()[l * h * w + i].max(LOG_CLAMP));
        }
        let out = Tensor::scalar(total / (h * w) as f64);
        let tracked = self.is_tracked(probs);
        Ok(self.push_owned(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean binary cross-entropy of a `1 x H x W` foreground probability.
    pub fn bce(&mut self, p: Var, targets: &[u8]) -> Result<Var> {
        let t = self.value(p);
        let (c, h, w) = t.dims3();
        if c != 1 || targets.len() != h * w {
            return Err(Error::shape("bce expects a 1 x H x W map and an H x W target"));
        }
        let mut total = 0.0;
        for (&pv, &y) in t.data().iter().zip(targets) {
            total -= match y {
                1 => libm::log(pv.max(LOG_CLAMP)),
                0 => libm::log((1.0 - pv).max(LOG_CLAMP)),
                other => {
                    return Err(Error::LabelOutOfRange {
                        label: usize::from(other),
                        max: 1,
                    })
                }
            };
        }
        let out = Tensor::scalar(total / (h * w) as f64);
        let tracked = self.is_tracked(p);
        Ok(self.push_owned(
            out,
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        out.accumulate(id, &dy);
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    self.conv_backward(&mut grads, &dy, *x, *w, *b, *geom, cols.as_deref())
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => self.group_norm_backward(&mut grads, &dy, *x, *gamma, *beta, *groups, xhat, rstd),
                Op::Relu(x) => {
                    if self.is_tracked(*x) {
                        let y = self.value(Var(i)).data();
                        let dx = dy
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *x, with_shape(&dy, dx));
                    }
                }
                Op::Add(a, b) => {
                    if self.is_tracked(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.is_tracked(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Scale(x, f) => {
                    if self.is_tracked(*x) {
                        let mut d = dy;
                        d.scale(*f);
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let n = self.value(p).len();
                        if self.is_tracked(p) {
                            let d = dy.data()[offset..offset + n].to_vec();
                            accumulate(&mut grads, p, with_shape(self.value(p), d));
                        }
                        offset += n;
                    }
                }
                Op::Channel { x, index } => {
                    if self.is_tracked(*x) {
                        let mut d = Tensor::zeros(self.value(*x).shape());
                        d.channel_mut(*index).copy_from_slice(dy.data());
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::AdaptiveAvgPool(x) => {
                    if self.is_tracked(*x) {
                        let (c, h, w) = self.value(*x).dims3();
                        let (_, oh, ow) = dy.dims3();
                        let mut d = Tensor::zeros(&[c, h, w]);
                        for ch in 0..c {
                            let g = dy.channel(ch);
                            let dst = d.channel_mut(ch);
                            for oy in 0..oh {
                                let (y0, y1) = pool_bin(oy, h, oh);
                                for ox in 0..ow {
                                    let (x0, x1) = pool_bin(ox, w, ow);
                                    let share = g[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                    for y in y0..y1 {
                                        dst[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::ResizeBilinear(x) => {
                    if self.is_tracked(*x) {
                        let (c, h, w) = self.value(*x).dims3();
                        let (_, oh, ow) = dy.dims3();
                        if (h, w) == (oh, ow) {
                            accumulate(&mut grads, *x, dy);
                            continue;
                        }
                        let ys = bilinear_taps(h, oh);
                        let xs = bilinear_taps(w, ow);
                        let mut d = Tensor::zeros(&[c, h, w]);
                        for ch in 0..c {
                            let g = dy.channel(ch);
                            let dst = d.channel_mut(ch);
                            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                    let gv = g[oy * ow + ox];
                                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                                    dst[y1 * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::SoftmaxChannels(x) => {
                    if self.is_tracked(*x) {
                        let y = self.value(Var(i));
                        let (c, h, w) = y.dims3();
                        let hw = h * w;
                        let mut d = Tensor::zeros(&[c, h, w]);
                        for p in 0..hw {
                            let dot: f64 = (0..c).map(|ch| dy.data()[ch * hw + p] * y.data()[ch * hw + p]).sum();
                            for ch in 0..c {
                                let k = ch * hw + p;
                                d.data_mut()[k] = y.data()[k] * (dy.data()[k] - dot);
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::MaskedAvgPool { x, weights, denom } => {
                    if self.is_tracked(*x) {
                        let (c, h, w) = self.value(*x).dims3();
                        let mut d = Tensor::zeros(&[c, h, w]);
                        for ch in 0..c {
                            let g = dy.data()[ch] / denom;
                            for (dst, m) in d.channel_mut(ch).iter_mut().zip(weights) {
                                *dst = g * m;
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Broadcast(x) => {
                    if self.is_tracked(*x) {
                        let (c, _, _) = dy.dims3();
                        let data = (0..c).map(|ch| dy.channel(ch).iter().sum()).collect();
                        accumulate(&mut grads, *x, with_shape(self.value(*x), data));
                    }
                }
                Op::WeightedSum { items, weights } => {
                    let wt = self.value(*weights);
                    if self.is_tracked(*weights) {
                        let data = items
                            .iter()
                            .map(|&it| {
                                self.value(it)
                                    .data()
                                    .iter()
                                    .zip(dy.data())
                                    .map(|(a, b)| a * b)
                                    .sum()
                            })
                            .collect();
                        accumulate(&mut grads, *weights, with_shape(wt, data));
                    }
                    for (&it, &wk) in items.iter().zip(wt.data()) {
                        if self.is_tracked(it) {
                            let mut d = dy.clone();
                            d.scale(wk);
                            accumulate(&mut grads, it, d);
                        }
                    }
                }
                Op::Squash { x, median } => {
                    if self.is_tracked(*x) {
                        let xs = self.value(*x).data();
                        let data = xs
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, g)| g * squash_derivative(v, *median))
                            .collect();
                        accumulate(&mut grads, *x, with_shape(&dy, data));
                    }
                }
                Op::CrossEntropy { probs, labels } => {
                    if self.is_tracked(*probs) {
                        let t = self.value(*probs);
                        let (_, h, w) = t.dims3();
                        let hw = h * w;
                        let scale = dy.item() / hw as f64;
                        let mut d = Tensor::zeros(t.shape());
                        for (i, &l) in labels.iter().enumerate() {
                            let k = usize::from(l) * hw + i;
                            let p = t.data()[k];
                            if p > LOG_CLAMP {
                                d.data_mut()[k] = -scale / p;
                            }
                        }
                        accumulate(&mut grads, *probs, d);
                    }
                }
                Op::Bce { p, targets } => {
                    if self.is_tracked(*p) {
                        let t = self.value(*p);
                        let scale = dy.item() / t.len() as f64;
                        let data = t
                            .data()
                            .iter()
                            .zip(targets)
                            .map(|(&pv, &y)| {
                                if y == 1 {
                                    if pv > LOG_CLAMP {
                                        -scale / pv
                                    } else {
                                        0.0
                                    }
                                } else if 1.0 - pv > LOG_CLAMP {
                                    scale / (1.0 - pv)
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *p, with_shape(t, data));
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        dy: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<&[f64]>,
    ) {
        let xt = self.value(x);
        let wt = self.value(w);
        let (c, _, _) = xt.dims3();
        let (o, oh, ow) = dy.dims3();
        let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
        let k = c * kh * kw;
        let n = oh * ow;
        let cols = cols.unwrap_or(xt.data());
        if self.is_tracked(w) {
            let mut dw = vec![0.0; o * k];
            gemm(o, n, k, dy.data(), false, cols, true, &mut dw, 0.0);
            accumulate(grads, w, with_shape(wt, dw));
        }
        if let Some(b) = b.filter(|&b| self.is_tracked(b)) {
            let db = dy.data().chunks(n).map(|row| row.iter().sum()).collect();
            accumulate(grads, b, with_shape(self.value(b), db));
        }
        if self.is_tracked(x) {
            let mut dcols = vec![0.0; k * n];
            gemm(k, o, n, wt.data(), true, dy.data(), false, &mut dcols, 0.0);
            let dx = if kh == 1 && kw == 1 && geom == ConvGeom::UNIT {
                with_shape(xt, dcols)
            } else {
                col2im(&dcols, xt.shape(), kh, kw, geom, oh, ow)
            };
            accumulate(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        dy: &Tensor,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: &[f64],
        rstd: &[f64],
    ) {
        let (c, h, w) = dy.dims3();
        let hw = h * w;
        let g = self.value(gamma).data();
        if self.is_tracked(gamma) {
            let data = (0..c)
                .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| dy.data()[i] * xhat[i]).sum())
                .collect();
            accumulate(grads, gamma, with_shape(self.value(gamma), data));
        }
        if self.is_tracked(beta) {
            let data = (0..c).map(|ch| dy.channel(ch).iter().sum()).collect();
            accumulate(grads, beta, with_shape(self.value(beta), data));
        }
        if self.is_tracked(x) {
            let per = c / groups * hw;
            let mut dx = vec![0.0; c * hw];
            let dxhat: Vec<f64> = (0..c * hw).map(|i| dy.data()[i] * g[i / hw]).collect();
            for gi in 0..groups {
                let range = gi * per..(gi + 1) * per;
                let sum: f64 = dxhat[range.clone()].iter().sum();
                let dot: f64 = range.clone().map(|i| dxhat[i] * xhat[i]).sum();
                let m = per as f64;
                for i in range {
                    dx[i] = rstd[gi] / m * (m * dxhat[i] - sum - xhat[i] * dot);
                }
            }
            accumulate(grads, x, with_shape(dy, dx));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(like.shape(), data).expect("gradient matches its node")
}

pub(crate) fn squash(v: f64, median: f64) -> f64 {
    let denom = v + median;
    if denom > 0.0 {
        v / denom
    } else {
        0.0
    }
}

fn squash_derivative(v: f64, median: f64) -> f64 {
    let denom = v + median;
    if denom > 0.0 {
        median / (denom * denom)
    } else {
        0.0
    }
}

pub(crate) fn softmax_channels(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3();
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for p in 0..hw {
        let max = (0..c).map(|ch| t.data()[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for ch in 0..c {
            let e = libm::exp(t.data()[ch * hw + p] - max);
            out.data_mut()[ch * hw + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out.data_mut()[ch * hw + p] /= sum;
        }
    }
    out
}

fn pool_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1))
}

/// `(low, high, frac)` source taps for each output index.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (libm::floor(src) as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn im2col(x: &Tensor, kh: usize, kw: usize, geom: ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = x.dims3();
    let n = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * n];
    for ch in 0..c {
        let src = x.channel(ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: &[usize], kh: usize, kw: usize, geom: ConvGeom, oh: usize, ow: usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let (c, h, w) = out.dims3();
    let n = oh * ow;
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution used as the reference for the im2col path.
    fn naive_conv(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
        let (c, h, wd) = x.dims3();
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = geom.output_len(h, kh).unwrap();
        let ow = geom.output_len(wd, kw).unwrap();
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(ic, iy as usize, ix as usize)
                                        * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for geom in [
            ConvGeom::UNIT,
            ConvGeom::same(3, 1),
            ConvGeom { stride: 2, padding: 1, dilation: 1 },
            ConvGeom::same(3, 2),
        ] {
            let x = random(&[3, 7, 6], &mut rng);
            let k = if geom == ConvGeom::UNIT { 1 } else { 3 };
            let w = random(&[4, 3, k, k], &mut rng);
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let y = g.conv2d(xv, wv, None, geom).unwrap();
            let expected = naive_conv(&x, &w, geom);
            assert_eq!(g.value(y).shape(), expected.shape());
            assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
        }
    }

    /// Central differences through every op kind, each feeding a scalar loss.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.add("x", ParamGroup::Meta, random(&[4, 6, 5], &mut rng));
        let w = store.add("w", ParamGroup::Meta, random(&[4, 4, 3, 3], &mut rng));
        let b = store.add("b", ParamGroup::Meta, random(&[4], &mut rng));
        let gamma = store.add("gamma", ParamGroup::Meta, random(&[4], &mut rng));
        let beta = store.add("beta", ParamGroup::Meta, random(&[4], &mut rng));
        let eta = store.add("eta", ParamGroup::Meta, random(&[2, 1, 1], &mut rng));
        let psi = store.add("psi", ParamGroup::Meta, Tensor::from_vec(&[1, 1, 1], alloc::vec![0.7]).unwrap());
        let labels: Vec<u8> = (0..48).map(|i| (i % 2) as u8).collect();
        let mask: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();

        let loss = |store: &ParamStore| -> (f64, Gradients) {
            let mut g = Graph::new(store);
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(b);
            let y = g.conv2d(xv, wv, Some(bv), ConvGeom { stride: 1, padding: 2, dilation: 2 }).unwrap();
            let gv = g.param(gamma);
            let btv = g.param(beta);
            let y = g.group_norm(y, gv, btv, 2).unwrap();
            let y = g.relu(y);
            let pooled = g.adaptive_avg_pool(y, 3, 2);
            let up = g.resize_bilinear(pooled, 6, 5);
            let s = g.add(up, y).unwrap();
            let small = g.resize_bilinear(s, 3, 4);
            let proto = g.masked_avg_pool(small, mask.clone(), 1e-5).unwrap();
            let expanded = g.broadcast(proto, 6, 8).unwrap();
            let a = g.channel(expanded, 0);
            let c = g.channel(expanded, 3);
            let pair = g.concat(&[a, c]).unwrap();
            let ev = g.param(eta);
            let mix = g.weighted_sum(&[a, c], ev).unwrap();
            let pv = g.param(psi);
            let sq = g.squash(pv, 0.4);
            let sq = g.broadcast(sq, 6, 8).unwrap();
            let mix = g.add(mix, sq).unwrap();
            let both = g.concat(&[pair, mix]).unwrap();
            let probs = g.softmax_channels(both);
            let ce = g.cross_entropy(probs, &labels).unwrap();
            let fg = g.channel(probs, 1);
            let bce = g.bce(fg, &labels).unwrap();
            let bce = g.scale(bce, 0.5);
            let total = g.add(ce, bce).unwrap();
            (g.value(total).item(), g.backward(total))
        };

        let (_, grads) = loss(&store);
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let (up, _) = loss(&store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let (down, _) = loss(&store);
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).unwrap().data()[k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                assert!(rel < 1e-5, "{} [{k}]: analytic {analytic} numeric {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn frozen_params_are_untracked() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Encoder, Tensor::full(&[1, 1, 1, 1], 2.0));
        store.set_frozen(ParamGroup::Encoder, true);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[1, 2, 2], 1.0));
        let wv = g.param(w);
        let y = g.conv2d(x, wv, None, ConvGeom::UNIT).unwrap();
        assert!(!g.is_tracked(y));
        let grads = g.backward(y);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn adaptive_pool_bins_cover_the_input() {
        for (len, bins) in [(8, 3), (5, 6), (16, 6), (1, 1)] {
            let mut covered = alloc::vec![false; len];
            for i in 0..bins {
                let (s, e) = pool_bin(i, len, bins);
                assert!(s < e && e <= len);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }
}
