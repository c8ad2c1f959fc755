//! Parameterised building blocks shared by the learners.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{ConvGeom, Graph, Var};
use crate::params::{kaiming_normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            kaiming_normal(&[out_channels, in_channels, kernel, kernel], rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_channels])));
        Conv { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.max(1).min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize, max_groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            groups: norm_groups(channels, max_groups),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// 3x3 convolution, group normalisation, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        max_groups: usize,
        rng: &mut R,
    ) -> Self {
        let geom = ConvGeom {
            stride,
            padding: 1,
            dilation: 1,
        };
        ConvNormRelu {
            conv: Conv::new(store, &format!("{name}.conv"), group, in_channels, out_channels, 3, geom, false, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), group, out_channels, max_groups),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// Pyramid pooling: pooled context at several grid sizes, each reduced by a
/// 1x1 convolution, upsampled and concatenated with the input.
#[derive(Clone, Debug)]
pub struct PyramidPooling {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv>,
}

impl PyramidPooling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        branch_channels: usize,
        bins: &[usize],
        rng: &mut R,
    ) -> Self {
        let branches = bins
            .iter()
            .map(|b| {
                Conv::new(
                    store,
                    &format!("{name}.bin{b}"),
                    group,
                    in_channels,
                    branch_channels,
                    1,
                    ConvGeom::UNIT,
                    true,
                    rng,
                )
            })
            .collect();
        PyramidPooling {
            bins: bins.to_vec(),
            branches,
        }
    }

    pub fn out_channels(&self, in_channels: usize, store: &ParamStore) -> usize {
        in_channels + self.branches.iter().map(|c| c.out_channels(store)).sum::<usize>()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3();
        let mut parts = Vec::with_capacity(self.bins.len() + 1);
        parts.push(x);
        for (&bin, conv) in self.bins.iter().zip(&self.branches) {
            let pooled = g.adaptive_avg_pool(x, bin, bin);
            let reduced = conv.forward(g, pooled)?;
            let reduced = g.relu(reduced);
            parts.push(g.resize_bilinear(reduced, h, w));
        }
        g.concat(&parts)
    }
}

/// Atrous spatial pyramid pooling: parallel dilated 3x3 convolutions plus
/// an image-level pooling branch, fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub rates: Vec<Conv>,
    pub image_pool: Conv,
    pub project: Conv,
}

impl Aspp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        channels: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Self {
        let rates = dilations
            .iter()
            .map(|&d| {
                Conv::new(
                    store,
                    &format!("{name}.rate{d}"),
                    group,
                    in_channels,
                    channels,
                    3,
                    ConvGeom::same(3, d),
                    true,
                    rng,
                )
            })
            .collect();
        let image_pool = Conv::new(
            store,
            &format!("{name}.pool"),
            group,
            in_channels,
            channels,
            1,
            ConvGeom::UNIT,
            true,
            rng,
        );
        let project = Conv::new(
            store,
            &format!("{name}.project"),
            group,
            channels * (dilations.len() + 1),
            channels,
            1,
            ConvGeom::UNIT,
            true,
            rng,
        );
        Aspp {
            rates,
            image_pool,
            project,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3();
        let mut parts = Vec::with_capacity(self.rates.len() + 1);
        for conv in &self.rates {
            let y = conv.forward(g, x)?;
            parts.push(g.relu(y));
        }
        let pooled = g.adaptive_avg_pool(x, 1, 1);
        let pooled = self.image_pool.forward(g, pooled)?;
        let pooled = g.relu(pooled);
        parts.push(g.broadcast(pooled, h, w)?);
        let cat = g.concat(&parts)?;
        let y = self.project.forward(g, cat)?;
        Ok(g.relu(y))
    }
}
