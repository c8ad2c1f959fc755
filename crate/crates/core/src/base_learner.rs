//! Supervised segmentation head over the base classes.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::{Conv, ConvNormRelu, PyramidPooling};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub num_base: usize,
    pub head_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub norm_groups: usize,
}

impl BaseConfig {
    pub fn new(num_base: usize) -> Self {
        BaseConfig {
            num_base,
            head_channels: 32,
            ppm_bins: alloc::vec![1, 2, 3, 6],
            norm_groups: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseLearner {
    config: BaseConfig,
    fconv: ConvNormRelu,
    ppm: PyramidPooling,
    fuse: ConvNormRelu,
    pub classifier: Conv,
}

impl BaseLearner {
    pub fn new<R: Rng + ?Sized>(
        config: BaseConfig,
        in_channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.num_base == 0 {
            return Err(Error::NoBaseClasses);
        }
        if config.head_channels == 0 || config.ppm_bins.contains(&0) {
            return Err(Error::config("base head needs positive widths and bins"));
        }
        let group = ParamGroup::Base;
        let c = config.head_channels;
        let fconv = ConvNormRelu::new(store, "base.fconv", group, in_channels, c, 1, config.norm_groups, rng);
        let branch = (c / config.ppm_bins.len()).max(1);
        let ppm = PyramidPooling::new(store, "base.ppm", group, c, branch, &config.ppm_bins, rng);
        let ppm_out = ppm.out_channels(c, store);
        let fuse = ConvNormRelu::new(store, "base.fuse", group, ppm_out, c, 1, config.norm_groups, rng);
        let classifier = Conv::new(
            store,
            "base.classifier",
            group,
            c,
            config.num_base + 1,
            1,
            ConvGeom::UNIT,
            true,
            rng,
        );
        Ok(BaseLearner {
            config,
            fconv,
            ppm,
            fuse,
            classifier,
        })
    }

    pub fn config(&self) -> &BaseConfig {
        &self.config
    }

    pub fn num_base(&self) -> usize {
        self.config.num_base
    }

    /// Probability map `(1 + N_b) x out_h x out_w` from the last encoder tap.
    pub fn forward(&self, g: &mut Graph<'_>, b4: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.fconv.forward(g, b4)?;
        let x = self.ppm.forward(g, x)?;
        let x = self.fuse.forward(g, x)?;
        let logits = self.classifier.forward(g, x)?;
        let up = g.resize_bilinear(logits, out_h, out_w);
        Ok(g.softmax_channels(up))
    }

    pub fn predict(&self, store: &ParamStore, b4: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let x = g.input_ref(b4);
        let p = self.forward(&mut g, x, out_h, out_w)?;
        Ok(g.value(p).clone())
    }
}

/// Mean pixel-wise cross-entropy against dense base labels.
pub fn base_loss(g: &mut Graph<'_>, probs: Var, gt: &LabelMap) -> Result<Var> {
    g.cross_entropy(probs, gt.as_slice())
}

/// Sum of the foreground channels, `1 x H x W`.
pub fn aggregate_base_foreground(probs: &Tensor) -> Tensor {
    let (c, h, w) = probs.dims3();
    let mut out = Tensor::zeros(&[1, h, w]);
    for ch in 1..c {
        for (o, v) in out.data_mut().iter_mut().zip(probs.channel(ch)) {
            *o += v;
        }
    }
    out
}

/// Per-pixel argmax; ties go to the lowest channel.
pub fn base_argmax_mask(probs: &Tensor) -> LabelMap {
    let (c, h, w) = probs.dims3();
    let labels = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if probs.data()[ch * h * w + i] > probs.data()[best * h * w + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels).expect("h * w labels")
}
