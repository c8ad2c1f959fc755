//! Shared four-block convolutional encoder with per-block feature taps.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvNormRelu;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Smallest accepted input side.
pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    /// Upper bound on group-norm groups; the actual count divides the width.
    pub norm_groups: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [16, 32, 64, 128],
            strides: [2, 2, 1, 1],
            norm_groups: 4,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.strides.contains(&0) || self.norm_groups == 0 {
            return Err(Error::config("encoder widths, strides and groups must be positive"));
        }
        Ok(())
    }

    /// Spatial size of each tap for an `h x w` input.
    pub fn tap_sizes(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let mut out = [(0, 0); 4];
        let (mut h, mut w) = (h, w);
        for (i, &s) in self.strides.iter().enumerate() {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            out[i] = (h, w);
        }
        out
    }
}

/// Feature maps after each encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockFeatures {
    pub b1: Tensor,
    pub b2: Tensor,
    pub b3: Tensor,
    pub b4: Tensor,
}

impl BlockFeatures {
    pub fn tap(&self, index: usize) -> &Tensor {
        match index {
            1 => &self.b1,
            2 => &self.b2,
            3 => &self.b3,
            _ => &self.b4,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvNormRelu,
    second: ConvNormRelu,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = 3;
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            let out_c = config.widths[i];
            let name = format!("encoder.block{}", i + 1);
            let first = ConvNormRelu::new(
                store,
                &format!("{name}.0"),
                ParamGroup::Encoder,
                in_c,
                out_c,
                config.strides[i],
                config.norm_groups,
                rng,
            );
            let second = ConvNormRelu::new(
                store,
                &format!("{name}.1"),
                ParamGroup::Encoder,
                out_c,
                out_c,
                1,
                config.norm_groups,
                rng,
            );
            blocks.push(Block { first, second });
            in_c = out_c;
        }
        store.set_frozen(ParamGroup::Encoder, config.frozen);
        Ok(Encoder { config, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Freezing only stops updates; the forward pass is unaffected.
    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        self.config.frozen = frozen;
        store.set_frozen(ParamGroup::Encoder, frozen);
    }

    /// Returns the four taps `[b1, b2, b3, b4]` as graph nodes.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<[Var; 4]> {
        let t = g.value(image);
        let (c, h, w) = t.dims3();
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall { height: h, width: w });
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("encoder input"));
        }
        let mut x = image;
        let mut taps = [image; 4];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.first.forward(g, x)?;
            x = block.second.forward(g, x)?;
            taps[i] = x;
        }
        Ok(taps)
    }

    /// Untracked forward pass.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<BlockFeatures> {
        let mut g = Graph::inference(store);
        let x = g.input_ref(image);
        let [b1, b2, b3, b4] = self.forward(&mut g, x)?;
        Ok(BlockFeatures {
            b1: g.value(b1).clone(),
            b2: g.value(b2).clone(),
            b3: g.value(b3).clone(),
            b4: g.value(b4).clone(),
        })
    }
}
