//! Prototype-guided binary segmentation branch.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_mask, resize_soft, LabelMap};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::{Aspp, Conv};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorWiring {
    /// Prior concatenated with the query features and prototype before ASPP.
    Guidance,
    /// Prior concatenated with the ASPP output before the decoder.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub reduce_dim: usize,
    pub aspp_channels: usize,
    pub aspp_dilations: Vec<usize>,
    pub decoder_channels: usize,
    pub use_prior: bool,
    pub prior_wiring: PriorWiring,
    pub map_eps: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            reduce_dim: 256,
            aspp_channels: 256,
            aspp_dilations: alloc::vec![1, 6, 12],
            decoder_channels: 256,
            use_prior: true,
            prior_wiring: PriorWiring::Guidance,
            map_eps: 1e-5,
        }
    }
}

/// Class representative: masked spatial average of support features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype(pub Vec<f64>);

/// Support mask resampled to a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskWeights {
    pub weights: Vec<f64>,
    /// Set when thresholding erased the mask and only the strongest
    /// location was kept.
    pub fallback: bool,
}

/// Resizes `mask` to `h x w` with bilinear-then-threshold. If nothing
/// survives the threshold the single strongest soft location is kept.
pub fn support_mask_weights(mask: &LabelMap, h: usize, w: usize) -> Result<MaskWeights> {
    if mask.foreground_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let weights = resize_mask(mask, h, w);
    if weights.iter().any(|&v| v > 0.0) {
        return Ok(MaskWeights {
            weights,
            fallback: false,
        });
    }
    let soft = resize_soft(mask, h, w);
    let mut best = 0;
    for (i, &v) in soft.iter().enumerate() {
        if v > soft[best] {
            best = i;
        }
    }
    let mut weights = alloc::vec![0.0; h * w];
    weights[best] = 1.0;
    Ok(MaskWeights {
        weights,
        fallback: true,
    })
}

/// Untracked prototype of `features` under `mask`.
pub fn masked_average_pooling(features: &Tensor, mask: &LabelMap, eps: f64) -> Result<(Prototype, bool)> {
    let (_, h, w) = features.dims3();
    let m = support_mask_weights(mask, h, w)?;
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let x = g.input_ref(features);
    let v = g.masked_avg_pool(x, m.weights, eps)?;
    Ok((Prototype(g.value(v).data().to_vec()), m.fallback))
}

/// Training-free prior: for each query location the highest cosine
/// similarity to any masked support location, min-max scaled to `[0, 1]`.
pub fn prior_map(support: &Tensor, query: &Tensor, mask: &LabelMap) -> Result<Tensor> {
    let (c, h, w) = query.dims3();
    let (sc, sh, sw) = support.dims3();
    if sc != c {
        return Err(Error::shape("support and query features differ in width"));
    }
    let weights = resize_mask(mask, sh, sw);
    let norm_at = |t: &Tensor, i: usize, n: usize| -> f64 {
        libm::sqrt((0..c).map(|ch| { let v = t.data()[ch * n + i]; v * v }).sum::<f64>())
    };
    let support_px: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, _)| (i, norm_at(support, i, sh * sw)))
        .collect();
    let mut out = Tensor::zeros(&[1, h, w]);
    if support_px.is_empty() {
        return Ok(out);
    }
    for q in 0..h * w {
        let qn = norm_at(query, q, h * w);
        let mut best = f64::NEG_INFINITY;
        for &(s, sn) in &support_px {
            let denom = qn * sn;
            let cos = if denom > 0.0 {
                (0..c)
                    .map(|ch| query.data()[ch * h * w + q] * support.data()[ch * sh * sw + s])
                    .sum::<f64>()
                    / denom
            } else {
                0.0
            };
            best = best.max(cos);
        }
        out.data_mut()[q] = best;
    }
    min_max_normalize(out.data_mut());
    Ok(out)
}

/// Rescales to `[0, 1]`; a map whose spread is below `1e-9` (rounding
/// noise around a constant) becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 1e-9 { (*v - lo) / span } else { 0.0 };
    }
}

/// Shrinks the Kaiming draw of the output layer.
pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct MetaLearner {
    config: MetaConfig,
    reduce: Conv,
    aspp: Aspp,
    decoder: [Conv; 2],
    pub head: Conv,
}

impl MetaLearner {
    pub fn new<R: Rng + ?Sized>(
        config: MetaConfig,
        b2_channels: usize,
        b3_channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.reduce_dim == 0 || config.aspp_channels == 0 || config.decoder_channels == 0 {
            return Err(Error::config("meta learner widths must be positive"));
        }
        if config.aspp_dilations.is_empty() || config.aspp_dilations.contains(&0) {
            return Err(Error::config("ASPP dilations must be positive"));
        }
        if !(config.map_eps >= 0.0) {
            return Err(Error::config("prototype epsilon must be non-negative"));
        }
        let group = ParamGroup::Meta;
        let c = config.reduce_dim;
        let prior_in = |wiring| usize::from(config.use_prior && config.prior_wiring == wiring);
        let reduce = Conv::new(
            store,
            "meta.reduce",
            group,
            b2_channels + b3_channels,
            c,
            1,
            ConvGeom::UNIT,
            true,
            rng,
        );
        let aspp = Aspp::new(
            store,
            "meta.aspp",
            group,
            2 * c + prior_in(PriorWiring::Guidance),
            config.aspp_channels,
            &config.aspp_dilations,
            rng,
        );
        let d = config.decoder_channels;
        let decoder = [
            Conv::new(
                store,
                "meta.decoder.0",
                group,
                config.aspp_channels + prior_in(PriorWiring::Decoder),
                d,
                3,
                ConvGeom::same(3, 1),
                true,
                rng,
            ),
            Conv::new(store, "meta.decoder.1", group, d, d, 3, ConvGeom::same(3, 1), true, rng),
        ];
        // Near-zero head: every seed starts close to p = 0.5 instead of a
        // random, possibly confident, foreground guess.
        let head = Conv::new(store, "meta.head", group, d, 2, 1, ConvGeom::UNIT, true, rng);
        store.get_mut(head.weight).data_mut().iter_mut().for_each(|w| *w *= HEAD_INIT_SCALE);
        Ok(MetaLearner {
            config,
            reduce,
            aspp,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    /// Concatenates aligned block-2 and block-3 features and projects them
    /// to the prototype width.
    pub fn reduce_features(&self, g: &mut Graph<'_>, b2: Var, b3: Var) -> Result<Var> {
        let (_, h2, w2) = g.value(b2).dims3();
        let (_, h3, w3) = g.value(b3).dims3();
        if (h2, w2) != (h3, w3) {
            return Err(Error::shape(alloc::format!(
                "block 2 ({h2}x{w2}) and block 3 ({h3}x{w3}) are not aligned"
            )));
        }
        let cat = g.concat(&[b2, b3])?;
        let y = self.reduce.forward(g, cat)?;
        Ok(g.relu(y))
    }

    pub fn prototype(&self, g: &mut Graph<'_>, support_features: Var, mask: &MaskWeights) -> Result<Var> {
        g.masked_avg_pool(support_features, mask.weights.clone(), self.config.map_eps)
    }

    /// Foreground/background probabilities `2 x out_h x out_w`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        prototype: Var,
        query_features: Var,
        prior: Option<Var>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (_, h, w) = g.value(query_features).dims3();
        let prior = if self.config.use_prior {
            Some(prior.ok_or_else(|| Error::shape("prior map required by this configuration"))?)
        } else {
            None
        };
        let expanded = g.broadcast(prototype, h, w)?;
        let mut guidance = alloc::vec![query_features, expanded];
        if self.config.prior_wiring == PriorWiring::Guidance {
            guidance.extend(prior);
        }
        let cat = g.concat(&guidance)?;
        let mut x = self.aspp.forward(g, cat)?;
        if self.config.prior_wiring == PriorWiring::Decoder {
            if let Some(p) = prior {
                x = g.concat(&[x, p])?;
            }
        }
        for conv in &self.decoder {
            let y = conv.forward(g, x)?;
            x = g.relu(y);
        }
        let logits = self.head.forward(g, x)?;
        let up = g.resize_bilinear(logits, out_h, out_w);
        Ok(g.softmax_channels(up))
    }
}

/// Mean binary cross-entropy of the foreground channel.
pub fn meta_loss(g: &mut Graph<'_>, probs: Var, gt: &LabelMap) -> Result<Var> {
    if !gt.is_binary() {
        return Err(Error::LabelOutOfRange {
            label: usize::from(gt.as_slice().iter().copied().max().unwrap_or(0)),
            max: 1,
        });
    }
    let fg = g.channel(probs, 1);
    g.bce(fg, gt.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(use_prior: bool, wiring: PriorWiring) -> MetaConfig {
        MetaConfig {
            reduce_dim: 6,
            aspp_channels: 4,
            aspp_dilations: vec![1, 2],
            decoder_channels: 4,
            use_prior,
            prior_wiring: wiring,
            map_eps: 1e-5,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn map_oracle(f: &Tensor, m: &[f64], eps: f64) -> Vec<f64> {
        let (c, h, w) = f.dims3();
        let mut out = vec![0.0; c];
        let mut area = 0.0;
        for y in 0..h {
            for x in 0..w {
                area += m[y * w + x];
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += f.at(ch, y, x) * m[y * w + x];
                }
            }
        }
        out.iter().map(|v| v / (area + eps)).collect()
    }

    #[test]
    fn reduce_shapes_and_weight_sharing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut cfg = small_config(true, PriorWiring::Guidance);
        cfg.reduce_dim = 64;
        let m = MetaLearner::new(cfg, 32, 64, &mut store, &mut rng).unwrap();
        let b2 = random(&[32, 4, 4], &mut rng);
        let b3 = random(&[64, 4, 4], &mut rng);
        let mut g = Graph::inference(&store);
        let (x2, x3) = (g.input_ref(&b2), g.input_ref(&b3));
        let a = m.reduce_features(&mut g, x2, x3).unwrap();
        let b = m.reduce_features(&mut g, x2, x3).unwrap();
        assert_eq!(g.value(a).shape(), &[64, 4, 4]);
        assert_eq!(g.value(a), g.value(b));
        let b3_small = random(&[64, 2, 2], &mut rng);
        let x3s = g.input_ref(&b3_small);
        assert!(m.reduce_features(&mut g, x2, x3s).is_err());
    }

    #[test]
    fn prototype_examples() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let top = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let (v, fallback) = masked_average_pooling(&f, &top, 1e-5).unwrap();
        assert!((v.0[0] - 1.5).abs() < 1e-4 && !fallback);
        assert!((v.0[0] - 3.0 / (2.0 + 1e-5)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(&[3, 4, 4], &mut rng);
        let full = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        let (v, _) = masked_average_pooling(&f, &full, 1e-5).unwrap();
        for ch in 0..3 {
            let mean = f.channel(ch).iter().sum::<f64>() / 16.0;
            assert!((v.0[ch] - mean).abs() < 1e-5);
        }
        let mut one = LabelMap::zeros(4, 4);
        one.set(2, 1, 1);
        let (v, _) = masked_average_pooling(&f, &one, 1e-5).unwrap();
        for ch in 0..3 {
            assert!((v.0[ch] - f.at(ch, 2, 1)).abs() <= 1e-4 * f.at(ch, 2, 1).abs());
        }
    }

    #[test]
    fn tiny_mask_falls_back_to_strongest_cell() {
        let mut mask = LabelMap::zeros(32, 32);
        mask.set(9, 9, 1);
        let m = support_mask_weights(&mask, 4, 4).unwrap();
        assert!(m.fallback);
        assert_eq!(m.weights.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(support_mask_weights(&LabelMap::zeros(8, 8), 4, 4), Err(Error::EmptyMask));
    }

    #[test]
    fn prior_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random(&[4, 3, 3], &mut rng);
        let full = LabelMap::new(3, 3, vec![1; 9]).unwrap();
        assert_eq!(prior_map(&f, &f, &full).unwrap(), Tensor::zeros(&[1, 3, 3]));
        let half = LabelMap::new(3, 3, vec![1, 1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let p = prior_map(&f, &f, &half).unwrap();
        let max = p.data().iter().copied().fold(0.0, f64::max);
        let min = p.data().iter().copied().fold(1.0, f64::min);
        assert!((max - 1.0).abs() < 1e-12 && min == 0.0);
        assert!(p.data()[..4].iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let s = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let q = Tensor::from_vec(&[2, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let one = LabelMap::new(1, 1, vec![1]).unwrap();
        assert_eq!(prior_map(&s, &q, &one).unwrap().data(), &[0.0, 0.0]);

        let mut two = vec![0.2, 0.8];
        min_max_normalize(&mut two);
        assert_eq!(two, vec![0.0, 1.0]);

        assert_eq!(prior_map(&f, &f, &LabelMap::zeros(3, 3)).unwrap(), Tensor::zeros(&[1, 3, 3]));
    }

    #[test]
    fn forward_is_softmax_and_prior_wiring_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (use_prior, wiring) in [
            (false, PriorWiring::Guidance),
            (true, PriorWiring::Guidance),
            (true, PriorWiring::Decoder),
        ] {
            let mut store = ParamStore::new();
            let m = MetaLearner::new(small_config(use_prior, wiring), 3, 3, &mut store, &mut rng).unwrap();
            let proto = random(&[6, 1, 1], &mut rng);
            let fq = random(&[6, 4, 4], &mut rng);
            let prior = Tensor::full(&[1, 4, 4], 0.5);
            let mut g = Graph::inference(&store);
            let (pv, qv, rv) = (g.input_ref(&proto), g.input_ref(&fq), g.input_ref(&prior));
            let p = m.forward(&mut g, pv, qv, Some(rv), 16, 16).unwrap();
            let t = g.value(p);
            assert_eq!(t.shape(), &[2, 16, 16]);
            for i in 0..256 {
                assert!((t.data()[i] + t.data()[256 + i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let m = MetaLearner::new(small_config(true, PriorWiring::Guidance), 3, 3, &mut store, &mut rng).unwrap();
        store.get_mut(m.head.weight).data_mut().fill(0.0);
        let proto = random(&[6, 1, 1], &mut rng);
        let fq = random(&[6, 4, 4], &mut rng);
        let prior = Tensor::zeros(&[1, 4, 4]);
        let mut g = Graph::inference(&store);
        let (pv, qv, rv) = (g.input_ref(&proto), g.input_ref(&fq), g.input_ref(&prior));
        let p = m.forward(&mut g, pv, qv, Some(rv), 8, 8).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    fn loss_of(p1: &[f64], gt: &[u8]) -> Result<f64> {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = p1.len();
        let mut data: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(p1);
        let x = g.input(Tensor::from_vec(&[2, 1, n], data)?);
        let l = meta_loss(&mut g, x, &LabelMap::new(1, n, gt.to_vec())?)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn meta_loss_values() {
        assert!(loss_of(&[1.0, 0.0], &[1, 0]).unwrap() <= 1e-6);
        assert!((loss_of(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap() - libm::log(2.0)).abs() < 1e-12);
        assert!((loss_of(&[0.25], &[1]).unwrap() - libm::log(4.0)).abs() < 1e-12);
        assert!(loss_of(&[0.5], &[2]).is_err());
    }

    proptest! {
        #[test]
        fn prototype_matches_loop_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&[3, 5, 4], &mut rng);
            let cells: Vec<u8> = (0..20).map(|_| u8::from(rng.random_bool(0.4))).collect();
            prop_assume!(cells.contains(&1));
            let mask = LabelMap::new(5, 4, cells.clone()).unwrap();
            let (v, _) = masked_average_pooling(&f, &mask, 1e-5).unwrap();
            let m: Vec<f64> = cells.iter().map(|&c| f64::from(c)).collect();
            for (a, b) in v.0.iter().zip(map_oracle(&f, &m, 1e-5)) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
            }
        }

        #[test]
        fn prototype_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&[2, 1, 12], &mut rng);
            let cells: Vec<u8> = (0..12).map(|_| u8::from(rng.random_bool(0.5))).collect();
            prop_assume!(cells.contains(&1));
            let perm = rand::seq::index::sample(&mut rng, 12, 12).into_vec();
            let mut pf = Tensor::zeros(&[2, 1, 12]);
            let mut pm = vec![0u8; 12];
            for (dst, &src) in perm.iter().enumerate() {
                pm[dst] = cells[src];
                for ch in 0..2 {
                    pf.data_mut()[ch * 12 + dst] = f.data()[ch * 12 + src];
                }
            }
            let (a, _) = masked_average_pooling(&f, &LabelMap::new(1, 12, cells).unwrap(), 1e-5).unwrap();
            let (b, _) = masked_average_pooling(&pf, &LabelMap::new(1, 12, pm).unwrap(), 1e-5).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn prior_spans_unit_interval(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(&[3, 3, 3], &mut rng);
            let q = random(&[3, 3, 3], &mut rng);
            let mask = LabelMap::new(3, 3, (0..9).map(|i| u8::from(i % 2 == 0)).collect()).unwrap();
            let p = prior_map(&s, &q, &mask).unwrap();
            let max = p.data().iter().copied().fold(f64::MIN, f64::max);
            let min = p.data().iter().copied().fold(f64::MAX, f64::min);
            prop_assert!(min == 0.0);
            prop_assert!(max == 1.0 || max == 0.0);
        }
    }
}
