//! Gram-signature scene difference, the learner ensemble and K-shot
//! support weighting.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::graph::{self, ConvGeom, Graph, Var};
use crate::meta_learner::{meta_loss, Prototype};
use crate::nn::Conv;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Encoder block whose output feeds the Gram signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tap {
    B1,
    B2,
    B3,
    B4,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::B1, Tap::B2, Tap::B3, Tap::B4];

    /// One-based block number.
    pub fn block(self) -> usize {
        match self {
            Tap::B1 => 1,
            Tap::B2 => 2,
            Tap::B3 => 3,
            Tap::B4 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramNorm {
    /// Divide by the number of spatial positions.
    PerPixel,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSignature {
    pub tap: Tap,
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub data: Vec<f64>,
}

/// `A A^T` of the `C x N` reshaped feature map.
pub fn gram_matrix(features: &Tensor, tap: Tap, norm: GramNorm) -> GramSignature {
    let (c, h, w) = features.dims3();
    let n = h * w;
    let mut data = alloc::vec![0.0; c * c];
    gemm(c, n, c, features.data(), false, features.data(), true, &mut data, 0.0);
    if norm == GramNorm::PerPixel && n > 0 {
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
    }
    GramSignature { tap, dim: c, data }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentFactor {
    pub psi: f64,
    pub tap: Tap,
}

/// Frobenius norm of the difference of two signatures.
pub fn adjustment_factor(support: &GramSignature, query: &GramSignature) -> Result<AdjustmentFactor> {
    if support.dim != query.dim || support.tap != query.tap {
        return Err(Error::shape(alloc::format!(
            "gram signatures of {}x{} ({:?}) and {}x{} ({:?})",
            support.dim,
            support.dim,
            support.tap,
            query.dim,
            query.dim,
            query.tap
        )));
    }
    let sq: f64 = support.data.iter().zip(&query.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(AdjustmentFactor {
        psi: libm::sqrt(sq),
        tap: support.tap,
    })
}

/// `psi / (psi + median)`, in `[0, 1)` for non-negative inputs.
pub fn squash_psi(psi: f64, median: f64) -> f64 {
    graph::squash(psi, median)
}

/// Running median of observed factors over a bounded window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PsiStats {
    window: Vec<f64>,
    next: usize,
}

impl PsiStats {
    pub const WINDOW: usize = 4096;

    pub fn push(&mut self, psi: f64) {
        if !psi.is_finite() {
            return;
        }
        if self.window.len() < Self::WINDOW {
            self.window.push(psi);
        } else {
            self.window[self.next] = psi;
            self.next = (self.next + 1) % Self::WINDOW;
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn median(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let mut v = self.window.clone();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleInit {
    /// Combiner weights `(1, 0)`: first input passes, second is ignored.
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KShotFusion {
    /// Learned support weights over prototypes, priors and factors.
    Reweight,
    /// Uniform average of prototypes, priors and factors.
    FeatureAvg,
    /// One forward per shot, foreground probabilities averaged.
    MaskAvg,
    /// One forward per shot, predicted masks united.
    MaskOr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightScope {
    /// Weights apply to prototypes, priors and factors.
    All,
    /// Weights apply to the factor only; features are averaged.
    PsiOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// False evaluates and trains the meta learner alone.
    pub enabled: bool,
    pub use_psi: bool,
    pub init: EnsembleInit,
    pub gram_tap: Tap,
    pub gram_norm: GramNorm,
    pub kshot_fusion: KShotFusion,
    pub kshot_scope: ReweightScope,
    pub reduction: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            enabled: true,
            use_psi: true,
            init: EnsembleInit::Identity,
            gram_tap: Tap::B2,
            gram_norm: GramNorm::PerPixel,
            kshot_fusion: KShotFusion::Reweight,
            kshot_scope: ReweightScope::All,
            reduction: 1,
        }
    }
}

/// Two 2-to-1 pointwise combiners: one adjusts each meta channel with the
/// factor, the other mixes the adjusted background with base foreground.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub w_psi: Conv,
    pub w_ens: Conv,
    use_psi: bool,
}

impl Ensemble {
    pub fn new<R: Rng + ?Sized>(config: &EnsembleConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut make = |name: &str, store: &mut ParamStore| {
            let conv = Conv::new(store, name, ParamGroup::Ensemble, 2, 1, 1, ConvGeom::UNIT, true, rng);
            if config.init == EnsembleInit::Identity {
                store.get_mut(conv.weight).data_mut().copy_from_slice(&[1.0, 0.0]);
            }
            conv
        };
        let w_psi = make("ensemble.psi", store);
        let w_ens = make("ensemble.merge", store);
        Ensemble {
            w_psi,
            w_ens,
            use_psi: config.use_psi,
        }
    }

    pub fn uses_psi(&self) -> bool {
        self.use_psi
    }

    /// Mixes one meta channel with the broadcast factor map.
    pub fn adjust(&self, g: &mut Graph<'_>, channel: Var, psi_map: Option<Var>) -> Result<Var> {
        match psi_map {
            Some(psi) if self.use_psi => {
                let cat = g.concat(&[channel, psi])?;
                self.w_psi.forward(g, cat)
            }
            _ => Ok(channel),
        }
    }

    /// Final two-channel scores. `psi` is the squashed factor as a
    /// `1 x 1 x 1` node.
    pub fn forward(&self, g: &mut Graph<'_>, meta: Var, base_fg: Var, psi: Option<Var>) -> Result<Var> {
        let (_, h, w) = g.value(meta).dims3();
        let psi_map = match psi {
            Some(p) if self.use_psi => Some(g.broadcast(p, h, w)?),
            _ => None,
        };
        let bg = g.channel(meta, 0);
        let fg = g.channel(meta, 1);
        let bg = self.adjust(g, bg, psi_map)?;
        let fg = self.adjust(g, fg, psi_map)?;
        let cat = g.concat(&[bg, base_fg])?;
        let bg = self.w_ens.forward(g, cat)?;
        g.concat(&[bg, fg])
    }

    pub fn predict(&self, store: &ParamStore, meta: &Tensor, base_fg: &Tensor, psi: Option<f64>) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let m = g.input_ref(meta);
        let b = g.input_ref(base_fg);
        let p = psi.map(|v| g.input(Tensor::from_vec(&[1, 1, 1], alloc::vec![v]).expect("scalar")));
        let out = self.forward(&mut g, m, b, p)?;
        Ok(g.value(out).clone())
    }
}

/// Final loss plus `lambda` times the meta loss. The final term is the
/// binary cross-entropy of the softmax-normalised final scores.
pub fn total_loss(g: &mut Graph<'_>, scores: Var, meta: Var, gt: &LabelMap, lambda: f64) -> Result<Var> {
    let final_term = final_loss(g, scores, gt)?;
    let meta_term = meta_loss(g, meta, gt)?;
    let meta_term = g.scale(meta_term, lambda);
    g.add(final_term, meta_term)
}

pub fn final_loss(g: &mut Graph<'_>, scores: Var, gt: &LabelMap) -> Result<Var> {
    let probs = g.softmax_channels(scores);
    meta_loss(g, probs, gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotWeights {
    pub eta: Vec<f64>,
    pub psi_t: Vec<f64>,
    pub reduction: usize,
}

/// Mixed into the shot softmax so no weight underflows to zero when raw
/// factors spread the logits by more than ~745.
pub const ETA_FLOOR: f64 = 1e-12;

/// `softmax(w2^T relu(w1^T psi_t))` with `w1` stored `K x K/r` and `w2`
/// stored `K/r x K`, both row-major.
pub fn kshot_weights(psi_t: &[f64], w1: &[f64], w2: &[f64], reduction: usize) -> Result<ShotWeights> {
    let k = psi_t.len();
    if k == 0 {
        return Err(Error::config("at least one shot"));
    }
    if reduction == 0 || k % reduction != 0 {
        return Err(Error::ShotReduction {
            shots: k,
            reduction,
        });
    }
    let hidden = k / reduction;
    if w1.len() != k * hidden || w2.len() != hidden * k {
        return Err(Error::shape("shot weighting matrices"));
    }
    let h: Vec<f64> = (0..hidden)
        .map(|j| (0..k).map(|i| w1[i * hidden + j] * psi_t[i]).sum::<f64>().max(0.0))
        .collect();
    let z: Vec<f64> = (0..k).map(|o| (0..hidden).map(|j| w2[j * k + o] * h[j]).sum()).collect();
    let eta = graph::softmax_channels(&Tensor::from_vec(&[k, 1, 1], z)?)
        .into_data()
        .into_iter()
        .map(|e| (e + ETA_FLOOR) / (1.0 + k as f64 * ETA_FLOOR))
        .collect();
    Ok(ShotWeights {
        eta,
        psi_t: psi_t.to_vec(),
        reduction,
    })
}

/// Learnable shot weighting. `w1` starts as the identity, `w2` at zero.
#[derive(Clone, Debug)]
pub struct KShotNet {
    pub shots: usize,
    pub reduction: usize,
    /// Conv weight `K/r x K x 1 x 1`, i.e. `w1` transposed.
    pub w1: ParamId,
    /// Conv weight `K x K/r x 1 x 1`, i.e. `w2` transposed.
    pub w2: ParamId,
}

impl KShotNet {
    pub fn new(shots: usize, reduction: usize, store: &mut ParamStore) -> Result<Self> {
        if shots == 0 || reduction == 0 || shots % reduction != 0 {
            return Err(Error::ShotReduction { shots, reduction });
        }
        let hidden = shots / reduction;
        let mut w1 = Tensor::zeros(&[hidden, shots, 1, 1]);
        for j in 0..hidden {
            w1.data_mut()[j * shots + j] = 1.0;
        }
        let w1 = store.add("kshot.w1", ParamGroup::Ensemble, w1);
        let w2 = store.add("kshot.w2", ParamGroup::Ensemble, Tensor::zeros(&[shots, hidden, 1, 1]));
        Ok(KShotNet {
            shots,
            reduction,
            w1,
            w2,
        })
    }

    /// `psi_t` is a `K x 1 x 1` node; returns `eta` with the same shape.
    pub fn forward(&self, g: &mut Graph<'_>, psi_t: Var) -> Result<Var> {
        let w1 = g.param(self.w1);
        let w2 = g.param(self.w2);
        let h = g.conv2d(psi_t, w1, None, ConvGeom::UNIT)?;
        let h = g.relu(h);
        let z = g.conv2d(h, w2, None, ConvGeom::UNIT)?;
        let eta = g.softmax_channels(z);
        let floor = g.input(Tensor::full(&[self.shots, 1, 1], ETA_FLOOR));
        let eta = g.add(eta, floor)?;
        Ok(g.scale(eta, 1.0 / (1.0 + self.shots as f64 * ETA_FLOOR)))
    }

    /// Row-major `w1` (`K x K/r`) and `w2` (`K/r x K`).
    pub fn matrices(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let k = self.shots;
        let hidden = k / self.reduction;
        let c1 = store.get(self.w1).data();
        let c2 = store.get(self.w2).data();
        let w1 = (0..k * hidden).map(|idx| c1[(idx % hidden) * k + idx / hidden]).collect();
        let w2 = (0..hidden * k).map(|idx| c2[(idx % k) * hidden + idx / k]).collect();
        (w1, w2)
    }

    pub fn weights(&self, store: &ParamStore, psi_t: &[f64]) -> Result<ShotWeights> {
        let (w1, w2) = self.matrices(store);
        kshot_weights(psi_t, &w1, &w2, self.reduction)
    }
}

/// Convex combination of per-shot prototypes, priors and factors.
pub fn kshot_combine(
    prototypes: &[Prototype],
    priors: &[Tensor],
    psis: &[f64],
    eta: &[f64],
) -> Result<(Prototype, Option<Tensor>, f64)> {
    let k = eta.len();
    if prototypes.len() != k || psis.len() != k || !(priors.is_empty() || priors.len() == k) || k == 0 {
        return Err(Error::shape("one prototype, factor and optional prior per shot"));
    }
    let dim = prototypes[0].0.len();
    let mut proto = alloc::vec![0.0; dim];
    for (p, &e) in prototypes.iter().zip(eta) {
        if p.0.len() != dim {
            return Err(Error::shape("prototype widths differ"));
        }
        for (o, v) in proto.iter_mut().zip(&p.0) {
            *o += e * v;
        }
    }
    let prior = if priors.is_empty() {
        None
    } else {
        let mut acc = Tensor::zeros(priors[0].shape());
        for (p, &e) in priors.iter().zip(eta) {
            if p.shape() != acc.shape() {
                return Err(Error::shape("prior sizes differ"));
            }
            for (o, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *o += e * v;
            }
        }
        Some(acc)
    };
    let psi = psis.iter().zip(eta).map(|(p, e)| p * e).sum();
    Ok((Prototype(proto), prior, psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gram_oracle(f: &Tensor) -> Vec<f64> {
        let (c, h, w) = f.dims3();
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                for p in 0..h * w {
                    g[i * c + j] += f.data()[i * h * w + p] * f.data()[j * h * w + p];
                }
            }
        }
        g
    }

    fn sig(v: f64) -> GramSignature {
        GramSignature {
            tap: Tap::B2,
            dim: 1,
            data: vec![v],
        }
    }

    #[test]
    fn gram_examples() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gram_matrix(&f, Tap::B2, GramNorm::Raw).data, vec![30.0]);
        assert_eq!(gram_matrix(&f, Tap::B2, GramNorm::PerPixel).data, vec![7.5]);
        let z = gram_matrix(&Tensor::zeros(&[3, 2, 2]), Tap::B1, GramNorm::PerPixel);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factor_examples() {
        assert_eq!(adjustment_factor(&sig(7.5), &sig(1.0)).unwrap().psi, 6.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gram_matrix(&random(&[4, 3, 3], &mut rng), Tap::B2, GramNorm::PerPixel);
        assert_eq!(adjustment_factor(&g, &g).unwrap().psi, 0.0);
        let other = GramSignature {
            tap: Tap::B2,
            dim: 2,
            data: vec![0.0; 4],
        };
        assert!(adjustment_factor(&g, &other).is_err());
    }

    #[test]
    fn running_median() {
        let mut s = PsiStats::default();
        assert_eq!(s.median(), None);
        for v in [5.0, 1.0, 3.0] {
            s.push(v);
        }
        assert_eq!(s.median(), Some(3.0));
        s.push(7.0);
        assert_eq!(s.median(), Some(4.0));
        assert_eq!(squash_psi(1.0, 1.0), 0.5);
        assert_eq!(squash_psi(0.0, 0.0), 0.0);
    }

    fn ensemble(init: EnsembleInit, seed: u64) -> (ParamStore, Ensemble) {
        let mut store = ParamStore::new();
        let cfg = EnsembleConfig {
            init,
            ..EnsembleConfig::default()
        };
        let e = Ensemble::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, e)
    }

    fn meta_probs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        graph::softmax_channels(&random(&[2, h, w], rng))
    }

    #[test]
    fn identity_init_passes_meta_through() {
        let (store, e) = ensemble(EnsembleInit::Identity, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let pm = meta_probs(&mut rng, 3, 4);
            let pb = Tensor::from_vec(&[1, 3, 4], (0..12).map(|_| rng.random()).collect()).unwrap();
            let psi = rng.random_range(0.0..1.0);
            let out = e.predict(&store, &pm, &pb, Some(psi)).unwrap();
            assert!(out.max_abs_diff(&pm) <= 1e-7);
        }
    }

    #[test]
    fn combiner_arithmetic() {
        let (mut store, e) = ensemble(EnsembleInit::Identity, 0);
        store.get_mut(e.w_psi.weight).data_mut().copy_from_slice(&[1.0, 1.0]);
        let pm = Tensor::from_vec(&[2, 1, 2], vec![0.4, 0.9, 0.6, 0.1]).unwrap();
        let pb = Tensor::zeros(&[1, 1, 2]);
        let out = e.predict(&store, &pm, &pb, Some(0.3)).unwrap();
        for (o, p) in out.data().iter().zip(pm.data()) {
            assert!((o - (p + 0.3)).abs() < 1e-12);
        }

        let (mut store, e) = ensemble(EnsembleInit::Identity, 0);
        store.get_mut(e.w_ens.weight).data_mut().copy_from_slice(&[1.0, 1.0]);
        let pm = Tensor::from_vec(&[2, 1, 1], vec![0.4, 0.6]).unwrap();
        let pb = Tensor::from_vec(&[1, 1, 1], vec![0.5]).unwrap();
        let out = e.predict(&store, &pm, &pb, Some(0.7)).unwrap();
        assert!((out.data()[0] - 0.9).abs() < 1e-12 && (out.data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn random_init_moves_away_from_identity() {
        let (store, e) = ensemble(EnsembleInit::Random, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pm = meta_probs(&mut rng, 2, 2);
        let pb = Tensor::full(&[1, 2, 2], 0.5);
        assert!(e.predict(&store, &pm, &pb, Some(0.5)).unwrap().max_abs_diff(&pm) > 1e-3);
    }

    #[test]
    fn loss_relations() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pm = meta_probs(&mut rng, 2, 3);
        let scores = random(&[2, 2, 3], &mut rng);
        let gt = LabelMap::new(2, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        let mut g = Graph::new(&store);
        let (s, m) = (g.input_ref(&scores), g.input_ref(&pm));
        let l0 = total_loss(&mut g, s, m, &gt, 0.0).unwrap();
        let lf = final_loss(&mut g, s, &gt).unwrap();
        let lm = meta_loss(&mut g, m, &gt).unwrap();
        let l1 = total_loss(&mut g, s, m, &gt, 1.0).unwrap();
        assert_eq!(g.value(l0).item(), g.value(lf).item());
        assert!((g.value(l1).item() - g.value(lf).item() - g.value(lm).item()).abs() < 1e-12);
        // With identity combiners the scores equal the meta probabilities,
        // so the final term is the meta loss after one more softmax.
        let lf_init = final_loss(&mut g, m, &gt).unwrap();
        let l_init = total_loss(&mut g, m, m, &gt, 1.0).unwrap();
        let expected = g.value(lf_init).item() + g.value(lm).item();
        assert!((g.value(l_init).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kshot_examples() {
        let mut store = ParamStore::new();
        let net = KShotNet::new(5, 1, &mut store).unwrap();
        let w = net.weights(&store, &[1.0, 9.0, 0.2, 4.0, 3.0]).unwrap();
        assert!(w.eta.iter().all(|&e| (e - 0.2).abs() < 1e-15));
        let one = kshot_weights(&[3.0], &[1.0], &[0.7], 1).unwrap();
        assert_eq!(one.eta, vec![1.0]);
        assert_eq!(
            kshot_weights(&[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 3], 2),
            Err(Error::ShotReduction {
                shots: 3,
                reduction: 2
            })
        );
    }

    #[test]
    fn kshot_net_matches_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = KShotNet::new(4, 2, &mut store).unwrap();
        let w1 = random(&[2, 4, 1, 1], &mut rng);
        let w2 = random(&[4, 2, 1, 1], &mut rng);
        *store.get_mut(net.w1) = w1;
        *store.get_mut(net.w2) = w2;
        let psi = [0.3, 1.2, 0.8, 2.0];
        let expected = net.weights(&store, &psi).unwrap();
        let mut g = Graph::inference(&store);
        let p = g.input(Tensor::from_vec(&[4, 1, 1], psi.to_vec()).unwrap());
        let eta = net.forward(&mut g, p).unwrap();
        for (a, b) in g.value(eta).data().iter().zip(&expected.eta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_examples() {
        let protos = vec![Prototype(vec![1.0, 2.0]), Prototype(vec![3.0, 6.0])];
        let priors = vec![Tensor::full(&[1, 2, 2], 0.2), Tensor::full(&[1, 2, 2], 0.6)];
        let (_, _, psi) = kshot_combine(&protos, &priors, &[4.0, 8.0], &[0.25, 0.75]).unwrap();
        assert_eq!(psi, 7.0);
        let (p, prior, psi) = kshot_combine(&protos, &priors, &[4.0, 8.0], &[0.0, 1.0]).unwrap();
        assert_eq!((p, prior.unwrap(), psi), (protos[1].clone(), priors[1].clone(), 8.0));
        let same = vec![protos[0].clone(); 3];
        let (p, none, psi) = kshot_combine(&same, &[], &[2.0; 3], &[0.2, 0.3, 0.5]).unwrap();
        assert!(none.is_none() && (psi - 2.0).abs() < 1e-15);
        for (a, b) in p.0.iter().zip(&protos[0].0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn gram_matches_loop_oracle_and_is_psd(seed in 0u64..400, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&[c, 3, 4], &mut rng);
            let raw = gram_matrix(&f, Tap::B3, GramNorm::Raw);
            let oracle = gram_oracle(&f);
            for (a, b) in raw.data.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-9));
            }
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((raw.data[i * c + j] - raw.data[j * c + i]).abs() < 1e-12);
                }
            }
            // x^T G x = |A^T x|^2 >= 0 for random directions.
            for _ in 0..8 {
                let x: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q: f64 = (0..c).map(|i| (0..c).map(|j| x[i] * raw.data[i * c + j] * x[j]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-8);
            }
        }

        #[test]
        fn factor_is_a_metric(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<GramSignature> = (0..3)
                .map(|_| gram_matrix(&random(&[3, 2, 3], &mut rng), Tap::B2, GramNorm::PerPixel))
                .collect();
            let d = |a: &GramSignature, b: &GramSignature| adjustment_factor(a, b).unwrap().psi;
            prop_assert_eq!(d(&gs[0], &gs[0]), 0.0);
            prop_assert_eq!(d(&gs[0], &gs[1]), d(&gs[1], &gs[0]));
            prop_assert!(d(&gs[0], &gs[2]) <= d(&gs[0], &gs[1]) + d(&gs[1], &gs[2]) + 1e-12);
        }

        #[test]
        fn shot_weights_are_a_distribution(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
            let w1: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w2: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = kshot_weights(&psi, &w1, &w2, 1).unwrap();
            prop_assert!((w.eta.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(w.eta.iter().all(|&e| e > 0.0));
            let uniform = kshot_weights(&psi, &w1, &[0.0; 25], 1).unwrap();
            prop_assert!(uniform.eta.iter().all(|&e| (e - 0.2).abs() < 1e-15));
        }
    }
}
