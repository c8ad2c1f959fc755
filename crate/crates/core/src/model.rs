//! The complete two-learner model and its per-episode forward pass.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_learner::{aggregate_base_foreground, base_argmax_mask, BaseConfig, BaseLearner};
use crate::data::{BaseIdTable, ClassId, LabelMap, RgbImage};
use crate::encoder::{Encoder, EncoderConfig};
use crate::ensemble::{
    adjustment_factor, gram_matrix, Ensemble, EnsembleConfig, GramSignature, KShotFusion, KShotNet, ReweightScope,
};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::meta_learner::{prior_map, support_mask_weights, MetaConfig, MetaLearner};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BamConfig {
    pub encoder: EncoderConfig,
    pub base: BaseConfig,
    pub meta: MetaConfig,
    pub ensemble: EnsembleConfig,
    /// Shot count the learnable support weighting is built for.
    pub shots: usize,
    pub init_seed: u64,
}

impl BamConfig {
    /// Small widths suited to 32-64 pixel synthetic scenes.
    pub fn desk(num_base: usize) -> Self {
        BamConfig {
            encoder: EncoderConfig {
                widths: [8, 16, 16, 32],
                strides: [2, 2, 1, 1],
                norm_groups: 4,
                frozen: false,
            },
            base: BaseConfig {
                num_base,
                head_channels: 16,
                ppm_bins: alloc::vec![1, 2, 3, 6],
                norm_groups: 4,
            },
            meta: MetaConfig {
                reduce_dim: 16,
                aspp_channels: 16,
                aspp_dilations: alloc::vec![1, 2, 4],
                decoder_channels: 16,
                ..MetaConfig::default()
            },
            ensemble: EnsembleConfig::default(),
            shots: 1,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.strides[2] != 1 {
            return Err(Error::config(
                "block 3 must keep block 2's resolution (stride 1) so their features can be concatenated",
            ));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.ensemble.reduction == 0 || self.shots % self.ensemble.reduction != 0 {
            return Err(Error::ShotReduction {
                shots: self.shots,
                reduction: self.ensemble.reduction,
            });
        }
        Ok(())
    }
}

/// Everything the frozen encoder and base learner say about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub height: usize,
    pub width: usize,
    pub b2: Tensor,
    pub b3: Tensor,
    pub b4: Tensor,
    pub gram: GramSignature,
    pub base_probs: Tensor,
    pub base_fg: Tensor,
}

impl ImageFeatures {
    pub fn base_mask(&self) -> LabelMap {
        base_argmax_mask(&self.base_probs)
    }
}

/// How the per-shot quantities are combined into one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum ShotWeighting {
    /// Learned weights when the model was built for this shot count,
    /// uniform otherwise.
    Learned,
    Uniform,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeVars {
    pub meta: Var,
    pub scores: Var,
    pub eta: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EpisodeInfo {
    pub psi: Vec<f64>,
    pub fallback: bool,
}

/// Untracked outputs of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    /// Meta learner probabilities, `2 x H x W`.
    pub meta: Tensor,
    /// Final scores, `2 x H x W`; equal to `meta` without the ensemble.
    pub scores: Tensor,
    /// Normalised foreground probability of the final output, `1 x H x W`.
    pub fg_prob: Tensor,
    pub mask: LabelMap,
    pub meta_mask: LabelMap,
    pub psi: Vec<f64>,
    pub eta: Vec<f64>,
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct BamModel {
    pub config: BamConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub base: BaseLearner,
    pub meta: MetaLearner,
    pub ensemble: Ensemble,
    pub kshot: Option<KShotNet>,
    pub base_table: BaseIdTable,
    /// Median of training factors, the scale of the squash.
    pub psi_median: f64,
}

impl BamModel {
    pub fn new(config: BamConfig, base_table: BaseIdTable) -> Result<Self> {
        config.validate()?;
        if base_table.len() != config.base.num_base {
            return Err(Error::config(alloc::format!(
                "class table lists {} base classes, head predicts {}",
                base_table.len(),
                config.base.num_base
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let [_, w2, w3, w4] = config.encoder.widths;
        let base = BaseLearner::new(config.base.clone(), w4, &mut store, &mut rng)?;
        let meta = MetaLearner::new(config.meta.clone(), w2, w3, &mut store, &mut rng)?;
        let ensemble = Ensemble::new(&config.ensemble, &mut store, &mut rng);
        let kshot = if config.shots > 1 {
            Some(KShotNet::new(config.shots, config.ensemble.reduction, &mut store)?)
        } else {
            None
        };
        Ok(BamModel {
            config,
            store,
            encoder,
            base,
            meta,
            ensemble,
            kshot,
            base_table,
            psi_median: 1.0,
        })
    }

    /// A fresh meta learner and ensemble built from `config`, on top of the
    /// encoder and base learner of `stage1` (whose architecture wins).
    pub fn from_stage1(mut config: BamConfig, stage1: &BamModel) -> Result<Self> {
        config.encoder = stage1.config.encoder.clone();
        config.base = stage1.config.base.clone();
        let mut model = BamModel::new(config, stage1.base_table.clone())?;
        for (_, name, group, t) in stage1.store.iter() {
            if matches!(group, ParamGroup::Encoder | ParamGroup::Base) {
                model.store.load(name, t.clone())?;
            }
        }
        model.psi_median = stage1.psi_median;
        Ok(model)
    }

    /// Freezes exactly the listed groups and unfreezes the rest.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for g in ParamGroup::ALL {
            self.store.set_frozen(g, !groups.contains(&g));
        }
        self.encoder.set_frozen(&mut self.store, !groups.contains(&ParamGroup::Encoder));
    }

    pub fn image_features(&self, image: &RgbImage) -> Result<ImageFeatures> {
        let t = image.to_tensor();
        let (h, w) = (image.height(), image.width());
        let f = self.encoder.encode(&self.store, &t)?;
        let e = &self.config.ensemble;
        let gram = gram_matrix(f.tap(e.gram_tap.block()), e.gram_tap, e.gram_norm);
        let base_probs = self.base.predict(&self.store, &f.b4, h, w)?;
        let base_fg = aggregate_base_foreground(&base_probs);
        Ok(ImageFeatures {
            height: h,
            width: w,
            b2: f.b2,
            b3: f.b3,
            b4: f.b4,
            gram,
            base_probs,
            base_fg,
        })
    }

    pub fn psi(&self, support: &ImageFeatures, query: &ImageFeatures) -> Result<f64> {
        Ok(adjustment_factor(&support.gram, &query.gram)?.psi)
    }

    /// Builds the episode in `g`. Supports and query come from the frozen
    /// feature cache; meta learner and ensemble run on the tape.
    ///
    /// `target` names the episode class when it is itself a base class
    /// (training episodes); its channel is then left out of the base
    /// foreground so the target is not reported as a distractor.
    pub fn forward_episode<'s>(
        &self,
        g: &mut Graph<'s>,
        shots: &[(&'s ImageFeatures, &LabelMap)],
        query: &'s ImageFeatures,
        weighting: ShotWeighting,
        target: Option<ClassId>,
    ) -> Result<(EpisodeVars, EpisodeInfo)> {
        let k = shots.len();
        if k == 0 {
            return Err(Error::config("an episode needs at least one support shot"));
        }
        let b2q = g.input_ref(&query.b2);
        let b3q = g.input_ref(&query.b3);
        let fq = self.meta.reduce_features(g, b2q, b3q)?;
        let (_, fh, fw) = g.value(fq).dims3();

        let mut protos = Vec::with_capacity(k);
        let mut priors = Vec::with_capacity(k);
        let mut psis = Vec::with_capacity(k);
        let mut fallback = false;
        for &(feat, mask) in shots {
            if (mask.height(), mask.width()) != (feat.height, feat.width) {
                return Err(Error::shape("support mask size differs from its image"));
            }
            let b2 = g.input_ref(&feat.b2);
            let b3 = g.input_ref(&feat.b3);
            let fs = self.meta.reduce_features(g, b2, b3)?;
            let weights = support_mask_weights(mask, fh, fw)?;
            fallback |= weights.fallback;
            protos.push(self.meta.prototype(g, fs, &weights)?);
            if self.meta.config().use_prior {
                let p = prior_map(&feat.b4, &query.b4, mask)?;
                let p = if p.shape()[1..] != [fh, fw] {
                    let v = g.input(p);
                    g.resize_bilinear(v, fh, fw)
                } else {
                    g.input(p)
                };
                priors.push(p);
            }
            psis.push(self.psi(feat, query)?);
        }

        let uniform = g.input(Tensor::full(&[k, 1, 1], 1.0 / k as f64));
        let eta = match (&weighting, &self.kshot) {
            (ShotWeighting::Learned, Some(net)) if net.shots == k && self.config.ensemble.kshot_fusion == KShotFusion::Reweight => {
                let psi_t = g.input(Tensor::from_vec(&[k, 1, 1], psis.clone())?);
                Some(net.forward(g, psi_t)?)
            }
            _ => None,
        };
        let psi_weights = eta.unwrap_or(uniform);
        let feature_weights = match self.config.ensemble.kshot_scope {
            ReweightScope::All => psi_weights,
            ReweightScope::PsiOnly => uniform,
        };
        let proto = g.weighted_sum(&protos, feature_weights)?;
        let prior = if priors.is_empty() {
            None
        } else {
            Some(g.weighted_sum(&priors, feature_weights)?)
        };
        let meta = self.meta.forward(g, proto, fq, prior, query.height, query.width)?;

        let scores = if self.config.ensemble.enabled {
            let psi_leaves: Vec<Var> = psis.iter().map(|&p| g.input(Tensor::full(&[1, 1, 1], p))).collect();
            let psi = g.weighted_sum(&psi_leaves, psi_weights)?;
            let psi = g.squash(psi, self.psi_median);
            let base_fg = match target.and_then(|c| self.base_table.dense_of(c)) {
                Some(d) => {
                    let mut fg = query.base_fg.clone();
                    for (v, p) in fg.data_mut().iter_mut().zip(query.base_probs.channel(usize::from(d))) {
                        *v = (*v - p).max(0.0);
                    }
                    g.input(fg)
                }
                None => g.input_ref(&query.base_fg),
            };
            self.ensemble.forward(g, meta, base_fg, Some(psi))?
        } else {
            meta
        };
        Ok((EpisodeVars { meta, scores, eta }, EpisodeInfo { psi: psis, fallback }))
    }

    /// Untracked episode prediction under the configured K-shot fusion.
    pub fn predict(&self, shots: &[(&ImageFeatures, &LabelMap)], query: &ImageFeatures) -> Result<EpisodePrediction> {
        match self.config.ensemble.kshot_fusion {
            KShotFusion::Reweight => self.predict_joint(shots, query, ShotWeighting::Learned),
            KShotFusion::FeatureAvg => self.predict_joint(shots, query, ShotWeighting::Uniform),
            KShotFusion::MaskAvg | KShotFusion::MaskOr => self.predict_per_shot(shots, query),
        }
    }

    pub fn predict_joint(
        &self,
        shots: &[(&ImageFeatures, &LabelMap)],
        query: &ImageFeatures,
        weighting: ShotWeighting,
    ) -> Result<EpisodePrediction> {
        let mut g = Graph::inference(&self.store);
        let (vars, info) = self.forward_episode(&mut g, shots, query, weighting, None)?;
        let k = shots.len();
        let eta = vars.eta.map_or_else(|| alloc::vec![1.0 / k as f64; k], |e| g.value(e).data().to_vec());
        let meta = g.value(vars.meta).clone();
        let scores = g.value(vars.scores).clone();
        Ok(self.finish(meta, scores, info.psi, eta, info.fallback))
    }

    fn predict_per_shot(&self, shots: &[(&ImageFeatures, &LabelMap)], query: &ImageFeatures) -> Result<EpisodePrediction> {
        let singles = shots
            .iter()
            .map(|s| self.predict_joint(core::slice::from_ref(s), query, ShotWeighting::Uniform))
            .collect::<Result<Vec<_>>>()?;
        let k = singles.len() as f64;
        let mut meta = Tensor::zeros(singles[0].meta.shape());
        let mut scores = Tensor::zeros(singles[0].scores.shape());
        for s in &singles {
            for (m, v) in meta.data_mut().iter_mut().zip(s.meta.data()) {
                *m += v / k;
            }
            for (m, v) in scores.data_mut().iter_mut().zip(s.scores.data()) {
                *m += v / k;
            }
        }
        let psi = singles.iter().map(|s| s.psi[0]).collect();
        let fallback = singles.iter().any(|s| s.fallback);
        let mut out = self.finish(meta, scores, psi, alloc::vec![1.0 / k; singles.len()], fallback);
        match self.config.ensemble.kshot_fusion {
            KShotFusion::MaskOr => {
                let union = |pick: fn(&EpisodePrediction) -> &LabelMap| {
                    let mut m = pick(&singles[0]).clone();
                    for s in &singles[1..] {
                        for (a, b) in m.as_mut_slice().iter_mut().zip(pick(s).as_slice()) {
                            *a |= b;
                        }
                    }
                    m
                };
                out.mask = union(|s| &s.mask);
                out.meta_mask = union(|s| &s.meta_mask);
            }
            _ => {
                let fg: Vec<f64> = (0..singles.len())
                    .map(|i| singles[i].fg_prob.data().to_vec())
                    .fold(alloc::vec![0.0; out.fg_prob.len()], |acc, v| {
                        acc.iter().zip(&v).map(|(a, b)| a + b / k).collect()
                    });
                out.fg_prob = Tensor::from_vec(out.fg_prob.shape(), fg)?;
                out.mask = threshold_half(&out.fg_prob);
                out.meta_mask = argmax2(&out.meta);
            }
        }
        Ok(out)
    }

    fn finish(&self, meta: Tensor, scores: Tensor, psi: Vec<f64>, eta: Vec<f64>, fallback: bool) -> EpisodePrediction {
        let fg_prob = if self.config.ensemble.enabled {
            foreground(&graph::softmax_channels(&scores))
        } else {
            foreground(&meta)
        };
        EpisodePrediction {
            mask: argmax2(&scores),
            meta_mask: argmax2(&meta),
            meta,
            scores,
            fg_prob,
            psi,
            eta,
            fallback,
        }
    }
}

fn foreground(probs: &Tensor) -> Tensor {
    let (_, h, w) = probs.dims3();
    Tensor::from_vec(&[1, h, w], probs.channel(1).to_vec()).expect("one channel")
}

/// Binary argmax of a two-channel map; ties go to background.
pub fn argmax2(t: &Tensor) -> LabelMap {
    let (_, h, w) = t.dims3();
    let data = t.channel(0).iter().zip(t.channel(1)).map(|(b, f)| u8::from(f > b)).collect();
    LabelMap::new(h, w, data).expect("h * w labels")
}

fn threshold_half(fg: &Tensor) -> LabelMap {
    let (_, h, w) = fg.dims3();
    LabelMap::new(h, w, fg.data().iter().map(|&p| u8::from(p > 0.5)).collect()).expect("h * w labels")
}
