//! Two-stage training: supervised base pre-training, then episodic training
//! of the meta learner and ensemble with everything else frozen.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_learner::base_loss;
use crate::data::{augment, remap_for_base_training, sample_episode, ClassSplit, Dataset, Episode, LabelMap};
use crate::ensemble::{total_loss, PsiStats};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::meta_learner::meta_loss;
use crate::model::{BamModel, ImageFeatures, ShotWeighting};
use crate::params::{Gradients, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Images per step in stage 1, episodes per step in stage 2.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub fold: usize,
    pub shots: usize,
    pub lambda: f64,
    /// Training uses the first seed; evaluation runs one trial per seed.
    pub seeds: Vec<u64>,
    /// Stage 2 only: episodes drawn per epoch.
    pub episodes_per_epoch: usize,
    /// Stage 2 only: support/query pairs measured before training to set
    /// the initial scale of the factor squash.
    pub calibration_pairs: usize,
    /// Stage 1 only: random flips and crops.
    pub augment: bool,
    /// Stage 1 only: encoder learning rate as a fraction of `lr`.
    pub encoder_lr_scale: f64,
    /// Stage 2 only: train on the final-output loss and `lambda * L_meta`;
    /// false trains the meta learner on `L_meta` alone.
    pub ensemble_loss: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 20,
            batch_size: 4,
            lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            fold: 0,
            shots: 1,
            lambda: 1.0,
            seeds: alloc::vec![0, 1, 2],
            episodes_per_epoch: 0,
            calibration_pairs: 0,
            augment: true,
            encoder_lr_scale: 1.0,
            ensemble_loss: true,
        }
    }

    /// Stage 1 for a randomly initialised encoder on shapes-world. The
    /// `pretrain` rate suits a pretrained backbone and barely moves one
    /// trained from scratch.
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 5e-2,
            ..TrainConfig::pretrain()
        }
    }

    pub fn meta() -> Self {
        TrainConfig {
            stage: Stage::Meta,
            epochs: 10,
            batch_size: 8,
            lr: 5e-2,
            episodes_per_epoch: 200,
            calibration_pairs: 100,
            augment: false,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(alloc::format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(alloc::format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.encoder_lr_scale) {
            return Err(Error::config("encoder_lr_scale must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0, 1) and weight decay be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.stage == Stage::Meta && self.episodes_per_epoch == 0 {
            return Err(Error::config("stage 2 needs episodes_per_epoch > 0"));
        }
        Ok(())
    }

    pub fn train_seed(&self) -> u64 {
        self.seeds[0]
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step_with(store, grads, |_| lr);
    }

    /// Like [`Sgd::step`] with a learning rate per parameter.
    pub fn step_with(&mut self, store: &mut ParamStore, grads: &Gradients, lr: impl Fn(ParamId) -> f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, grad) in grads.iter() {
            let lr = lr(id);
            let w = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| alloc::vec![0.0; grad.len()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                let d = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}

pub fn poly_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * libm::pow(1.0 - frac.min(1.0), 0.9)
}

/// Images whose masks contain no novel class. Stage 2 trains on these so
/// that novel objects are never shown to the meta learner as background;
/// stage 1 uses every image with novel pixels relabelled background.
pub fn training_subset(dataset: &Dataset, split: &ClassSplit) -> Dataset {
    dataset.subset(&dataset.indices_without(&split.novel_classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean cross-entropy over the training set, before any update.
    pub initial_loss: f64,
    /// Same measurement after the last epoch.
    pub final_loss: f64,
    /// Running mean of the batch losses within each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean base-learner cross-entropy over `dataset` with novel pixels as
/// background.
pub fn base_dataset_loss(model: &BamModel, dataset: &Dataset, split: &ClassSplit) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let target = remap_for_base_training(dataset.mask(i), split);
        let mut g = Graph::inference(&model.store);
        let loss = base_image_loss(model, &mut g, dataset, i, &target, None)?;
        total += g.value(loss).item();
    }
    Ok(total / dataset.len().max(1) as f64)
}

fn base_image_loss<'s>(
    model: &BamModel,
    g: &mut Graph<'s>,
    dataset: &Dataset,
    index: usize,
    target: &LabelMap,
    augmented: Option<&crate::data::RgbImage>,
) -> Result<Var> {
    let image = augmented.unwrap_or_else(|| dataset.image(index));
    let x = g.input(image.to_tensor());
    let [_, _, _, b4] = model.encoder.forward(g, x)?;
    let probs = model.base.forward(g, b4, image.height(), image.width())?;
    base_loss(g, probs, target)
}

/// Stage 1: encoder and base learner trained on base-class labels.
pub fn pretrain_base(model: &mut BamModel, config: &TrainConfig, dataset: &Dataset, split: &ClassSplit) -> Result<PretrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("no training images"));
    }
    model.set_trainable(&[ParamGroup::Encoder, ParamGroup::Base]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train_seed());
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let targets: Vec<LabelMap> = (0..dataset.len())
        .map(|i| remap_for_base_training(dataset.mask(i), split))
        .collect();
    let initial_loss = base_dataset_loss(model, dataset, split)?;

    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::new(model.store.len());
            let mut batch_loss = 0.0;
            for &i in batch {
                let (aug_img, aug_mask) = if config.augment {
                    let (im, m) = augment(dataset.image(i), &targets[i], &mut rng);
                    (Some(im), Some(m))
                } else {
                    (None, None)
                };
                let target = aug_mask.as_ref().unwrap_or(&targets[i]);
                let mut g = Graph::new(&model.store);
                let loss = base_image_loss(model, &mut g, dataset, i, target, aug_img.as_ref())?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        stage: "base pre-training",
                        step,
                        loss: value,
                    });
                }
                batch_loss += value;
                grads.merge(&g.backward(loss));
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    stage: "base pre-training",
                    step,
                    loss: f64::NAN,
                });
            }
            let lr = poly_lr(config.lr, step, total);
            let store = &model.store;
            let scales: Vec<f64> = store
                .ids()
                .map(|id| if store.group(id) == ParamGroup::Encoder { config.encoder_lr_scale } else { 1.0 })
                .collect();
            sgd.step_with(&mut model.store, &grads, |id| lr * scales[id.index()]);
            sum += batch_loss / batch.len() as f64;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    let final_loss = base_dataset_loss(model, dataset, split)?;
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

/// Frozen-path features for every image of a dataset.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub features: Vec<ImageFeatures>,
}

impl FeatureCache {
    pub fn build(model: &BamModel, dataset: &Dataset) -> Result<Self> {
        let features = (0..dataset.len())
            .map(|i| model.image_features(dataset.image(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureCache { features })
    }

    pub fn get(&self, index: usize) -> &ImageFeatures {
        &self.features[index]
    }
}

/// Loss and parameter gradients of one episode.
pub fn episode_gradients(
    model: &BamModel,
    cache: &FeatureCache,
    episode: &Episode,
    lambda: f64,
    ensemble_loss: bool,
) -> Result<(f64, Gradients)> {
    let shots: Vec<(&ImageFeatures, &LabelMap)> = episode
        .support
        .iter()
        .map(|s| (cache.get(s.image_index), &s.mask))
        .collect();
    let query = cache.get(episode.query_index);
    let mut g = Graph::new(&model.store);
    let (vars, _) = model.forward_episode(&mut g, &shots, query, ShotWeighting::Learned, Some(episode.class_id))?;
    let loss = if ensemble_loss && model.config.ensemble.enabled {
        total_loss(&mut g, vars.scores, vars.meta, &episode.query_mask, lambda)?
    } else {
        meta_loss(&mut g, vars.meta, &episode.query_mask)?
    };
    Ok((g.value(loss).item(), g.backward(loss)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainReport {
    /// Mean episode loss of every optimisation step.
    pub step_losses: Vec<f64>,
    pub encoder_hash: (u64, u64),
    pub base_hash: (u64, u64),
    pub psi_median: f64,
}

impl MetaTrainReport {
    pub fn frozen_unchanged(&self) -> bool {
        self.encoder_hash.0 == self.encoder_hash.1 && self.base_hash.0 == self.base_hash.1
    }
}

/// Stage 2: episodes over base classes, encoder and base learner frozen.
/// `dataset` should already exclude images with novel classes.
pub fn meta_train(model: &mut BamModel, config: &TrainConfig, dataset: &Dataset, split: &ClassSplit) -> Result<MetaTrainReport> {
    config.validate()?;
    if config.shots != model.config.shots {
        return Err(Error::config(alloc::format!(
            "model built for {} shots, training asked for {}",
            model.config.shots,
            config.shots
        )));
    }
    model.set_trainable(&[ParamGroup::Meta, ParamGroup::Ensemble]);
    let encoder_before = model.store.fingerprint(ParamGroup::Encoder);
    let base_before = model.store.fingerprint(ParamGroup::Base);

    let cache = FeatureCache::build(model, dataset)?;
    let pool = &split.base_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train_seed());

    let mut stats = PsiStats::default();
    for _ in 0..config.calibration_pairs {
        let ep = sample_episode(dataset, pool, 1, &mut rng)?;
        stats.push(model.psi(cache.get(ep.support[0].image_index), cache.get(ep.query_index))?);
    }
    if let Some(m) = stats.median() {
        model.psi_median = m;
    }

    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let steps_per_epoch = config.episodes_per_epoch.div_ceil(config.batch_size);
    let mut step_losses = Vec::with_capacity(steps_per_epoch * config.epochs);
    for _ in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let step = step_losses.len();
            let mut grads = Gradients::new(model.store.len());
            let mut sum = 0.0;
            for _ in 0..config.batch_size {
                let ep = sample_episode(dataset, pool, config.shots, &mut rng)?;
                let (loss, g) = episode_gradients(model, &cache, &ep, config.lambda, config.ensemble_loss)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        stage: "meta training",
                        step,
                        loss,
                    });
                }
                for s in &ep.support {
                    stats.push(model.psi(cache.get(s.image_index), cache.get(ep.query_index))?);
                }
                sum += loss;
                grads.merge(&g);
            }
            grads.scale(1.0 / config.batch_size as f64);
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    stage: "meta training",
                    step,
                    loss: f64::NAN,
                });
            }
            sgd.step(&mut model.store, &grads, config.lr);
            if let Some(m) = stats.median() {
                model.psi_median = m;
            }
            step_losses.push(sum / config.batch_size as f64);
        }
    }
    Ok(MetaTrainReport {
        step_losses,
        encoder_hash: (encoder_before, model.store.fingerprint(ParamGroup::Encoder)),
        base_hash: (base_before, model.store.fingerprint(ParamGroup::Base)),
        psi_median: model.psi_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes, split_folds, SceneSpec};
    use crate::ensemble::final_loss;
    use crate::model::BamConfig;
    use alloc::vec;

    fn world(n: usize, seed: u64) -> Dataset {
        let spec = SceneSpec::new(32, vec![1, 2, 3, 4, 5, 6], seed);
        let scenes = generate_scenes(&spec, n).unwrap();
        let (images, masks) = scenes.into_iter().map(|s| (s.image, s.mask)).unzip();
        Dataset::new(images, masks, 16).unwrap()
    }

    fn setup(shots: usize) -> (BamModel, Dataset, ClassSplit) {
        setup_with(shots, 24)
    }

    fn setup_with(shots: usize, images: usize) -> (BamModel, Dataset, ClassSplit) {
        let split = split_folds(6, 0, 3).unwrap();
        let mut cfg = BamConfig::desk(split.num_base());
        cfg.shots = shots;
        let model = BamModel::new(cfg, split.base_table()).unwrap();
        (model, training_subset(&world(images, 5), &split), split)
    }

    fn quick_meta(shots: usize) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            episodes_per_epoch: 4,
            calibration_pairs: 8,
            shots,
            ..TrainConfig::meta()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::pretrain().validate().is_ok());
        assert!(TrainConfig::meta().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::pretrain() },
            TrainConfig { lr: -1.0, ..TrainConfig::pretrain() },
            TrainConfig { lambda: -0.5, ..TrainConfig::meta() },
            TrainConfig { shots: 0, ..TrainConfig::meta() },
            TrainConfig { seeds: vec![], ..TrainConfig::meta() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 10), 0.1);
        assert_eq!(poly_lr(0.1, 10, 10), 0.0);
        assert!((poly_lr(1.0, 5, 10) - libm::pow(0.5, 0.9)).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Meta, crate::tensor::Tensor::full(&[1], 2.0));
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &crate::tensor::Tensor::full(&[1], 0.5));
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&mut store, &grads, 0.1);
        // v = 0.5 + 0.1 * 2 = 0.7; w = 2 - 0.07
        assert!((store.get(id).item() - 1.93).abs() < 1e-15);
        sgd.step(&mut store, &grads, 0.1);
        let v = 0.9 * 0.7 + 0.5 + 0.1 * 1.93;
        assert!((store.get(id).item() - (1.93 - 0.1 * v)).abs() < 1e-15);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (mut a, data, split) = setup(1);
        let mut b = a.clone();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::pretrain()
        };
        let ra = pretrain_base(&mut a, &cfg, &data, &split).unwrap();
        let rb = pretrain_base(&mut b, &cfg, &data, &split).unwrap();
        assert_eq!(ra, rb);
        for g in ParamGroup::ALL {
            assert_eq!(a.store.fingerprint(g), b.store.fingerprint(g));
        }
        assert_eq!(a.store.fingerprint(ParamGroup::Meta), setup(1).0.store.fingerprint(ParamGroup::Meta));
    }

    #[test]
    fn meta_training_keeps_frozen_groups() {
        let (mut model, data, split) = setup(1);
        let meta_before = model.store.fingerprint(ParamGroup::Meta);
        let report = meta_train(&mut model, &quick_meta(1), &data, &split).unwrap();
        assert!(report.frozen_unchanged());
        assert_eq!(report.step_losses.len(), 2);
        assert_ne!(model.store.fingerprint(ParamGroup::Meta), meta_before);
        assert!(report.psi_median > 0.0);
    }

    #[test]
    fn five_shot_training_moves_the_shot_weights() {
        let (mut model, data, split) = setup_with(5, 80);
        let kshot = model.kshot.clone().unwrap();
        let w2_before = model.store.get(kshot.w2).clone();
        meta_train(&mut model, &quick_meta(5), &data, &split).unwrap();
        assert!(model.store.get(kshot.w2).max_abs_diff(&w2_before) > 0.0);
    }

    #[test]
    fn shot_count_must_match_model() {
        let (mut model, data, split) = setup(1);
        assert!(meta_train(&mut model, &quick_meta(5), &data, &split).is_err());
    }

    #[test]
    fn step_zero_loss_is_final_plus_lambda_meta() {
        let (mut model, data, split) = setup(1);
        model.set_trainable(&[ParamGroup::Meta, ParamGroup::Ensemble]);
        let cache = FeatureCache::build(&model, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&data, &split.base_classes, 1, &mut rng).unwrap();
        let (loss, _) = episode_gradients(&model, &cache, &ep, 1.0, true).unwrap();

        let shots = [(cache.get(ep.support[0].image_index), &ep.support[0].mask)];
        let mut g = Graph::inference(&model.store);
        let (vars, _) = model
            .forward_episode(&mut g, &shots, cache.get(ep.query_index), ShotWeighting::Learned, Some(ep.class_id))
            .unwrap();
        let lm = meta_loss(&mut g, vars.meta, &ep.query_mask).unwrap();
        let lm = g.value(lm).item();
        // Identity combiners: the final scores are the meta probabilities,
        // so the final term is the loss of softmax(p_m).
        let lf = final_loss(&mut g, vars.meta, &ep.query_mask).unwrap();
        let lf = g.value(lf).item();
        assert!((loss - (lf + lm)).abs() < 1e-9);
        assert!(lf > 0.0 && lm > 0.0);
    }

    #[test]
    fn lambda_changes_meta_gradients_once_ensemble_moves() {
        let (mut model, data, split) = setup(1);
        model.set_trainable(&[ParamGroup::Meta, ParamGroup::Ensemble]);
        let w = model.ensemble.w_ens.weight;
        model.store.get_mut(w).data_mut().copy_from_slice(&[0.7, 0.4]);
        let cache = FeatureCache::build(&model, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = sample_episode(&data, &split.base_classes, 1, &mut rng).unwrap();
        let (_, g0) = episode_gradients(&model, &cache, &ep, 0.0, true).unwrap();
        let (_, g1) = episode_gradients(&model, &cache, &ep, 1.0, true).unwrap();
        let head = model.meta.head.weight;
        let diff = g0.get(head).unwrap().max_abs_diff(g1.get(head).unwrap());
        assert!(diff > 1e-8, "head gradient unchanged by lambda: {diff}");
        assert!(g0
            .iter()
            .all(|(id, _)| matches!(model.store.group(id), ParamGroup::Meta | ParamGroup::Ensemble)));
    }
}
