//! Episodic evaluation on novel classes, standard and generalized.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_to_bbox, remap_for_base_training, sample_episode, ClassSplit, Dataset, Episode, LabelMap};
use crate::error::{Error, Result};
use crate::generalized::{fuse, FusionScheme, GeneralizedIdTable, GeneralizedMask, DEFAULT_TAU};
use crate::metrics::{FbAccumulator, GeneralizedAccumulator, IouAccumulator, IouMode, MetricsRecord};
use crate::model::{BamModel, EpisodePrediction, ImageFeatures};
use crate::tensor::Tensor;
use crate::train::FeatureCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    Bam,
    MetaOnly,
    /// The base learner's own multi-class mIoU over base classes present in
    /// the query images.
    BaseOnly,
}

impl Learner {
    pub fn name(self) -> &'static str {
        match self {
            Learner::Bam => "bam",
            Learner::MetaOnly => "meta-only",
            Learner::BaseOnly => "base-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Mask,
    /// Support masks replaced by their bounding boxes; query ground truth
    /// untouched.
    Bbox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub fold: usize,
    pub learner: Learner,
    pub annotation: AnnotationMode,
    pub iou_mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 200,
            shots: 1,
            seeds: alloc::vec![0, 1, 2],
            fold: 0,
            learner: Learner::Bam,
            annotation: AnnotationMode::Mask,
            iou_mode: IouMode::Pooled,
        }
    }
}

impl EvalConfig {
    /// 1000 episodes and 5 seeds.
    pub fn benchmark() -> Self {
        EvalConfig {
            episodes: 1000,
            seeds: alloc::vec![0, 1, 2, 3, 4],
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.shots == 0 || self.seeds.is_empty() {
            return Err(Error::config("evaluation needs episodes, shots and seeds"));
        }
        Ok(())
    }
}

/// Mean over seeds of per-seed records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMean {
    pub method: String,
    pub fold: usize,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub miou: f64,
    pub miou_std: f64,
    pub fb_iou: f64,
    pub miou_n: Option<f64>,
    pub miou_b: Option<f64>,
    pub miou_a: Option<f64>,
}

impl SeedMean {
    pub fn from_records(records: &[MetricsRecord]) -> Option<Self> {
        let first = records.first()?;
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let opt = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
            records.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        let miou = mean(&|r| r.miou);
        let var = mean(&|r| (r.miou - miou) * (r.miou - miou));
        Some(SeedMean {
            method: first.method.clone(),
            fold: first.fold,
            shots: first.shots,
            seeds: records.iter().map(|r| r.seed).collect(),
            miou,
            miou_std: libm::sqrt(var),
            fb_iou: mean(&|r| r.fb_iou),
            miou_n: opt(&|r| r.miou_n),
            miou_b: opt(&|r| r.miou_b),
            miou_a: opt(&|r| r.miou_a),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub per_seed: Vec<MetricsRecord>,
    pub mean: SeedMean,
}

fn support_masks(episode: &Episode, mode: AnnotationMode) -> Result<Vec<LabelMap>> {
    episode
        .support
        .iter()
        .map(|s| match mode {
            AnnotationMode::Mask => Ok(s.mask.clone()),
            AnnotationMode::Bbox => mask_to_bbox(&s.mask),
        })
        .collect()
}

fn predict_episode(model: &BamModel, cache: &FeatureCache, episode: &Episode, mode: AnnotationMode) -> Result<EpisodePrediction> {
    let masks = support_masks(episode, mode)?;
    let shots: Vec<(&ImageFeatures, &LabelMap)> = episode
        .support
        .iter()
        .zip(&masks)
        .map(|(s, m)| (cache.get(s.image_index), m))
        .collect();
    model.predict(&shots, cache.get(episode.query_index))
}

/// Runs `config.episodes` novel-class episodes per seed on `dataset`.
pub fn evaluate(model: &BamModel, config: &EvalConfig, dataset: &Dataset, split: &ClassSplit) -> Result<EvalOutcome> {
    let cache = FeatureCache::build(model, dataset)?;
    evaluate_cached(model, config, dataset, split, &cache)
}

pub fn evaluate_cached(
    model: &BamModel,
    config: &EvalConfig,
    dataset: &Dataset,
    split: &ClassSplit,
    cache: &FeatureCache,
) -> Result<EvalOutcome> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut iou = IouAccumulator::new();
        let mut fb = FbAccumulator::default();
        for _ in 0..config.episodes {
            let ep = sample_episode(dataset, &split.novel_classes, config.shots, &mut rng)?;
            match config.learner {
                Learner::Bam | Learner::MetaOnly => {
                    let p = predict_episode(model, cache, &ep, config.annotation)?;
                    let pred = if config.learner == Learner::Bam { &p.mask } else { &p.meta_mask };
                    iou.accumulate_binary(pred, &ep.query_mask, ep.class_id)?;
                    fb.accumulate(pred, &ep.query_mask)?;
                }
                Learner::BaseOnly => {
                    let q = cache.get(ep.query_index);
                    let pred = q.base_mask();
                    let gt = remap_for_base_training(dataset.mask(ep.query_index), split);
                    let to_class = |m: &LabelMap| {
                        let data = m
                            .as_slice()
                            .iter()
                            .map(|&d| model.base_table.class_of(d).unwrap_or(0))
                            .collect();
                        LabelMap::new(m.height(), m.width(), data)
                    };
                    iou.accumulate(&to_class(&pred)?, &to_class(&gt)?)?;
                    let bin = |m: &LabelMap| {
                        LabelMap::new(m.height(), m.width(), m.as_slice().iter().map(|&d| u8::from(d != 0)).collect())
                    };
                    fb.accumulate(&bin(&pred)?, &bin(&gt)?)?;
                }
            }
        }
        let classes: Vec<_> = match config.learner {
            Learner::BaseOnly => split.base_classes.clone(),
            _ => split.novel_classes.clone(),
        };
        let per_class: BTreeMap<_, _> = iou
            .per_class(config.iou_mode)
            .into_iter()
            .filter(|(c, _)| classes.contains(c))
            .collect();
        per_seed.push(MetricsRecord {
            method: config.learner.name().to_string(),
            fold: config.fold,
            seed,
            shots: config.shots,
            miou: iou.mean_over(&classes, config.iou_mode).unwrap_or(0.0),
            per_class_iou: per_class,
            fb_iou: fb.value().unwrap_or(0.0),
            miou_n: None,
            miou_b: None,
            miou_a: None,
        });
    }
    let mean = SeedMean::from_records(&per_seed).expect("at least one seed");
    Ok(EvalOutcome { per_seed, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedConfig {
    pub eval: EvalConfig,
    pub tau: f64,
    pub scheme: FusionScheme,
    /// Extra thresholds evaluated for the full model.
    pub sweep: Vec<f64>,
    /// Keep every episode's maps for inspection.
    pub keep_dumps: bool,
}

impl Default for GeneralizedConfig {
    fn default() -> Self {
        GeneralizedConfig {
            eval: EvalConfig::default(),
            tau: DEFAULT_TAU,
            scheme: FusionScheme::Main,
            sweep: Vec::new(),
            keep_dumps: false,
        }
    }
}

/// Maps of one generalized episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDump {
    pub seed: u64,
    pub query_index: usize,
    pub table: GeneralizedIdTable,
    /// Final-output foreground probability.
    pub fg_prob: Tensor,
    /// Meta learner foreground probability.
    pub meta_fg: Tensor,
    pub base_mask: LabelMap,
    pub fused: GeneralizedMask,
    pub fused_without_ensemble: GeneralizedMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub miou_n: f64,
    pub miou_b: f64,
    pub miou_a: f64,
}

#[derive(Clone, Debug)]
pub struct GeneralizedOutcome {
    /// Per seed: the full model, then the model read through its meta
    /// learner alone.
    pub bam: Vec<MetricsRecord>,
    pub without_ensemble: Vec<MetricsRecord>,
    pub bam_mean: SeedMean,
    pub without_ensemble_mean: SeedMean,
    /// Seed-averaged scores of the full model at each sweep threshold.
    pub sweep: Vec<SweepPoint>,
    pub dumps: Vec<EpisodeDump>,
}

fn generalized_record(method: &str, config: &EvalConfig, seed: u64, acc: &GeneralizedAccumulator, split: &ClassSplit) -> MetricsRecord {
    let s = acc.scores(split);
    let mut all = split.novel_classes.clone();
    all.extend_from_slice(&split.base_classes);
    let per_class = acc
        .inner()
        .per_class(IouMode::Pooled)
        .into_iter()
        .filter(|(c, _)| all.contains(c))
        .collect();
    MetricsRecord {
        method: method.to_string(),
        fold: config.fold,
        seed,
        shots: config.shots,
        per_class_iou: per_class,
        miou: s.miou_a,
        fb_iou: 0.0,
        miou_n: Some(s.miou_n),
        miou_b: Some(s.miou_b),
        miou_a: Some(s.miou_a),
    }
}

/// Generalized evaluation: each query is labelled with its novel class and
/// every base class at once.
pub fn evaluate_generalized(
    model: &BamModel,
    config: &GeneralizedConfig,
    dataset: &Dataset,
    split: &ClassSplit,
) -> Result<GeneralizedOutcome> {
    let cache = FeatureCache::build(model, dataset)?;
    evaluate_generalized_cached(model, config, dataset, split, &cache)
}

pub fn evaluate_generalized_cached(
    model: &BamModel,
    config: &GeneralizedConfig,
    dataset: &Dataset,
    split: &ClassSplit,
    cache: &FeatureCache,
) -> Result<GeneralizedOutcome> {
    let ec = &config.eval;
    ec.validate()?;
    for &t in core::iter::once(&config.tau).chain(&config.sweep) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Threshold(t));
        }
    }
    let mut bam = Vec::new();
    let mut without = Vec::new();
    let mut sweep_sum = alloc::vec![(0.0, 0.0, 0.0); config.sweep.len()];
    let mut dumps = Vec::new();
    for &seed in &ec.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = GeneralizedAccumulator::default();
        let mut acc_wo = GeneralizedAccumulator::default();
        let mut acc_sweep = alloc::vec![GeneralizedAccumulator::default(); config.sweep.len()];
        for _ in 0..ec.episodes {
            let ep = sample_episode(dataset, &split.novel_classes, ec.shots, &mut rng)?;
            let p = predict_episode(model, cache, &ep, ec.annotation)?;
            let q = cache.get(ep.query_index);
            let base_mask = q.base_mask();
            let table = GeneralizedIdTable {
                novel_class: ep.class_id,
                base: model.base_table.clone(),
            };
            let (_, h, w) = p.meta.dims3();
            let meta_fg = Tensor::from_vec(&[1, h, w], p.meta.channel(1).to_vec())?;
            let gt = dataset.mask(ep.query_index);
            let fused = fuse(config.scheme, &p.fg_prob, &base_mask, config.tau, &table)?;
            let fused_wo = fuse(config.scheme, &meta_fg, &base_mask, config.tau, &table)?;
            acc.accumulate(&fused, gt)?;
            acc_wo.accumulate(&fused_wo, gt)?;
            for (a, &t) in acc_sweep.iter_mut().zip(&config.sweep) {
                a.accumulate(&fuse(config.scheme, &p.fg_prob, &base_mask, t, &table)?, gt)?;
            }
            if config.keep_dumps {
                dumps.push(EpisodeDump {
                    seed,
                    query_index: ep.query_index,
                    table,
                    fg_prob: p.fg_prob,
                    meta_fg,
                    base_mask,
                    fused,
                    fused_without_ensemble: fused_wo,
                });
            }
        }
        bam.push(generalized_record("bam", ec, seed, &acc, split));
        without.push(generalized_record("bam-without-ensemble", ec, seed, &acc_wo, split));
        for (s, a) in sweep_sum.iter_mut().zip(&acc_sweep) {
            let sc = a.scores(split);
            s.0 += sc.miou_n;
            s.1 += sc.miou_b;
            s.2 += sc.miou_a;
        }
    }
    let n = ec.seeds.len() as f64;
    let sweep = config
        .sweep
        .iter()
        .zip(&sweep_sum)
        .map(|(&tau, s)| SweepPoint {
            tau,
            miou_n: s.0 / n,
            miou_b: s.1 / n,
            miou_a: s.2 / n,
        })
        .collect();
    Ok(GeneralizedOutcome {
        bam_mean: SeedMean::from_records(&bam).expect("seeds"),
        without_ensemble_mean: SeedMean::from_records(&without).expect("seeds"),
        bam,
        without_ensemble: without,
        sweep,
        dumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes, split_folds, SceneSpec};
    use crate::generalized::{fuse_generalized, fuse_generalized_alt};
    use crate::model::BamConfig;
    use alloc::vec;

    fn setup() -> (BamModel, Dataset, ClassSplit) {
        let split = split_folds(6, 0, 3).unwrap();
        let spec = SceneSpec::new(32, vec![1, 2, 3, 4, 5, 6], 21);
        let (images, masks) = generate_scenes(&spec, 30)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.mask))
            .unzip();
        let data = Dataset::new(images, masks, 16).unwrap();
        let model = BamModel::new(BamConfig::desk(split.num_base()), split.base_table()).unwrap();
        (model, data, split)
    }

    fn small() -> EvalConfig {
        EvalConfig {
            episodes: 12,
            seeds: vec![4, 5],
            ..EvalConfig::default()
        }
    }

    #[test]
    fn bam_equals_meta_only_at_init() {
        let (model, data, split) = setup();
        let a = evaluate(&model, &small(), &data, &split).unwrap();
        let b = evaluate(
            &model,
            &EvalConfig {
                learner: Learner::MetaOnly,
                ..small()
            },
            &data,
            &split,
        )
        .unwrap();
        for (x, y) in a.per_seed.iter().zip(&b.per_seed) {
            assert_eq!(x.miou.to_bits(), y.miou.to_bits());
            assert_eq!(x.fb_iou.to_bits(), y.fb_iou.to_bits());
        }
    }

    #[test]
    fn reports_each_seed_and_their_mean() {
        let (model, data, split) = setup();
        let out = evaluate(&model, &small(), &data, &split).unwrap();
        assert_eq!(out.per_seed.len(), 2);
        assert_eq!(out.mean.seeds, vec![4, 5]);
        let m = (out.per_seed[0].miou + out.per_seed[1].miou) / 2.0;
        assert!((out.mean.miou - m).abs() < 1e-15);
        assert!(out.per_seed.iter().all(|r| (0.0..=1.0).contains(&r.miou)));
        assert_eq!(out, evaluate(&model, &small(), &data, &split).unwrap());
    }

    #[test]
    fn base_only_scores_base_classes() {
        let (model, data, split) = setup();
        let cfg = EvalConfig {
            learner: Learner::BaseOnly,
            ..small()
        };
        let out = evaluate(&model, &cfg, &data, &split).unwrap();
        assert!(out.per_seed[0].per_class_iou.keys().all(|c| split.is_base(*c)));
    }

    #[test]
    fn bbox_mode_only_touches_supports() {
        let (model, data, split) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&data, &split.novel_classes, 1, &mut rng).unwrap();
        let boxed = support_masks(&ep, AnnotationMode::Bbox).unwrap();
        assert_eq!(boxed[0], mask_to_bbox(&ep.support[0].mask).unwrap());
        let cfg = EvalConfig {
            annotation: AnnotationMode::Bbox,
            ..small()
        };
        assert!(evaluate(&model, &cfg, &data, &split).is_ok());
    }

    #[test]
    fn generalized_outputs_match_separate_fusion() {
        let (model, data, split) = setup();
        for scheme in [FusionScheme::Main, FusionScheme::Alt] {
            let cfg = GeneralizedConfig {
                eval: small(),
                scheme,
                sweep: vec![0.5, 0.9],
                keep_dumps: true,
                ..GeneralizedConfig::default()
            };
            let out = evaluate_generalized(&model, &cfg, &data, &split).unwrap();
            assert_eq!(out.dumps.len(), 24);
            for d in &out.dumps {
                let f = match scheme {
                    FusionScheme::Main => fuse_generalized,
                    FusionScheme::Alt => fuse_generalized_alt,
                };
                assert_eq!(f(&d.fg_prob, &d.base_mask, 0.9, &d.table).unwrap(), d.fused);
                assert_eq!(f(&d.meta_fg, &d.base_mask, 0.9, &d.table).unwrap(), d.fused_without_ensemble);
            }
            let at_default = out.sweep[1];
            assert!((at_default.miou_n - out.bam_mean.miou_n.unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_thresholds_are_checked() {
        let (model, data, split) = setup();
        let cfg = GeneralizedConfig {
            eval: small(),
            sweep: vec![1.2],
            ..GeneralizedConfig::default()
        };
        assert_eq!(evaluate_generalized(&model, &cfg, &data, &split).unwrap_err(), Error::Threshold(1.2));
    }
}
