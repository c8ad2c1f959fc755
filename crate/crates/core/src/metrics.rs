//! Intersection-over-union bookkeeping and Gram cost accounting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, ClassSplit, LabelMap};
use crate::error::{Error, Result};
use crate::generalized::GeneralizedMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// Intersections and unions summed over the whole set, then divided.
    Pooled,
    /// IoU per accumulated pair, averaged per class.
    PerEpisode,
}

/// Per-class intersection/union counters. Merging is counter addition, so
/// accumulation order never matters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    counts: BTreeMap<ClassId, ClassCounts>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ClassCounts {
    intersection: u64,
    union: u64,
    episode_iou_sum: f64,
    episodes: u64,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tallies every class appearing in either map, background included.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape("prediction and ground truth differ in size"));
        }
        let mut inter = [0u64; 256];
        let mut pred_n = [0u64; 256];
        let mut gt_n = [0u64; 256];
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            pred_n[usize::from(p)] += 1;
            gt_n[usize::from(g)] += 1;
            if p == g {
                inter[usize::from(p)] += 1;
            }
        }
        for c in 0..256 {
            let union = pred_n[c] + gt_n[c] - inter[c];
            if union == 0 {
                continue;
            }
            let e = self.counts.entry(c as ClassId).or_default();
            e.intersection += inter[c];
            e.union += union;
            e.episode_iou_sum += inter[c] as f64 / union as f64;
            e.episodes += 1;
        }
        Ok(())
    }

    /// Binary maps whose foreground stands for `class`.
    pub fn accumulate_binary(&mut self, pred: &LabelMap, gt: &LabelMap, class: ClassId) -> Result<()> {
        let relabel = |m: &LabelMap| -> Result<LabelMap> {
            let data = m.as_slice().iter().map(|&v| if v != 0 { class } else { 0 }).collect();
            LabelMap::new(m.height(), m.width(), data)
        };
        self.accumulate(&relabel(pred)?, &relabel(gt)?)
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&c, o) in &other.counts {
            let e = self.counts.entry(c).or_default();
            e.intersection += o.intersection;
            e.union += o.union;
            e.episode_iou_sum += o.episode_iou_sum;
            e.episodes += o.episodes;
        }
    }

    pub fn iou(&self, class: ClassId, mode: IouMode) -> Option<f64> {
        let c = self.counts.get(&class)?;
        match mode {
            IouMode::Pooled => (c.union > 0).then(|| c.intersection as f64 / c.union as f64),
            IouMode::PerEpisode => (c.episodes > 0).then(|| c.episode_iou_sum / c.episodes as f64),
        }
    }

    /// Exact counters `(intersection, union)`.
    pub fn counts(&self, class: ClassId) -> (u64, u64) {
        self.counts.get(&class).map_or((0, 0), |c| (c.intersection, c.union))
    }

    /// Foreground classes seen so far.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.counts.keys().copied().filter(|&c| c != 0)
    }

    pub fn per_class(&self, mode: IouMode) -> BTreeMap<ClassId, f64> {
        self.classes().filter_map(|c| self.iou(c, mode).map(|v| (c, v))).collect()
    }

    /// Mean over the listed classes that were observed; `None` if none were.
    pub fn mean_over(&self, classes: &[ClassId], mode: IouMode) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c, mode)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over every observed foreground class.
    pub fn miou(&self, mode: IouMode) -> Option<f64> {
        let classes: Vec<ClassId> = self.classes().collect();
        self.mean_over(&classes, mode)
    }
}

/// Pooled foreground-background IoU accumulator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FbAccumulator {
    inner: IouAccumulator,
}

impl FbAccumulator {
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.inner.accumulate_binary(pred, gt, 1)
    }

    pub fn merge(&mut self, other: &FbAccumulator) {
        self.inner.merge(&other.inner);
    }

    pub fn value(&self) -> Option<f64> {
        let bg = self.inner.iou(0, IouMode::Pooled);
        let fg = self.inner.iou(1, IouMode::Pooled);
        match (bg, fg) {
            (Some(b), Some(f)) => Some((b + f) / 2.0),
            (Some(v), None) | (None, Some(v)) => Some(v),
            (None, None) => None,
        }
    }
}

/// Mean of foreground and background IoU pooled over all pairs.
pub fn fb_iou(preds: &[LabelMap], gts: &[LabelMap]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape("one prediction per ground truth"));
    }
    let mut acc = FbAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.accumulate(p, g)?;
    }
    Ok(acc.value().unwrap_or(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedScores {
    pub miou_n: f64,
    pub miou_b: f64,
    pub miou_a: f64,
}

/// Accumulates generalized predictions in class-id space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedAccumulator {
    inner: IouAccumulator,
}

impl GeneralizedAccumulator {
    /// `gt` holds semantic class ids; classes outside the episode's table
    /// count as background.
    pub fn accumulate(&mut self, pred: &GeneralizedMask, gt: &LabelMap) -> Result<()> {
        let table = pred.table.as_ref().ok_or(Error::MissingTable)?;
        let pred_classes = pred
            .labels
            .as_slice()
            .iter()
            .map(|&id| table.class_of(id).ok_or(Error::LabelOutOfRange {
                label: usize::from(id),
                max: table.base.len() + 1,
            }))
            .collect::<Result<Vec<_>>>()?;
        let gt_classes = gt.as_slice().iter().map(|&c| table.class_of(table.id_of(c)).unwrap_or(0)).collect();
        let (h, w) = (gt.height(), gt.width());
        self.inner.accumulate(&LabelMap::new(h, w, pred_classes)?, &LabelMap::new(h, w, gt_classes)?)
    }

    pub fn merge(&mut self, other: &GeneralizedAccumulator) {
        self.inner.merge(&other.inner);
    }

    pub fn scores(&self, split: &ClassSplit) -> GeneralizedScores {
        let n = self.inner.mean_over(&split.novel_classes, IouMode::Pooled).unwrap_or(0.0);
        let b = self.inner.mean_over(&split.base_classes, IouMode::Pooled).unwrap_or(0.0);
        let mut all = split.novel_classes.clone();
        all.extend_from_slice(&split.base_classes);
        let a = self.inner.mean_over(&all, IouMode::Pooled).unwrap_or(0.0);
        GeneralizedScores {
            miou_n: n,
            miou_b: b,
            miou_a: a,
        }
    }

    pub fn inner(&self) -> &IouAccumulator {
        &self.inner
    }
}

pub fn generalized_miou(preds: &[GeneralizedMask], gts: &[LabelMap], split: &ClassSplit) -> Result<GeneralizedScores> {
    if preds.len() != gts.len() {
        return Err(Error::shape("one prediction per ground truth"));
    }
    let mut acc = GeneralizedAccumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        acc.accumulate(p, g)?;
    }
    Ok(acc.scores(split))
}

/// Multiply-add count of one Gram signature difference: `C^2 (4 H W + 3)`.
pub fn gram_flops(channels: u64, height: u64, width: u64) -> u128 {
    let c = u128::from(channels);
    c * c * (4 * u128::from(height) * u128::from(width) + 3)
}

/// Two-decimal SI rendering, e.g. `3.78G`.
pub fn format_flops(flops: u128) -> String {
    const UNITS: [(u128, &str); 4] = [
        (1_000_000_000_000, "T"),
        (1_000_000_000, "G"),
        (1_000_000, "M"),
        (1_000, "K"),
    ];
    for (scale, unit) in UNITS {
        if flops >= scale {
            // Round half up in integer arithmetic.
            let hundredths = (flops * 100 + scale / 2) / scale;
            return format!("{}.{:02}{unit}", hundredths / 100, hundredths % 100);
        }
    }
    format!("{flops}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    pub shots: usize,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub miou_n: Option<f64>,
    pub miou_b: Option<f64>,
    pub miou_a: Option<f64>,
}
