//! Merging a binary novel-class prediction with the base learner's
//! multi-class mask.
//!
//! Output ids: 0 background, 1 the episode's novel class, `d + 1` for dense
//! base id `d`. [`GeneralizedIdTable`] maps them back to class ids.

use serde::{Deserialize, Serialize};

use crate::data::{BaseIdTable, ClassId, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScheme {
    /// Confident novel pixels override the base mask.
    Main,
    /// The base mask takes precedence; novel fills the remaining pixels.
    Alt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralizedIdTable {
    pub novel_class: ClassId,
    pub base: BaseIdTable,
}

impl GeneralizedIdTable {
    pub fn class_of(&self, id: u8) -> Option<ClassId> {
        match id {
            0 => Some(0),
            1 => Some(self.novel_class),
            d => self.base.class_of(d - 1),
        }
    }

    /// Output id for a ground-truth class; classes outside the episode map
    /// to background.
    pub fn id_of(&self, class: ClassId) -> u8 {
        if class == 0 {
            0
        } else if class == self.novel_class {
            1
        } else {
            self.base.dense_of(class).map_or(0, |d| d + 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneralizedMask {
    pub labels: LabelMap,
    /// Absent only on masks read back without their table.
    pub table: Option<GeneralizedIdTable>,
}

pub fn fuse(
    scheme: FusionScheme,
    fg_prob: &Tensor,
    base_mask: &LabelMap,
    tau: f64,
    table: &GeneralizedIdTable,
) -> Result<GeneralizedMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Threshold(tau));
    }
    let (c, h, w) = fg_prob.dims3();
    if c != 1 || (h, w) != (base_mask.height(), base_mask.width()) {
        return Err(Error::shape("foreground map and base mask must be aligned 1 x H x W / H x W"));
    }
    if base_mask.as_slice().iter().any(|&d| usize::from(d) > table.base.len()) {
        return Err(Error::LabelOutOfRange {
            label: usize::from(base_mask.as_slice().iter().copied().max().unwrap_or(0)),
            max: table.base.len(),
        });
    }
    let labels = fg_prob
        .data()
        .iter()
        .zip(base_mask.as_slice())
        .map(|(&p, &b)| fuse_pixel(scheme, p, b, tau))
        .collect();
    Ok(GeneralizedMask {
        labels: LabelMap::new(h, w, labels)?,
        table: Some(table.clone()),
    })
}

fn fuse_pixel(scheme: FusionScheme, p: f64, base: u8, tau: f64) -> u8 {
    let novel = p > tau;
    match scheme {
        FusionScheme::Main if novel => 1,
        FusionScheme::Main if base != 0 => base + 1,
        FusionScheme::Alt if base != 0 => base + 1,
        FusionScheme::Alt if novel => 1,
        _ => 0,
    }
}

pub fn fuse_generalized(
    fg_prob: &Tensor,
    base_mask: &LabelMap,
    tau: f64,
    table: &GeneralizedIdTable,
) -> Result<GeneralizedMask> {
    fuse(FusionScheme::Main, fg_prob, base_mask, tau, table)
}

pub fn fuse_generalized_alt(
    fg_prob: &Tensor,
    base_mask: &LabelMap,
    tau: f64,
    table: &GeneralizedIdTable,
) -> Result<GeneralizedMask> {
    fuse(FusionScheme::Alt, fg_prob, base_mask, tau, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn table() -> GeneralizedIdTable {
        GeneralizedIdTable {
            novel_class: 2,
            base: BaseIdTable::new(vec![1, 3, 4, 5]),
        }
    }

    fn one(scheme: FusionScheme, p: f64, base: u8) -> u8 {
        let fg = Tensor::from_vec(&[1, 1, 1], vec![p]).unwrap();
        let m = LabelMap::new(1, 1, vec![base]).unwrap();
        fuse(scheme, &fg, &m, 0.9, &table()).unwrap().labels.get(0, 0)
    }

    #[test]
    fn main_rule_cases() {
        assert_eq!(one(FusionScheme::Main, 0.95, 3), 1);
        assert_eq!(one(FusionScheme::Main, 0.5, 3), 4);
        assert_eq!(one(FusionScheme::Main, 0.5, 0), 0);
    }

    #[test]
    fn alt_rule_cases() {
        assert_eq!(one(FusionScheme::Alt, 0.95, 3), 4);
        assert_eq!(one(FusionScheme::Alt, 0.95, 0), 1);
        assert_eq!(one(FusionScheme::Alt, 0.1, 0), 0);
    }

    #[test]
    fn ids_translate_back_to_classes() {
        let t = table();
        assert_eq!(t.class_of(0), Some(0));
        assert_eq!(t.class_of(1), Some(2));
        assert_eq!(t.class_of(2), Some(1));
        assert_eq!(t.class_of(5), Some(5));
        assert_eq!(t.class_of(6), None);
        for c in [0, 1, 2, 3, 4, 5] {
            assert_eq!(t.class_of(t.id_of(c)), Some(c));
        }
        assert_eq!(t.id_of(9), 0);
    }

    #[test]
    fn threshold_outside_unit_interval_is_refused() {
        let fg = Tensor::zeros(&[1, 1, 1]);
        let m = LabelMap::zeros(1, 1);
        assert_eq!(fuse_generalized(&fg, &m, 1.5, &table()), Err(Error::Threshold(1.5)));
        assert!(fuse_generalized_alt(&fg, &m, f64::NAN, &table()).is_err());
    }

    #[test]
    fn rules_differ_exactly_where_both_claim_the_pixel() {
        let probs: Vec<f64> = (0..=100).map(|i| f64::from(i) / 100.0).collect();
        for tau in [0.0, 0.5, 0.9, 1.0] {
            for base in 0..=4u8 {
                let fg = Tensor::from_vec(&[1, 1, probs.len()], probs.clone()).unwrap();
                let m = LabelMap::new(1, probs.len(), vec![base; probs.len()]).unwrap();
                let a = fuse_generalized(&fg, &m, tau, &table()).unwrap().labels;
                let b = fuse_generalized_alt(&fg, &m, tau, &table()).unwrap().labels;
                for (i, &p) in probs.iter().enumerate() {
                    let differ = a.as_slice()[i] != b.as_slice()[i];
                    assert_eq!(differ, p > tau && base != 0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_monotone_in_tau(
            probs in proptest::collection::vec(0.0f64..=1.0, 12),
            bases in proptest::collection::vec(0u8..=4, 12),
            tau in 0.0f64..=1.0,
            raise in 0.0f64..=0.5,
        ) {
            let fg = Tensor::from_vec(&[1, 3, 4], probs.clone()).unwrap();
            let m = LabelMap::new(3, 4, bases.clone()).unwrap();
            let a = fuse_generalized(&fg, &m, tau, &table()).unwrap().labels;
            let b = fuse_generalized_alt(&fg, &m, tau, &table()).unwrap().labels;
            for i in 0..12 {
                let main = if probs[i] > tau { 1 } else if bases[i] != 0 { bases[i] + 1 } else { 0 };
                let alt = if bases[i] != 0 { bases[i] + 1 } else if probs[i] > tau { 1 } else { 0 };
                prop_assert_eq!(a.as_slice()[i], main);
                prop_assert_eq!(b.as_slice()[i], alt);
            }
            let higher = fuse_generalized(&fg, &m, (tau + raise).min(1.0), &table()).unwrap().labels;
            prop_assert!(higher.count(1) <= a.count(1));
        }
    }
}
