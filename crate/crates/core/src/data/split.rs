use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::image::{ClassId, LabelMap};
use crate::error::{Error, Result};

/// Partition of the foreground classes into base and novel sets for one fold.
/// Background (class 0) belongs to neither.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub fold_index: usize,
    pub num_folds: usize,
    pub total_classes: usize,
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
}

/// Contiguous, balanced fold: novel ids are the `fold_index`-th block of
/// `total_classes / num_folds` ids starting at 1.
pub fn split_folds(total_classes: usize, fold_index: usize, num_folds: usize) -> Result<ClassSplit> {
    if num_folds == 0 || total_classes == 0 || total_classes % num_folds != 0 {
        return Err(Error::RaggedFolds {
            total: total_classes,
            folds: num_folds,
        });
    }
    if total_classes > usize::from(ClassId::MAX) {
        return Err(Error::config("class ids must fit in 8 bits"));
    }
    let per = total_classes / num_folds;
    let novel: Vec<ClassId> = (fold_index * per + 1..=(fold_index + 1) * per)
        .map(|c| c as ClassId)
        .collect();
    ClassSplit::with_novel(total_classes, fold_index, num_folds, novel)
}

impl ClassSplit {
    /// Builds a split from an explicit novel list (as read from a fold file).
    pub fn with_novel(
        total_classes: usize,
        fold_index: usize,
        num_folds: usize,
        mut novel: Vec<ClassId>,
    ) -> Result<Self> {
        if fold_index >= num_folds {
            return Err(Error::FoldOutOfRange {
                index: fold_index,
                folds: num_folds,
            });
        }
        novel.sort_unstable();
        novel.dedup();
        if novel
            .iter()
            .any(|&c| c == 0 || usize::from(c) > total_classes)
        {
            return Err(Error::config("novel class id outside 1..=total_classes"));
        }
        let base = (1..=total_classes as ClassId)
            .filter(|c| novel.binary_search(c).is_err())
            .collect();
        Ok(ClassSplit {
            fold_index,
            num_folds,
            total_classes,
            base_classes: base,
            novel_classes: novel,
        })
    }

    pub fn is_novel(&self, class: ClassId) -> bool {
        self.novel_classes.binary_search(&class).is_ok()
    }

    pub fn is_base(&self, class: ClassId) -> bool {
        self.base_classes.binary_search(&class).is_ok()
    }

    pub fn num_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn base_table(&self) -> BaseIdTable {
        BaseIdTable {
            base_classes: self.base_classes.clone(),
        }
    }
}

/// Dense renumbering of the sorted base classes onto `1..=N_b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseIdTable {
    base_classes: Vec<ClassId>,
}

impl BaseIdTable {
    pub fn new(mut base_classes: Vec<ClassId>) -> Self {
        base_classes.sort_unstable();
        base_classes.dedup();
        BaseIdTable { base_classes }
    }

    pub fn len(&self) -> usize {
        self.base_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_classes.is_empty()
    }

    pub fn dense_of(&self, class: ClassId) -> Option<u8> {
        self.base_classes
            .binary_search(&class)
            .ok()
            .map(|i| (i + 1) as u8)
    }

    pub fn class_of(&self, dense: u8) -> Option<ClassId> {
        usize::from(dense)
            .checked_sub(1)
            .and_then(|i| self.base_classes.get(i).copied())
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.base_classes
    }
}

/// Label map for base-learner training: base ids become `1..=N_b`, novel
/// classes and background become 0.
pub fn remap_for_base_training(mask: &LabelMap, split: &ClassSplit) -> LabelMap {
    let table = split.base_table();
    let mut lut = [0u8; 256];
    for &c in table.classes() {
        lut[usize::from(c)] = table.dense_of(c).unwrap_or(0);
    }
    let data = mask.as_slice().iter().map(|&v| lut[usize::from(v)]).collect();
    LabelMap::new(mask.height(), mask.width(), data).expect("same size")
}
