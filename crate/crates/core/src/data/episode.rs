use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use super::image::{ClassId, LabelMap, RgbImage};
use crate::error::{Error, Result};

/// In-memory collection of images with semantic masks, indexed by class.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<RgbImage>,
    masks: Vec<LabelMap>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    min_pixels: usize,
}

impl Dataset {
    /// A class counts as present in an image once it covers `min_pixels`.
    pub fn new(images: Vec<RgbImage>, masks: Vec<LabelMap>, min_pixels: usize) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(Error::shape("one mask per image"));
        }
        for (img, m) in images.iter().zip(&masks) {
            if (img.height(), img.width()) != (m.height(), m.width()) {
                return Err(Error::shape("mask size differs from its image"));
            }
        }
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, m) in masks.iter().enumerate() {
            let mut counts = [0usize; 256];
            for &v in m.as_slice() {
                counts[usize::from(v)] += 1;
            }
            for c in 1..256 {
                if counts[c] >= min_pixels.max(1) {
                    by_class.entry(c as ClassId).or_default().push(i);
                }
            }
        }
        Ok(Dataset {
            images,
            masks,
            by_class,
            min_pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> &LabelMap {
        &self.masks[i]
    }

    pub fn min_pixels(&self) -> usize {
        self.min_pixels
    }

    pub fn images_with(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    /// Indices of images containing none of `excluded` (at any pixel count).
    pub fn indices_without(&self, excluded: &[ClassId]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.masks[i].as_slice().iter().any(|v| excluded.contains(v)))
            .collect()
    }

    /// A copy restricted to the given images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let masks = indices.iter().map(|&i| self.masks[i].clone()).collect();
        Dataset::new(images, masks, self.min_pixels).expect("subset of a valid dataset")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportShot {
    pub image_index: usize,
    pub image: RgbImage,
    pub mask: LabelMap,
}

/// One few-shot task: `K` annotated supports and a query, all binarised to
/// `class_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: ClassId,
    pub support: Vec<SupportShot>,
    pub query_index: usize,
    pub query_image: RgbImage,
    pub query_mask: LabelMap,
}

impl Episode {
    pub fn shot_count(&self) -> usize {
        self.support.len()
    }
}

/// Draws a class from `pool` and `shots + 1` distinct images containing it.
/// Classes with too few images are discarded and another class is drawn.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    pool: &[ClassId],
    shots: usize,
    rng: &mut R,
) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::config("episodes need at least one support shot"));
    }
    let mut remaining: Vec<ClassId> = pool.to_vec();
    remaining.sort_unstable();
    remaining.dedup();
    while !remaining.is_empty() {
        let pick = rng.random_range(0..remaining.len());
        let class = remaining[pick];
        let candidates = dataset.images_with(class);
        if candidates.len() < shots + 1 {
            remaining.remove(pick);
            continue;
        }
        let chosen = index::sample(rng, candidates.len(), shots + 1);
        let mut chosen = chosen.iter().map(|i| candidates[i]);
        let query_index = chosen.next().expect("shots + 1 draws");
        let support = chosen
            .map(|i| SupportShot {
                image_index: i,
                image: dataset.image(i).clone(),
                mask: dataset.mask(i).binarize(class),
            })
            .collect();
        return Ok(Episode {
            class_id: class,
            support,
            query_index,
            query_image: dataset.image(query_index).clone(),
            query_mask: dataset.mask(query_index).binarize(class),
        });
    }
    Err(Error::NoEligibleClass {
        shots,
        needed: shots + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scenes, SceneSpec};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes(count: usize) -> Dataset {
        let spec = SceneSpec::new(32, vec![1, 2, 3, 4, 5, 6], 17);
        let scenes = generate_scenes(&spec, count).unwrap();
        let (images, masks) = scenes.into_iter().map(|s| (s.image, s.mask)).unzip();
        Dataset::new(images, masks, 8).unwrap()
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = shapes(60);
        let a = sample_episode(&ds, &[1, 2], 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_episode(&ds, &[1, 2], 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shot_count(), 1);
    }

    #[test]
    fn five_shot_uses_distinct_images_with_foreground() {
        let ds = shapes(80);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e = sample_episode(&ds, &[3, 4], 5, &mut rng).unwrap();
            assert_eq!(e.shot_count(), 5);
            let mut ids: Vec<usize> = e.support.iter().map(|s| s.image_index).collect();
            ids.push(e.query_index);
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 6);
            assert!(e.support.iter().all(|s| s.mask.count(1) >= 1 && s.mask.is_binary()));
            assert!(e.query_mask.is_binary());
        }
    }

    #[test]
    fn rare_class_is_an_error_and_others_are_resampled() {
        let mut masks = vec![LabelMap::zeros(4, 4); 4];
        let images = vec![RgbImage::new(4, 4, vec![0; 48]).unwrap(); 4];
        masks[0].set(0, 0, 3);
        for m in masks.iter_mut().skip(1) {
            m.set(1, 1, 5);
        }
        let ds = Dataset::new(images, masks, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode(&ds, &[3], 1, &mut rng),
            Err(Error::NoEligibleClass { .. })
        ));
        for _ in 0..10 {
            assert_eq!(sample_episode(&ds, &[3, 5], 1, &mut rng).unwrap().class_id, 5);
        }
    }
}
