//! Episodic data: fold splits, shapes-world scenes, episode sampling and
//! mask utilities.

mod episode;
mod image;
mod masks;
mod scene;
mod split;

pub use episode::{sample_episode, Dataset, Episode, SupportShot};
pub use image::{ClassId, LabelMap, RgbImage};
pub use masks::{augment, mask_to_bbox, resize_mask, resize_soft};
pub use scene::{class_color, generate_scene, generate_scenes, PlacedShape, Scene, SceneSpec, ShapeKind};
pub use split::{remap_for_base_training, split_folds, BaseIdTable, ClassSplit};
