//! On-disk dataset layout:
//!
//! ```text
//! root/images/NNNNN.png   8-bit RGB
//! root/masks/NNNNN.png    8-bit grayscale, one class id per pixel
//! root/folds.json         {"total_classes": 6, "num_folds": 3, "folds": {"0": [1, 2], ...}}
//! ```
//!
//! Images and masks are paired by file name.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bam_core::data::{generate_scenes, ClassId, ClassSplit, Dataset, LabelMap, RgbImage, SceneSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldFile {
    pub total_classes: usize,
    pub num_folds: usize,
    /// Novel classes of each fold, keyed by fold index.
    pub folds: BTreeMap<String, Vec<ClassId>>,
}

impl FoldFile {
    /// Balanced contiguous folds.
    pub fn contiguous(total_classes: usize, num_folds: usize) -> Result<Self> {
        let mut folds = BTreeMap::new();
        for f in 0..num_folds {
            let split = bam_core::data::split_folds(total_classes, f, num_folds)?;
            folds.insert(f.to_string(), split.novel_classes);
        }
        Ok(FoldFile {
            total_classes,
            num_folds,
            folds,
        })
    }

    pub fn split(&self, fold: usize) -> Result<ClassSplit> {
        let novel = self
            .folds
            .get(&fold.to_string())
            .with_context(|| format!("folds.json has no fold {fold}"))?;
        Ok(ClassSplit::with_novel(self.total_classes, fold, self.num_folds, novel.clone())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let folds: FoldFile =
            serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?;
        ensure!(folds.num_folds > 0, "folds.json declares zero folds");
        Ok(folds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(image.as_bytes())?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &LabelMap) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(mask.as_slice())?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (info, buf) = read_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => bail!("{}: palette not expanded", path.display()),
    };
    Ok(RgbImage::new(h, w, rgb)?)
}

/// Masks must be single-channel 8-bit; palette PNGs keep their indices.
pub fn read_mask_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    ensure!(
        matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) && info.bit_depth == png::BitDepth::Eight,
        "{}: masks must be 8-bit single-channel PNGs",
        path.display()
    );
    buf.truncate(info.buffer_size());
    Ok(LabelMap::new(info.height as usize, info.width as usize, buf)?)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// A loaded dataset root.
pub struct DatasetRoot {
    pub root: PathBuf,
    pub dataset: Dataset,
    pub folds: FoldFile,
    pub names: Vec<String>,
}

pub fn read_dataset(root: &Path, min_pixels: usize) -> Result<DatasetRoot> {
    let names = png_names(&root.join("images"))?;
    ensure!(!names.is_empty(), "{} contains no images", root.join("images").display());
    let mut images = Vec::with_capacity(names.len());
    let mut masks = Vec::with_capacity(names.len());
    for n in &names {
        images.push(read_rgb_png(&root.join("images").join(n))?);
        let mask_path = root.join("masks").join(n);
        ensure!(mask_path.exists(), "image {n} has no mask");
        masks.push(read_mask_png(&mask_path)?);
    }
    let folds = FoldFile::read(&root.join("folds.json"))?;
    for (n, m) in names.iter().zip(&masks) {
        if let Some(&bad) = m.as_slice().iter().find(|&&v| usize::from(v) > folds.total_classes) {
            bail!("mask {n} uses class {bad} beyond total_classes {}", folds.total_classes);
        }
    }
    Ok(DatasetRoot {
        root: root.to_path_buf(),
        dataset: Dataset::new(images, masks, min_pixels)?,
        folds,
        names,
    })
}

pub fn write_dataset(root: &Path, images: &[RgbImage], masks: &[LabelMap], folds: &FoldFile) -> Result<()> {
    ensure!(images.len() == masks.len(), "one mask per image");
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for (i, (img, m)) in images.iter().zip(masks).enumerate() {
        let name = format!("{i:05}.png");
        write_rgb_png(&root.join("images").join(&name), img)?;
        write_mask_png(&root.join("masks").join(&name), m)?;
    }
    folds.write(&root.join("folds.json"))
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub classes: usize,
    pub images: usize,
    pub val_images: usize,
    pub size: usize,
    pub folds: usize,
    pub seed: u64,
}

/// Writes `out/train` and `out/val` shapes-world roots with independent
/// scene streams.
pub fn synth_data(out: &Path, opts: &SynthOptions) -> Result<()> {
    ensure!(
        (1..=ClassId::MAX as usize).contains(&opts.classes),
        "class count must lie in 1..=255"
    );
    let folds = FoldFile::contiguous(opts.classes, opts.folds)?;
    let classes: Vec<ClassId> = (1..=opts.classes as ClassId).collect();
    for (sub, count, seed) in [
        ("train", opts.images, opts.seed),
        ("val", opts.val_images, opts.seed ^ 0x5eed_0000_0000_0001),
    ] {
        let spec = SceneSpec::new(opts.size, classes.clone(), seed);
        let scenes = generate_scenes(&spec, count)?;
        let (images, masks): (Vec<_>, Vec<_>) = scenes.into_iter().map(|s| (s.image, s.mask)).unzip();
        write_dataset(&out.join(sub), &images, &masks, &folds)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        let mask = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        write_rgb_png(&dir.path().join("a.png"), &img).unwrap();
        write_mask_png(&dir.path().join("b.png"), &mask).unwrap();
        assert_eq!(read_rgb_png(&dir.path().join("a.png")).unwrap(), img);
        assert_eq!(read_mask_png(&dir.path().join("b.png")).unwrap(), mask);
    }

    #[test]
    fn rgb_file_is_not_a_mask() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(1, 1, vec![1, 2, 3]).unwrap();
        write_rgb_png(&dir.path().join("a.png"), &img).unwrap();
        assert!(read_mask_png(&dir.path().join("a.png")).is_err());
    }

    #[test]
    fn contiguous_folds_match_split() {
        let f = FoldFile::contiguous(6, 3).unwrap();
        assert_eq!(f.folds["1"], vec![3, 4]);
        let s = f.split(1).unwrap();
        assert_eq!(s.base_classes, vec![1, 2, 5, 6]);
        assert!(f.split(3).is_err());
        assert!(FoldFile::contiguous(7, 3).is_err());
    }

    #[test]
    fn synth_roots_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            classes: 6,
            images: 5,
            val_images: 3,
            size: 32,
            folds: 3,
            seed: 1,
        };
        synth_data(dir.path(), &opts).unwrap();
        let train = read_dataset(&dir.path().join("train"), 1).unwrap();
        let val = read_dataset(&dir.path().join("val"), 1).unwrap();
        assert_eq!(train.dataset.len(), 5);
        assert_eq!(val.dataset.len(), 3);
        assert_eq!(train.folds, FoldFile::contiguous(6, 3).unwrap());
        let spec = SceneSpec::new(32, (1..=6).collect(), 1);
        let scenes = generate_scenes(&spec, 5).unwrap();
        for (i, s) in scenes.iter().enumerate() {
            assert_eq!(train.dataset.image(i), &s.image);
            assert_eq!(train.dataset.mask(i), &s.mask);
        }
    }

    #[test]
    fn mask_ids_beyond_the_class_count_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(32, 32, vec![0; 32 * 32 * 3]).unwrap();
        let mask = LabelMap::new(32, 32, vec![9; 32 * 32]).unwrap();
        write_dataset(dir.path(), &[img], &[mask], &FoldFile::contiguous(6, 3).unwrap()).unwrap();
        assert!(read_dataset(dir.path(), 1).is_err());
    }
}
