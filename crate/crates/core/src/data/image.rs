use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class identifier as stored in 8-bit index masks; 0 is background.
pub type ClassId = u8;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(alloc::format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `3 x H x W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("planar layout")
    }
}

/// Per-pixel class ids (semantic masks) or 0/1 values (binary masks).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(alloc::format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// 1 where the label equals `class`, 0 elsewhere.
    pub fn binarize(&self, class: ClassId) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == class)).collect(),
        }
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Distinct non-zero labels, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[usize::from(v)] = true;
        }
        (1..=255u8).filter(|&c| seen[usize::from(c)]).collect()
    }
}
