use alloc::vec::Vec;

use rand::Rng;

use super::image::{LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::graph::bilinear_taps;

/// Fills the tight axis-aligned box around a binary mask's foreground.
pub fn mask_to_bbox(mask: &LabelMap) -> Result<LabelMap> {
    let (h, w) = (mask.height(), mask.width());
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 0 {
                bounds = Some(match bounds {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    let (y0, y1, x0, x1) = bounds.ok_or(Error::EmptyMask)?;
    let mut out = LabelMap::zeros(h, w);
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.set(y, x, 1);
        }
    }
    Ok(out)
}

/// Bilinear resize of a binary mask to `oh x ow` followed by a 0.5 threshold.
pub fn resize_mask(mask: &LabelMap, oh: usize, ow: usize) -> Vec<f64> {
    let soft = resize_soft(mask, oh, ow);
    soft.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

/// Bilinear resize of a binary mask without thresholding.
pub fn resize_soft(mask: &LabelMap, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let src: Vec<f64> = mask.as_slice().iter().map(|&v| f64::from(u8::from(v != 0))).collect();
    if (h, w) == (oh, ow) {
        return src;
    }
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Random horizontal flip plus a zero-padded random crop back to the
/// original size.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, mask: &LabelMap, rng: &mut R) -> (RgbImage, LabelMap) {
    let (h, w) = (image.height(), image.width());
    let flip = rng.random_bool(0.5);
    let pad = (h.min(w) / 8).max(1) as i64;
    let dy = rng.random_range(-pad..=pad);
    let dx = rng.random_range(-pad..=pad);
    let mut pixels = alloc::vec![0u8; h * w * 3];
    let mut labels = alloc::vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 + dy;
            let sx = x as i64 + dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let sx = if flip { w - 1 - sx as usize } else { sx as usize };
            let sy = sy as usize;
            let px = image.pixel(sy, sx);
            pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&px);
            labels[y * w + x] = mask.get(sy, sx);
        }
    }
    (
        RgbImage::new(h, w, pixels).expect("same size"),
        LabelMap::new(h, w, labels).expect("same size"),
    )
}
