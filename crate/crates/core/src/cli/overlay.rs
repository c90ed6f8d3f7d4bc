//! Colour overlays of a prediction against ground truth, written as binary PPM.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_ONLY_COLOR: [u8; 3] = [255, 0, 0];
pub const GT_ONLY_COLOR: [u8; 3] = [0, 0, 255];

/// Which organs to paint. `None` composites every organ in label order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlaySpec {
    pub organ: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn gray(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// `image` is `[1, H, W]` (or `[H, W]`); masks are single slices.
pub fn overlay_render(image: &Tensor<f32>, pred: &Mask, gt: &Mask, spec: &OverlaySpec) -> Result<RgbImage> {
    let (h, w) = match image.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::Usage(format!("overlay needs a single-channel image, got {s:?}"))),
    };
    if pred.shape() != [1, h, w] || gt.shape() != [1, h, w] {
        return Err(Error::Usage(format!(
            "overlay shapes differ: image {h}×{w}, prediction {:?}, ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let organs: Vec<u8> = match spec.organ {
        Some(o) => vec![o],
        None => (1..=pred.max_label().max(gt.max_label())).collect(),
    };
    let mut pixels = Vec::with_capacity(3 * h * w);
    for ((&v, &p), &t) in image.data().iter().zip(pred.labels()).zip(gt.labels()) {
        let g = gray(v);
        let mut rgb = [g, g, g];
        for &o in &organs {
            match (p == o, t == o) {
                (true, true) => rgb = TP_COLOR,
                (true, false) => rgb = PRED_ONLY_COLOR,
                (false, true) => rgb = GT_ONLY_COLOR,
                _ => {}
            }
        }
        pixels.extend_from_slice(&rgb);
    }
    Ok(RgbImage { width: w, height: h, pixels })
}
