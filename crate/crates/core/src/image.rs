//! Pixel containers shared by every stage of the pipeline.
//!
//! [`RgbImage`] stores interleaved `f32` channels in `[0, 1]`; [`LabelImage`]
//! stores one class id per pixel. Both are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Continuous 3-channel image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    /// Builds an image from interleaved RGB data, rejecting empty sizes and
    /// values outside `[0, 1]` (NaN included).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Validation,
            "image size must be positive, got {height}x{width}"
        );
        ensure!(
            data.len() == height * width * 3,
            Validation,
            "expected {} values for a {height}x{width} RGB image, got {}",
            height * width * 3,
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(crate::Error::Validation(format!(
                "channel value {} at pixel ({}, {}) outside [0, 1]",
                data[pos],
                pos / 3 / width,
                pos / 3 % width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Result<Self> {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes a pixel, clamping it into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Applies `f` to every channel value and clamps the result.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> RgbImage {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let o = f(v);
                if o.is_nan() {
                    0.0
                } else {
                    o.clamp(0.0, 1.0)
                }
            })
            .collect();
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class-id map.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Validation,
            "label size must be positive, got {height}x{width}"
        );
        ensure!(
            data.len() == height * width,
            Validation,
            "expected {} labels for {height}x{width}, got {}",
            height * width,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class_id: u8) -> Result<Self> {
        Self::new(height, width, vec![class_id; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class_id: u8) {
        self.data[y * self.width + x] = class_id;
    }

    /// Sorted, deduplicated class ids present in the map.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn same_size(&self, other: &LabelImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        let err = RgbImage::new(1, 2, vec![0.0, 0.5, 1.0, 0.2, 1.5, 0.0]).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
        assert!(RgbImage::new(1, 1, vec![f32::NAN, 0.0, 0.0]).is_err());
        assert!(RgbImage::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn map_values_clamps() {
        let img = RgbImage::filled(2, 2, [0.5, 0.5, 0.5]).unwrap();
        let out = img.map_values(|v| v * 4.0);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn classes_present_is_sorted() {
        let l = LabelImage::new(1, 4, vec![3, 0, 3, 1]).unwrap();
        assert_eq!(l.classes_present(), vec![0, 1, 3]);
    }
}
