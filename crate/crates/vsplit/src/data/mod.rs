//! Synthetic data generation, noise injection, dataset splits, and IO.

mod dataset;
mod io;
mod noise;
mod synth;

pub use dataset::{extract_patches, split_dataset, split_indices, DatasetSplit};
pub use io::{
    read_dataset, read_predictions, read_raw, write_dataset, write_predictions, write_raw,
    DatasetManifest, GeneratorInfo, NoiseProvenance, PredEntry, Prediction, PredictionManifest,
    PredictionProvenance, SampleEntry, SplitIds,
};
pub use noise::{add_gaussian_noise, add_poisson_noise, reference_std};
pub use synth::{generate_channel, generate_channel_with_peak, ChannelKind, DEFAULT_PEAK};

use crate::error::{Result, VsplitError};

/// A single-channel 2-D raster of float intensities (arbitrary units).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    /// Build from row-major pixel data. All values must be finite.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(VsplitError::Invalid(format!(
                "image dimensions must be >= 1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(VsplitError::Invalid(format!(
                "pixel buffer length {} does not match {height}x{width}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(VsplitError::Invalid(format!(
                "image contains non-finite pixel value {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Rectangular crop; the window must lie inside the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image2D> {
        if top + height > self.height || left + width > self.width {
            return Err(VsplitError::Invalid(format!(
                "crop {height}x{width}+{top}+{left} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(height * width);
        for y in top..top + height {
            out.extend_from_slice(&self.pixels[y * self.width + left..y * self.width + left + width]);
        }
        Image2D::new(height, width, out)
    }

    /// Mean of all pixels (computed in f64).
    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Minimum pixel value.
    pub fn min(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Maximum pixel value.
    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Pixel-wise sum of two equally shaped channel images.
pub fn mix(c1: &Image2D, c2: &Image2D) -> Result<Image2D> {
    if c1.height != c2.height || c1.width != c2.width {
        return Err(VsplitError::Invalid(format!(
            "mix: shape mismatch {}x{} vs {}x{}",
            c1.height, c1.width, c2.height, c2.width
        )));
    }
    let pixels = c1
        .pixels
        .iter()
        .zip(&c2.pixels)
        .map(|(&a, &b)| a + b)
        .collect();
    Image2D::new(c1.height, c1.width, pixels)
}

/// One training/evaluation sample: the mixed noisy input with its noisy
/// channel targets and, when available, the clean channels.
#[derive(Debug, Clone)]
pub struct SplitSample {
    /// Mixed input x^N (always target1 + target2 for additive channel noise).
    pub input: Image2D,
    /// Noisy channel 1 target.
    pub target1: Image2D,
    /// Noisy channel 2 target.
    pub target2: Image2D,
    /// Clean channel 1, when known (synthetic data).
    pub clean1: Option<Image2D>,
    /// Clean channel 2, when known.
    pub clean2: Option<Image2D>,
}

impl SplitSample {
    /// Validate the shared-shape invariant.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.input.height(), self.input.width());
        let mut shapes = vec![
            (self.target1.height(), self.target1.width()),
            (self.target2.height(), self.target2.width()),
        ];
        if let Some(c) = &self.clean1 {
            shapes.push((c.height(), c.width()));
        }
        if let Some(c) = &self.clean2 {
            shapes.push((c.height(), c.width()));
        }
        for (sh, sw) in shapes {
            if (sh, sw) != (h, w) {
                return Err(VsplitError::Invalid(format!(
                    "sample images disagree on shape: {h}x{w} vs {sh}x{sw}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_inputs() {
        assert!(Image2D::new(0, 4, vec![]).is_err());
        assert!(Image2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image2D::new(1, 2, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn mix_adds_pixelwise() {
        let z = Image2D::zeros(3, 3);
        assert_eq!(mix(&z, &z).unwrap(), z);

        let mut a = Image2D::zeros(2, 2);
        a.set(0, 0, 3.0);
        let mut b = Image2D::zeros(2, 2);
        b.set(0, 0, 4.0);
        let m = mix(&a, &b).unwrap();
        assert_eq!(m.get(0, 0), 7.0);

        // identity case: mixing with zeros returns the image
        assert_eq!(mix(&a, &Image2D::zeros(2, 2)).unwrap(), a);
    }

    #[test]
    fn mix_rejects_shape_mismatch() {
        let a = Image2D::zeros(2, 2);
        let b = Image2D::zeros(2, 3);
        assert!(mix(&a, &b).is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let img = Image2D::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(img.crop(2, 2, 2, 2).is_err());
    }
}
