//! Image ingestion, deterministic synthetic data, and paired-view
//! augmentation.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment_one, augment_pair, center_resize};
pub use io::{load_dataset, read_image, write_pgm, write_ppm};
pub use synthetic::{generate_synthetic, write_synthetic_dataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MIN_SIDE: usize = 16;

/// An RGB image with pixels in `[0, 1]`, shape `(3, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
    pub label: Option<u32>,
}

impl Image {
    pub fn new(pixels: Tensor<f32>, label: Option<u32>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::dim(
                "image",
                format!("expected (3, h, w), got {:?}", pixels.shape()),
            ));
        }
        let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::dim(
                "image",
                format!("{h}x{w} below minimum side {MIN_SIDE}"),
            ));
        }
        for &v in pixels.data() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::numeric("image", format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(Image { pixels, label })
    }

    pub(crate) fn from_clamped(pixels: Tensor<f32>, label: Option<u32>) -> Self {
        debug_assert_eq!(pixels.shape()[0], 3);
        Image { pixels, label }
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }
}

/// Paired-view augmentation settings. Probabilities gate each sub-transform;
/// the apply order is fixed: crop, jitter, grayscale, blur, solarize, flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale_range: (f64, f64),
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
    pub hflip_prob: f64,
    pub output_size: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale_range: (0.4, 1.0),
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 2.0),
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
            hflip_prob: 0.5,
            output_size: 32,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
            ("hflip_prob", self.hflip_prob),
            ("solarize_threshold", self.solarize_threshold),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!(
                "blur_sigma_range ({slo}, {shi}) must satisfy 0 < min <= max"
            )));
        }
        if self.jitter_strength < 0.0 {
            return Err(Error::Config("jitter_strength must be non-negative".into()));
        }
        if self.output_size < MIN_SIDE {
            return Err(Error::Config(format!(
                "output_size {} below minimum {MIN_SIDE}",
                self.output_size
            )));
        }
        Ok(())
    }
}

/// Two augmented views of one source image, with the per-view seeds that
/// produced them.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub seed_a: u64,
    pub seed_b: u64,
}
