//! Deterministic synthetic dataset: textured gray backgrounds plus one to
//! three colored geometric blobs whose shape and color family encode the
//! class. Classes stay separable from per-image mean pixel statistics while
//! leaving plenty of region structure for the local objectives to work on.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::{io, Image, MIN_SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, stream, uniform_f64};

/// Generates `count` labeled images of `size` x `size`, class `i % classes`,
/// byte-identical for identical arguments.
pub fn generate_synthetic(
    seed: u64,
    count: usize,
    classes: usize,
    size: usize,
) -> Result<Vec<Image>> {
    if classes < 2 {
        return Err(Error::Config(format!("classes = {classes} must be at least 2")));
    }
    if classes > count {
        return Err(Error::Config(format!(
            "classes = {classes} exceeds count = {count}"
        )));
    }
    if size < MIN_SIDE {
        return Err(Error::Config(format!("size = {size} below minimum {MIN_SIDE}")));
    }
    (0..count)
        .map(|i| {
            let label = (i % classes) as u32;
            let mut r = rng::rng_from(&[seed, stream::SYNTH, i as u64]);
            let pixels = render(&mut r, label as usize, classes, size);
            Image::new(pixels, Some(label))
        })
        .collect()
}

/// Writes the images as `img_00000.ppm`... plus `labels.tsv`.
pub fn write_synthetic_dataset(dir: &Path, images: &[Image]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        io::write_ppm(&dir.join(&name), img)?;
        if let Some(label) = img.label {
            labels.insert(name, label);
        }
    }
    io::write_labels(&dir.join("labels.tsv"), &labels)
}

fn render(r: &mut ChaCha8Rng, class: usize, classes: usize, size: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * size * size];

    // Gray background: base level, a smooth 4x4 value-noise field, and
    // strong per-pixel grain. The grain is zero-mean and channel-neutral,
    // so per-image color means stay clean while local conv responses are
    // dominated by it.
    let base = uniform_f64(r, 0.38, 0.55) as f32;
    let coarse: Vec<f32> = (0..16).map(|_| uniform_f64(r, -1.0, 1.0) as f32).collect();
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / size as f32 * 3.0;
            let fx = x as f32 / size as f32 * 3.0;
            let (y0, x0) = (fy as usize, fx as usize);
            let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
            let at = |yy: usize, xx: usize| coarse[yy.min(3) * 4 + xx.min(3)];
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
            let bot = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
            let noise = (top * (1.0 - wy) + bot * wy) * 0.10
                + uniform_f64(r, -1.0, 1.0) as f32 * 0.25;
            let v = (base + noise).clamp(0.02, 0.98);
            for c in 0..3 {
                data[(c * size + y) * size + x] = v;
            }
        }
    }

    let anchor = class_color(class, classes);
    let blobs = 1 + (uniform_f64(r, 0.0, 3.0) as usize).min(2);
    for _ in 0..blobs {
        let cx = uniform_f64(r, 0.2, 0.8) as f32 * size as f32;
        let cy = uniform_f64(r, 0.2, 0.8) as f32 * size as f32;
        let radius = uniform_f64(r, size as f64 / 8.0, size as f64 / 5.0) as f32;
        let color = [
            (anchor[0] + uniform_f64(r, -0.08, 0.08) as f32).clamp(0.0, 1.0),
            (anchor[1] + uniform_f64(r, -0.08, 0.08) as f32).clamp(0.0, 1.0),
            (anchor[2] + uniform_f64(r, -0.08, 0.08) as f32).clamp(0.0, 1.0),
        ];
        let shape = class % 4;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                // signed distance to the blob boundary, negative inside
                let sd = match shape {
                    0 => (dx * dx + dy * dy).sqrt() - radius, // disc
                    1 => dx.abs().max(dy.abs()) - radius * 0.85, // square
                    2 => ((dx * dx + dy * dy).sqrt() - radius * 0.75).abs() - radius * 0.3, // ring
                    _ => dx.abs() + dy.abs() - radius * 1.2,  // diamond
                };
                let alpha = (0.5 - sd).clamp(0.0, 1.0); // one-pixel soft edge
                if alpha > 0.0 {
                    for c in 0..3 {
                        let idx = (c * size + y) * size + x;
                        data[idx] = data[idx] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// Evenly spaced hues around the color wheel, shifted along the gray axis to
/// a common luma so class identity lives purely in chroma.
fn class_color(class: usize, classes: usize) -> [f32; 3] {
    const TARGET_LUMA: f32 = 0.47;
    let rgb = hsv_to_rgb(class as f32 / classes as f32, 0.7, 0.75);
    let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    let shift = TARGET_LUMA - luma;
    [
        (rgb[0] + shift).clamp(0.0, 1.0),
        (rgb[1] + shift).clamp(0.0, 1.0),
        (rgb[2] + shift).clamp(0.0, 1.0),
    ]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).clamp(0.0, 6.0 - f32::EPSILON);
    let sector = h6 as usize;
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_balance_is_exact_when_divisible() {
        let images = generate_synthetic(7, 8, 4, 32).unwrap();
        assert_eq!(images.len(), 8);
        let mut counts = [0usize; 4];
        for img in &images {
            counts[img.label.unwrap() as usize] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn label_balance_within_one_otherwise() {
        let images = generate_synthetic(7, 10, 4, 32).unwrap();
        let mut counts = [0usize; 4];
        for img in &images {
            counts[img.label.unwrap() as usize] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn identical_seed_reproduces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_synthetic(42, 6, 3, 24).unwrap();
        let b = generate_synthetic(42, 6, 3, 24).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels(), y.pixels());
        }
        write_synthetic_dataset(&dir.path().join("d1"), &a).unwrap();
        write_synthetic_dataset(&dir.path().join("d2"), &b).unwrap();
        for i in 0..6 {
            let name = format!("img_{i:05}.ppm");
            assert_eq!(
                std::fs::read(dir.path().join("d1").join(&name)).unwrap(),
                std::fs::read(dir.path().join("d2").join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn class_count_preconditions() {
        assert!(matches!(generate_synthetic(1, 4, 8, 32), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(1, 4, 1, 32), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(1, 4, 2, 8), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_through_dataset_loader() {
        let dir = tempfile::tempdir().unwrap();
        let images = generate_synthetic(3, 5, 2, 32).unwrap();
        write_synthetic_dataset(dir.path(), &images).unwrap();
        let loaded = io::load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        for (orig, back) in images.iter().zip(&loaded) {
            assert_eq!(orig.label, back.label);
            // loader sees the 8-bit quantized pixels
            for (a, b) in orig.pixels().data().iter().zip(back.pixels().data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
