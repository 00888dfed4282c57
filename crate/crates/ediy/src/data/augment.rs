//! The paired-view augmentation pipeline.
//!
//! All randomness comes from a per-view seed, so the pipeline is a pure
//! function of (image, config, seed). Sub-transforms whose drawn parameters
//! are exactly the identity are skipped, which keeps degenerate configs
//! bit-exact identity transforms.

use rand_chacha::ChaCha8Rng;

use crate::data::{AugConfig, Image, ViewPair};
use crate::nn::Tensor;
use crate::rng::{self, stream};

/// Aspect-ratio range of the random resized crop.
const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);
/// BT.601 luma weights, used by grayscale, contrast and saturation.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Two independent augmentation draws from one seed.
pub fn augment_pair(image: &Image, cfg: &AugConfig, seed: u64) -> ViewPair {
    let seed_a = rng::derive(&[seed, stream::VIEW_A]);
    let seed_b = rng::derive(&[seed, stream::VIEW_B]);
    ViewPair {
        view_a: augment_one(image, cfg, seed_a),
        view_b: augment_one(image, cfg, seed_b),
        seed_a,
        seed_b,
    }
}

/// One augmentation draw: crop -> jitter -> grayscale -> blur -> solarize
/// -> flip, each gated by its configured probability.
pub fn augment_one(image: &Image, cfg: &AugConfig, seed: u64) -> Image {
    let mut r = rng::rng_from(&[seed]);
    let mut v = random_resized_crop(image, cfg, &mut r);
    color_jitter(&mut v, cfg.jitter_strength, &mut r);
    if rng::uniform_f64(&mut r, 0.0, 1.0) < cfg.grayscale_prob {
        grayscale(&mut v);
    }
    if rng::uniform_f64(&mut r, 0.0, 1.0) < cfg.blur_prob {
        let sigma = rng::uniform_f64(&mut r, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
        gaussian_blur(&mut v, sigma);
    }
    if rng::uniform_f64(&mut r, 0.0, 1.0) < cfg.solarize_prob {
        solarize(&mut v, cfg.solarize_threshold as f32);
    }
    if rng::uniform_f64(&mut r, 0.0, 1.0) < cfg.hflip_prob {
        hflip(&mut v);
    }
    Image::from_clamped(v, image.label)
}

/// Bilinear resize of the whole image to `size` x `size`; used by loaders
/// and diagnostics where no augmentation is wanted.
pub fn center_resize(image: &Image, size: usize) -> Image {
    let pixels = resize_crop(
        image,
        0.0,
        0.0,
        image.width() as f64,
        image.height() as f64,
        size,
    );
    Image::from_clamped(pixels, image.label)
}

fn random_resized_crop(image: &Image, cfg: &AugConfig, r: &mut ChaCha8Rng) -> Tensor<f32> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let area = w * h;
    let out = cfg.output_size;
    for _ in 0..10 {
        let target = area * rng::uniform_f64(r, cfg.crop_scale_range.0, cfg.crop_scale_range.1);
        let aspect = rng::uniform_f64(r, ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln()).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng::uniform_f64(r, 0.0, w - cw + 1.0).floor().min(w - cw);
            let y0 = rng::uniform_f64(r, 0.0, h - ch + 1.0).floor().min(h - ch);
            return resize_crop(image, x0, y0, cw, ch, out);
        }
    }
    // Fallback: largest crop with the aspect ratio clamped into range,
    // centered.
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < ASPECT_RANGE.0 {
        (w, (w / ASPECT_RANGE.0).round())
    } else if in_ratio > ASPECT_RANGE.1 {
        ((h * ASPECT_RANGE.1).round(), h)
    } else {
        (w, h)
    };
    let x0 = ((w - cw) / 2.0).floor();
    let y0 = ((h - ch) / 2.0).floor();
    resize_crop(image, x0, y0, cw, ch, out)
}

/// Bilinear sample of the crop rect `(x0, y0, cw, ch)` onto an `out` square.
/// A same-size crop is copied directly so identity configs stay bit-exact.
fn resize_crop(image: &Image, x0: f64, y0: f64, cw: f64, ch: f64, out: usize) -> Tensor<f32> {
    let (w, h) = (image.width(), image.height());
    let mut data = vec![0.0f32; 3 * out * out];
    let same = cw as usize == out && ch as usize == out && x0.fract() == 0.0 && y0.fract() == 0.0;
    if same {
        let (xi, yi) = (x0 as usize, y0 as usize);
        for c in 0..3 {
            for oy in 0..out {
                for ox in 0..out {
                    data[(c * out + oy) * out + ox] = image.at(c, yi + oy, xi + ox);
                }
            }
        }
        return Tensor::from_parts(vec![3, out, out], data);
    }
    let sx = cw / out as f64;
    let sy = ch / out as f64;
    for oy in 0..out {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(h - 1);
        let wy = (fy - y_lo as f64) as f32;
        for ox in 0..out {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(w - 1);
            let wx = (fx - x_lo as f64) as f32;
            for c in 0..3 {
                let tl = image.at(c, y_lo, x_lo);
                let tr = image.at(c, y_lo, x_hi);
                let bl = image.at(c, y_hi, x_lo);
                let br = image.at(c, y_hi, x_hi);
                let top = tl + (tr - tl) * wx;
                let bot = bl + (br - bl) * wx;
                data[(c * out + oy) * out + ox] = (top + (bot - top) * wy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, out, out], data)
}

/// Multiplicative brightness/contrast/saturation in `[1-s, 1+s]` plus hue
/// rotation within `+-s*pi/8`, in that order. Identity draws are skipped.
fn color_jitter(pixels: &mut Tensor<f32>, strength: f64, r: &mut ChaCha8Rng) {
    let factor = |r: &mut ChaCha8Rng| rng::uniform_f64(r, 1.0 - strength, 1.0 + strength) as f32;
    let brightness = factor(r);
    let contrast = factor(r);
    let saturation = factor(r);
    let hue = (rng::uniform_f64(r, -strength, strength) * std::f64::consts::PI / 8.0) as f32;

    if brightness != 1.0 {
        for v in pixels.data_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
    }
    if contrast != 1.0 {
        let plane = pixels.len() / 3;
        let mean: f32 = {
            let d = pixels.data();
            let mut acc = 0.0;
            for i in 0..plane {
                acc += LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
            }
            acc / plane as f32
        };
        for v in pixels.data_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
    }
    if saturation != 1.0 {
        let plane = pixels.len() / 3;
        let d = pixels.data_mut();
        for i in 0..plane {
            let gray = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
            for c in 0..3 {
                let v = &mut d[c * plane + i];
                *v = (gray + (*v - gray) * saturation).clamp(0.0, 1.0);
            }
        }
    }
    if hue != 0.0 {
        hue_rotate(pixels, hue);
    }
}

/// Rotates the chroma plane of the YIQ representation by `theta` radians,
/// preserving luma.
fn hue_rotate(pixels: &mut Tensor<f32>, theta: f32) {
    let (cos, sin) = (theta.cos(), theta.sin());
    let plane = pixels.len() / 3;
    let d = pixels.data_mut();
    for i in 0..plane {
        let (red, green, blue) = (d[i], d[plane + i], d[2 * plane + i]);
        let y = 0.299 * red + 0.587 * green + 0.114 * blue;
        let iq_i = 0.595716 * red - 0.274453 * green - 0.321263 * blue;
        let iq_q = 0.211456 * red - 0.522591 * green + 0.311135 * blue;
        let ri = iq_i * cos - iq_q * sin;
        let rq = iq_i * sin + iq_q * cos;
        d[i] = (y + 0.9563 * ri + 0.6210 * rq).clamp(0.0, 1.0);
        d[plane + i] = (y - 0.2721 * ri - 0.6474 * rq).clamp(0.0, 1.0);
        d[2 * plane + i] = (y - 1.1070 * ri + 1.7046 * rq).clamp(0.0, 1.0);
    }
}

fn grayscale(pixels: &mut Tensor<f32>) {
    let plane = pixels.len() / 3;
    let d = pixels.data_mut();
    for i in 0..plane {
        let gray = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
        d[i] = gray;
        d[plane + i] = gray;
        d[2 * plane + i] = gray;
    }
}

/// Separable Gaussian blur with kernel radius `ceil(2*sigma)` and
/// reflected-border padding.
fn gaussian_blur(pixels: &mut Tensor<f32>, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / denom).exp();
        kernel.push(v);
        sum += v;
    }
    let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / sum) as f32).collect();

    let h = pixels.shape()[1];
    let w = pixels.shape()[2];
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..3 {
        let base = c * h * w;
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w);
                    acc += kv * pixels.data()[base + y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h);
                    acc += kv * tmp[sy * w + x];
                }
                pixels.data_mut()[base + y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

/// Values at or above the threshold map to their complement `1 - v`.
fn solarize(pixels: &mut Tensor<f32>, threshold: f32) {
    for v in pixels.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn hflip(pixels: &mut Tensor<f32>) {
    let h = pixels.shape()[1];
    let w = pixels.shape()[2];
    let d = pixels.data_mut();
    for c in 0..3 {
        for y in 0..h {
            let row = (c * h + y) * w;
            d[row..row + w].reverse();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cfg(size: usize) -> AugConfig {
        AugConfig {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            hflip_prob: 0.0,
            output_size: size,
            ..AugConfig::default()
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut r = rng::rng_from(&[seed]);
        let data = (0..3 * h * w).map(|_| r.gen_range(0.0f32..=1.0)).collect();
        Image::new(Tensor::new(vec![3, h, w], data).unwrap(), None).unwrap()
    }

    #[test]
    fn identity_config_returns_resized_source() {
        let img = test_image(32, 32, 1);
        let cfg = identity_cfg(32);
        let pair = augment_pair(&img, &cfg, 99);
        assert_eq!(pair.view_a.pixels(), img.pixels());
        assert_eq!(pair.view_b.pixels(), img.pixels());

        // With an output size different from the source, both views equal the
        // plain resize of the source.
        let cfg = identity_cfg(16);
        let pair = augment_pair(&img, &cfg, 99);
        let resized = center_resize(&img, 16);
        assert_eq!(pair.view_a.pixels(), resized.pixels());
        assert_eq!(pair.view_b.pixels(), resized.pixels());
    }

    #[test]
    fn solarize_maps_above_threshold_to_complement() {
        let mut t = Tensor::new(vec![3, 1, 1], vec![0.9, 0.4, 0.5]).unwrap();
        solarize(&mut t, 0.5);
        assert!((t.data()[0] - 0.1).abs() < 1e-7);
        assert_eq!(t.data()[1], 0.4);
        assert!((t.data()[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn same_inputs_give_identical_views() {
        let img = test_image(40, 28, 2);
        let cfg = AugConfig {
            output_size: 24,
            ..AugConfig::default()
        };
        let p1 = augment_pair(&img, &cfg, 1234);
        let p2 = augment_pair(&img, &cfg, 1234);
        assert_eq!(p1.view_a.pixels(), p2.view_a.pixels());
        assert_eq!(p1.view_b.pixels(), p2.view_b.pixels());
        assert_eq!((p1.seed_a, p1.seed_b), (p2.seed_a, p2.seed_b));
        // different seeds diverge
        let p3 = augment_pair(&img, &cfg, 1235);
        assert_ne!(p1.view_a.pixels(), p3.view_a.pixels());
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = test_image(20, 24, 3);
        let mut once = img.pixels().clone();
        hflip(&mut once);
        assert_ne!(&once, img.pixels());
        hflip(&mut once);
        assert_eq!(&once, img.pixels());
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let img = test_image(16, 16, 4);
        let mut px = img.pixels().clone();
        grayscale(&mut px);
        let plane = 16 * 16;
        for i in 0..plane {
            assert_eq!(px.data()[i], px.data()[plane + i]);
            assert_eq!(px.data()[i], px.data()[2 * plane + i]);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        // 1,000 random (image, cfg, seed) triples; bounds must hold everywhere
        use rand::Rng;
        let mut r = rng::rng_from(&[5]);
        for trial in 0..1000 {
            let img = test_image(16 + trial % 17, 16 + (trial * 3) % 23, trial as u64);
            let cfg = AugConfig {
                crop_scale_range: (r.gen_range(0.1..0.6), 1.0),
                jitter_strength: r.gen_range(0.0..1.0),
                grayscale_prob: 0.5,
                blur_prob: 0.5,
                blur_sigma_range: (0.1, 2.0),
                solarize_prob: 0.5,
                solarize_threshold: r.gen_range(0.0..1.0),
                hflip_prob: 0.5,
                output_size: 16 + trial % 5,
            };
            let pair = augment_pair(&img, &cfg, trial as u64 * 31);
            for view in [&pair.view_a, &pair.view_b] {
                assert_eq!(view.height(), cfg.output_size);
                for &v in view.pixels().data() {
                    assert!(v.is_finite() && (0.0..=1.0).contains(&v), "pixel {v}");
                }
            }
        }
    }
}
