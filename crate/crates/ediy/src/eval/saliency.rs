//! Per-location feature-norm heatmaps: a parameter-free view of which
//! regions an encoder responds to.

use crate::data::{center_resize, Image};
use crate::error::Result;
use crate::model::{self, ModelConfig};
use crate::nn::{ParamSet, Tensor};

/// Min-max normalized per-cell feature norms plus the nearest-neighbor
/// render at input resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// `(H_f, W_f)` values in `[0, 1]`.
    pub heatmap: Tensor<f32>,
    /// `(view, view)` nearest-neighbor upsample of the heatmap.
    pub render: Tensor<f32>,
}

/// Heatmap of the online backbone's final feature map on one image.
pub fn saliency_map(
    online: &ParamSet<f32>,
    cfg: &ModelConfig,
    view_size: usize,
    image: &Image,
) -> Result<SaliencyMap> {
    let resized = center_resize(image, view_size);
    let batch = model::image_batch(&[&resized])?;
    let fmap = model::eval_feature_map(online, cfg, batch)?;
    let heatmap = heatmap_from_feature_map(&fmap);
    let render = nearest_upsample(&heatmap, view_size, view_size);
    Ok(SaliencyMap { heatmap, render })
}

/// `heatmap(y, x) = |channel vector at (y, x)|_2`, min-max normalized. An
/// all-zero map stays zero; a constant nonzero map normalizes to all ones.
pub fn heatmap_from_feature_map(fmap: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = match fmap.rank() {
        4 => (fmap.shape()[1], fmap.shape()[2], fmap.shape()[3]),
        _ => (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]),
    };
    let area = h * w;
    let mut norms = vec![0.0f32; area];
    for (s, norm) in norms.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for ch in 0..c {
            let v = fmap.data()[ch * area + s];
            acc += v * v;
        }
        *norm = acc.sqrt();
    }
    let max = norms.iter().cloned().fold(0.0f32, f32::max);
    let min = norms.iter().cloned().fold(f32::INFINITY, f32::min);
    if max == 0.0 {
        return Tensor::from_parts(vec![h, w], norms); // identically zero
    }
    if max == min {
        return Tensor::filled(&[h, w], 1.0);
    }
    let span = max - min;
    for v in &mut norms {
        *v = (*v - min) / span;
    }
    Tensor::from_parts(vec![h, w], norms)
}

fn nearest_upsample(map: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        let sy = (oy * h) / out_h;
        for ox in 0..out_w {
            let sx = (ox * w) / out_w;
            out[oy * out_w + ox] = map.data()[sy * w + sx];
        }
    }
    Tensor::from_parts(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn all_zero_map_stays_zero() {
        let fmap = Tensor::zeros(&[1, 8, 2, 2]);
        let hm = heatmap_from_feature_map(&fmap);
        assert!(hm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_nonzero_cell_is_the_only_peak() {
        let mut fmap = Tensor::zeros(&[1, 4, 2, 2]);
        fmap.data_mut()[4 + 3] = 2.5; // channel 1, cell 3
        let hm = heatmap_from_feature_map(&fmap);
        assert_eq!(hm.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_nonzero_map_normalizes_to_ones() {
        let fmap = Tensor::filled(&[1, 4, 2, 2], 0.5);
        let hm = heatmap_from_feature_map(&fmap);
        assert!(hm.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn heatmap_matches_per_cell_norm_oracle_and_scale_invariance() {
        use rand::Rng;
        let mut r = crate::rng::rng_from(&[41]);
        let data: Vec<f32> = (0..6 * 9).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let fmap = Tensor::new(vec![1, 6, 3, 3], data.clone()).unwrap();
        let hm = heatmap_from_feature_map(&fmap);
        // oracle
        let mut norms = [0.0f32; 9];
        for s in 0..9 {
            norms[s] = (0..6).map(|c| data[c * 9 + s] * data[c * 9 + s]).sum::<f32>().sqrt();
        }
        let (min, max) = (
            norms.iter().cloned().fold(f32::INFINITY, f32::min),
            norms.iter().cloned().fold(0.0f32, f32::max),
        );
        for s in 0..9 {
            assert_relative_eq!(hm.data()[s], (norms[s] - min) / (max - min), epsilon = 1e-6);
        }
        // positive rescaling leaves the map unchanged
        let scaled = Tensor::new(vec![1, 6, 3, 3], data.iter().map(|v| v * 3.5).collect()).unwrap();
        let hm2 = heatmap_from_feature_map(&scaled);
        for (a, b) in hm.data().iter().zip(hm2.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
        for &v in hm.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn upsample_replicates_cells() {
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let up = nearest_upsample(&map, 4, 4);
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[3], 1.0);
        assert_eq!(up.data()[12], 0.5);
        assert_eq!(up.data()[15], 0.25);
    }
}
