//! Collapse diagnostics: how alike the region features of each image are,
//! and how much variance the features carry.

use serde::Serialize;

use crate::data::{center_resize, Image};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::nn::tensor::cosine_of_slices;
use crate::nn::{ParamSet, Tensor};
use crate::rng;

const DIAG_STREAM: u64 = 0x0a;

/// Region/instance feature statistics over a sample of images, computed on
/// center-resized inputs with no augmentation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiversityReport {
    /// Mean over images of the mean off-diagonal pairwise cosine between
    /// the image's region features. 1.0 means fully collapsed regions.
    pub mean_pairwise_region_cosine: f64,
    /// Mean per-dimension standard deviation across regions, averaged over
    /// images.
    pub region_feature_std: f64,
    /// Per-dimension standard deviation of instance features across the
    /// sampled images, averaged over dimensions.
    pub global_feature_std: f64,
    pub n_images: usize,
}

/// Statistics of the online branch's local-projector features (the features
/// the region losses act on) over `sample_count` images drawn by `seed`.
pub fn diversity_report(
    online: &ParamSet<f32>,
    cfg: &ModelConfig,
    view_size: usize,
    images: &[Image],
    sample_count: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if images.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if sample_count == 0 || sample_count > images.len() {
        return Err(Error::Precondition(format!(
            "sample_count {sample_count} outside 1..={}",
            images.len()
        )));
    }
    let order = rng::shuffled_indices(images.len(), &[seed, DIAG_STREAM]);
    let sample: Vec<Image> = order[..sample_count]
        .iter()
        .map(|&i| center_resize(&images[i], view_size))
        .collect();

    let mut cos_sum = 0.0f64;
    let mut region_std_sum = 0.0f64;
    let mut globals: Vec<Vec<f32>> = Vec::with_capacity(sample_count);

    for chunk in sample.chunks(32) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let batch = model::image_batch(&refs)?;
        let locals = model::eval_local_rows(online, cfg, batch.clone())?;
        let global = model::eval_global_features(online, cfg, batch)?;
        let n = locals.shape()[0] / chunk.len();
        let dim = locals.shape()[1];
        for (i, _) in chunk.iter().enumerate() {
            let rows = &locals.data()[i * n * dim..(i + 1) * n * dim];
            cos_sum += mean_offdiag_cosine(rows, n, dim);
            region_std_sum += mean_dimension_std(rows, n, dim);
        }
        let gdim = global.shape()[1];
        for i in 0..chunk.len() {
            globals.push(global.data()[i * gdim..(i + 1) * gdim].to_vec());
        }
    }

    let gdim = globals[0].len();
    let mut global_std_sum = 0.0f64;
    for d in 0..gdim {
        let mean: f64 = globals.iter().map(|g| g[d] as f64).sum::<f64>() / globals.len() as f64;
        let var: f64 = globals
            .iter()
            .map(|g| (g[d] as f64 - mean).powi(2))
            .sum::<f64>()
            / globals.len() as f64;
        global_std_sum += var.sqrt();
    }

    Ok(DiversityReport {
        mean_pairwise_region_cosine: cos_sum / sample_count as f64,
        region_feature_std: region_std_sum / sample_count as f64,
        global_feature_std: global_std_sum / gdim as f64,
        n_images: sample_count,
    })
}

fn mean_offdiag_cosine(rows: &[f32], n: usize, dim: usize) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            acc += cosine_of_slices(&rows[j * dim..(j + 1) * dim], &rows[k * dim..(k + 1) * dim])
                as f64;
            count += 1;
        }
    }
    acc / count as f64
}

/// Population standard deviation across regions, per dimension, averaged
/// over dimensions.
fn mean_dimension_std(rows: &[f32], n: usize, dim: usize) -> f64 {
    let mut acc = 0.0f64;
    for d in 0..dim {
        let mean: f64 = (0..n).map(|j| rows[j * dim + d] as f64).sum::<f64>() / n as f64;
        let var: f64 = (0..n)
            .map(|j| (rows[j * dim + d] as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        acc += var.sqrt();
    }
    acc / dim as f64
}

/// Same statistics computed from raw region rows; used by tests and the
/// report itself.
pub fn region_stats(rows: &Tensor<f32>) -> (f64, f64) {
    let (n, dim) = (rows.shape()[0], rows.shape()[1]);
    (
        mean_offdiag_cosine(rows.data(), n, dim),
        mean_dimension_std(rows.data(), n, dim),
    )
}
