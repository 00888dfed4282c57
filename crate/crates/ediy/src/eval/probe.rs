//! Linear probe: a softmax classifier trained on frozen, pooled backbone
//! features measures how much class information the representation keeps.

use serde::Serialize;

use crate::data::{center_resize, Image};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::nn::{ParamSet, Tensor};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
    pub epochs: usize,
}

/// Full-batch gradient descent settings for the probe head.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 200, lr: 0.1 }
    }
}

/// Global-average-pooled backbone features (pre-projector) and labels for
/// every image. Errors if any image lacks a label.
pub fn extract_backbone_features(
    online: &ParamSet<f32>,
    cfg: &ModelConfig,
    view_size: usize,
    images: &[Image],
) -> Result<(Tensor<f32>, Vec<u32>)> {
    if images.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut labels = Vec::with_capacity(images.len());
    let mut features: Vec<f32> = Vec::new();
    let mut dim = 0usize;
    for chunk in images.chunks(32) {
        let resized: Vec<Image> = chunk.iter().map(|i| center_resize(i, view_size)).collect();
        let refs: Vec<&Image> = resized.iter().collect();
        let fmap = model::eval_feature_map(online, cfg, model::image_batch(&refs)?)?;
        let (n, c, area) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2] * fmap.shape()[3]);
        dim = c;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * area;
                let mean: f32 =
                    fmap.data()[base..base + area].iter().sum::<f32>() / area as f32;
                features.push(mean);
            }
            labels.push(chunk[i].label.ok_or_else(|| {
                Error::Config("linear probe requires labels for every image".into())
            })?);
        }
    }
    Ok((
        Tensor::from_parts(vec![labels.len(), dim], features),
        labels,
    ))
}

/// Trains a single linear layer with softmax cross-entropy on the given
/// features under a deterministic 80/20 split.
pub fn probe_on_features(
    features: &Tensor<f32>,
    labels: &[u32],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::dim(
            "linear_probe",
            "features must be (N, D) matching the label count",
        ));
    }
    let classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Config(format!(
            "linear probe needs at least 2 classes, found {distinct}"
        )));
    }
    let total = labels.len();
    let n_train = (total * 4) / 5;
    if n_train == 0 || n_train == total {
        return Err(Error::Config(format!(
            "dataset of {total} images cannot be split 80/20"
        )));
    }
    let order = rng::shuffled_indices(total, &[seed, stream::PROBE]);
    let (train_idx, test_idx) = order.split_at(n_train);

    let dim = features.shape()[1];
    let x = |i: usize| &features.data()[i * dim..(i + 1) * dim];

    // single linear layer, zero init, full-batch softmax cross-entropy
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let inv_m = 1.0 / n_train as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for &i in train_idx {
            let xi = x(i);
            let probs = softmax_logits(&w, &b, xi, classes, dim);
            for k in 0..classes {
                let err = probs[k] - if k as u32 == labels[i] { 1.0 } else { 0.0 };
                gb[k] += err;
                for (d, &xv) in xi.iter().enumerate() {
                    gw[k * dim + d] += err * xv as f64;
                }
            }
        }
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * gv * inv_m;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * gv * inv_m;
        }
    }

    let accuracy = |idx: &[usize]| -> f64 {
        let correct = idx
            .iter()
            .filter(|&&i| {
                let probs = softmax_logits(&w, &b, x(i), classes, dim);
                let pred = probs
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (k, &v)| {
                        if v > bv {
                            (k, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0;
                pred as u32 == labels[i]
            })
            .count();
        correct as f64 / idx.len() as f64
    };

    Ok(ProbeResult {
        train_accuracy: accuracy(train_idx),
        test_accuracy: accuracy(test_idx),
        classes: distinct,
        epochs: cfg.epochs,
    })
}

fn softmax_logits(w: &[f64], b: &[f64], xi: &[f32], classes: usize, dim: usize) -> Vec<f64> {
    let mut logits = vec![0.0f64; classes];
    for k in 0..classes {
        let mut acc = b[k];
        for (d, &xv) in xi.iter().enumerate() {
            acc += w[k * dim + d] * xv as f64;
        }
        logits[k] = acc;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut logits {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut logits {
        *v /= sum;
    }
    logits
}

/// Probe on frozen backbone features of a labeled dataset.
pub fn linear_probe(
    online: &ParamSet<f32>,
    model_cfg: &ModelConfig,
    view_size: usize,
    images: &[Image],
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let (features, labels) = extract_backbone_features(online, model_cfg, view_size, images)?;
    probe_on_features(&features, &labels, probe_cfg, seed)
}
