//! Region-pair selection: teacher-guided similarity ranking plus the random
//! and cross-instance ablation samplers.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FeatureSource, GlobalFeature, RegionFeatureSet};
use crate::nn::tensor::{cosine_of_slices, Tensor};
use crate::rng;

/// Pairwise cosine similarities between two region sets.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// `(n_query, n_key)` cosine values.
    pub values: Tensor<f32>,
    pub query_source: FeatureSource,
    pub key_source: FeatureSource,
}

impl SimilarityMatrix {
    pub fn at(&self, query: usize, key: usize) -> f32 {
        self.values.data()[query * self.values.shape()[1] + key]
    }
}

/// How a [`MatchAssignment`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    MostDissimilarWithinView,
    MostSimilarCrossView,
    RandomRegion,
    RandomInstanceGlobal,
}

/// Per-region index of the selected counterpart region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchAssignment {
    pub indices: Vec<usize>,
    pub mode: AssignMode,
    /// Seed used, for the random modes.
    pub seed: Option<u64>,
}

/// Entry `(j, z) = cos(queries[j], keys[z])`.
pub fn similarity_matrix(
    queries: &RegionFeatureSet,
    keys: &RegionFeatureSet,
) -> Result<SimilarityMatrix> {
    if queries.dim() != keys.dim() {
        return Err(Error::dim(
            "similarity_matrix",
            format!("feature dims differ: {} vs {}", queries.dim(), keys.dim()),
        ));
    }
    let (nq, nk) = (queries.count(), keys.count());
    let mut values = vec![0.0f32; nq * nk];
    for j in 0..nq {
        let q = queries.rows.row(j);
        for z in 0..nk {
            values[j * nk + z] = cosine_of_slices(q, keys.rows.row(z));
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::from_parts(vec![nq, nk], values),
        query_source: queries.source,
        key_source: keys.source,
    })
}

/// For each region `j`, the argmin over `z != j` of within-view similarity;
/// ties break toward the lowest index.
pub fn find_most_dissimilar(regions: &RegionFeatureSet) -> Result<MatchAssignment> {
    let n = regions.count();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 regions for within-view matching, got {n}"
        )));
    }
    let sim = similarity_matrix(regions, regions)?;
    let mut indices = Vec::with_capacity(n);
    for j in 0..n {
        let mut best = usize::MAX;
        let mut best_sim = f32::INFINITY;
        for z in 0..n {
            if z == j {
                continue;
            }
            let s = sim.at(j, z);
            if s < best_sim {
                best_sim = s;
                best = z;
            }
        }
        indices.push(best);
    }
    Ok(MatchAssignment {
        indices,
        mode: AssignMode::MostDissimilarWithinView,
        seed: None,
    })
}

/// For each query region `j` of view a, the argmax over view-b regions `z`;
/// ties break toward the lowest index.
pub fn find_most_similar(
    queries_view_a: &RegionFeatureSet,
    keys_view_b: &RegionFeatureSet,
) -> Result<MatchAssignment> {
    if keys_view_b.count() == 0 {
        return Err(Error::Precondition("key view holds no regions".into()));
    }
    let sim = similarity_matrix(queries_view_a, keys_view_b)?;
    let (nq, nk) = (queries_view_a.count(), keys_view_b.count());
    let mut indices = Vec::with_capacity(nq);
    for j in 0..nq {
        let mut best = 0usize;
        let mut best_sim = f32::NEG_INFINITY;
        for z in 0..nk {
            let s = sim.at(j, z);
            if s > best_sim {
                best_sim = s;
                best = z;
            }
        }
        indices.push(best);
    }
    Ok(MatchAssignment {
        indices,
        mode: AssignMode::MostSimilarCrossView,
        seed: None,
    })
}

/// Whether random region draws exclude the query's own index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomRegionMode {
    WithinView,
    CrossView,
}

/// Uniform counterpart draws; the within-view mode never self-matches.
pub fn sample_random_regions(
    n_query: usize,
    n_key: usize,
    mode: RandomRegionMode,
    seed: u64,
) -> Result<MatchAssignment> {
    if n_key == 0 || (mode == RandomRegionMode::WithinView && n_key < 2) {
        return Err(Error::Precondition(format!(
            "random region sampling needs n_key >= {} (got {n_key})",
            if mode == RandomRegionMode::WithinView { 2 } else { 1 }
        )));
    }
    let mut r = rng::rng_from(&[seed]);
    let indices = (0..n_query)
        .map(|j| match mode {
            RandomRegionMode::CrossView => r.gen_range(0..n_key),
            RandomRegionMode::WithinView => {
                // draw over the other n_key - 1 indices
                let draw = r.gen_range(0..n_key - 1);
                if draw >= j {
                    draw + 1
                } else {
                    draw
                }
            }
        })
        .collect();
    Ok(MatchAssignment {
        indices,
        mode: AssignMode::RandomRegion,
        seed: Some(seed),
    })
}

/// For each region of the anchor image, a global feature drawn uniformly
/// from the other images of the batch.
#[derive(Debug, Clone)]
pub struct InstanceNegative {
    /// `(n, D)` donor features, one per region.
    pub donors: Tensor<f32>,
    pub donor_indices: Vec<usize>,
    pub anchor: usize,
    pub seed: u64,
}

/// `batch_globals` is the `(B, D)` matrix of per-image global features.
pub fn sample_instance_negatives(
    batch_globals: &GlobalFeature,
    anchor: usize,
    n: usize,
    seed: u64,
) -> Result<InstanceNegative> {
    if batch_globals.rank() != 2 {
        return Err(Error::dim("instance_negatives", "batch globals must be (B, D)"));
    }
    let batch = batch_globals.shape()[0];
    let dim = batch_globals.shape()[1];
    if batch < 2 {
        return Err(Error::Precondition(
            "instance negatives need a batch of at least 2 images".into(),
        ));
    }
    if anchor >= batch {
        return Err(Error::Precondition(format!(
            "anchor {anchor} out of range for batch {batch}"
        )));
    }
    let mut r = rng::rng_from(&[seed]);
    let mut donor_indices = Vec::with_capacity(n);
    let mut donors = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let draw = r.gen_range(0..batch - 1);
        let donor = if draw >= anchor { draw + 1 } else { draw };
        donor_indices.push(donor);
        donors.extend_from_slice(batch_globals.row(donor));
    }
    Ok(InstanceNegative {
        donors: Tensor::from_parts(vec![n, dim], donors),
        donor_indices,
        anchor,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regions(rows: Vec<Vec<f32>>) -> RegionFeatureSet {
        let n = rows.len();
        let d = rows[0].len();
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        RegionFeatureSet::new(Tensor::new(vec![n, d], data).unwrap(), FeatureSource::Teacher)
            .unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity_similarity() {
        let r = regions(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sim = similarity_matrix(&r, &r).unwrap();
        assert!((sim.at(0, 0) - 1.0).abs() < 1e-6);
        assert!((sim.at(1, 1) - 1.0).abs() < 1e-6);
        assert!(sim.at(0, 1).abs() < 1e-6);
        assert!(sim.at(1, 0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_rows_have_unit_similarity() {
        let q = regions(vec![vec![0.3, -0.7], vec![0.3, -0.7]]);
        let sim = similarity_matrix(&q, &q).unwrap();
        for j in 0..2 {
            for z in 0..2 {
                assert!((sim.at(j, z) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_a_dimension_error() {
        let q = regions(vec![vec![1.0, 0.0]]);
        let k = regions(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            similarity_matrix(&q, &k),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn two_orthogonal_regions_map_to_each_other() {
        let r = regions(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = find_most_dissimilar(&r).unwrap();
        assert_eq!(a.indices, vec![1, 0]);
        assert_eq!(a.mode, AssignMode::MostDissimilarWithinView);
    }

    #[test]
    fn identical_rows_tie_break_to_lowest_non_self_index() {
        let r = regions(vec![vec![1.0, 1.0]; 4]);
        let a = find_most_dissimilar(&r).unwrap();
        assert_eq!(a.indices, vec![1, 0, 0, 0]);
    }

    #[test]
    fn three_row_case_matches_brute_force() {
        let r = regions(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let a = find_most_dissimilar(&r).unwrap();
        assert_eq!(a.indices, vec![2, 0, 0]);
    }

    #[test]
    fn self_match_when_views_coincide() {
        let rows = vec![vec![1.0, 0.2], vec![-0.4, 1.0], vec![0.6, -0.9]];
        let a = regions(rows.clone());
        let b = regions(rows);
        let m = find_most_similar(&a, &b).unwrap();
        assert_eq!(m.indices, vec![0, 1, 2]);
        assert_eq!(m.mode, AssignMode::MostSimilarCrossView);
    }

    #[test]
    fn identical_keys_tie_break_to_index_zero() {
        let q = regions(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = regions(vec![vec![0.5, 0.5]; 3]);
        let m = find_most_similar(&q, &k).unwrap();
        assert_eq!(m.indices, vec![0, 0]);
    }

    #[test]
    fn n_below_two_is_a_precondition_error() {
        let r = regions(vec![vec![1.0, 0.0]]);
        assert!(matches!(
            find_most_dissimilar(&r),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn within_view_with_two_keys_is_forced_to_the_other_index() {
        let a = sample_random_regions(2, 2, RandomRegionMode::WithinView, 5).unwrap();
        assert_eq!(a.indices, vec![1, 0]);
        assert_eq!(a.seed, Some(5));
    }

    #[test]
    fn random_sampling_is_deterministic_and_never_self_matches() {
        let a = sample_random_regions(16, 16, RandomRegionMode::WithinView, 9).unwrap();
        let b = sample_random_regions(16, 16, RandomRegionMode::WithinView, 9).unwrap();
        assert_eq!(a, b);
        for (j, &z) in a.indices.iter().enumerate() {
            assert_ne!(j, z);
            assert!(z < 16);
        }
    }

    #[test]
    fn batch_of_two_forces_the_other_donor() {
        let globals = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let neg = sample_instance_negatives(&globals, 0, 4, 3).unwrap();
        assert_eq!(neg.donor_indices, vec![1, 1, 1, 1]);
        assert_eq!(neg.donors.row(2), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            sample_instance_negatives(
                &Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap(),
                0,
                4,
                3
            ),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn assignments_invariant_to_positive_row_rescaling() {
        use rand::Rng;
        let mut r = rng::rng_from(&[77]);
        for trial in 0..20 {
            let n = 6;
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let base = regions(rows.clone());
            let scaled = regions(
                rows.iter()
                    .map(|row| {
                        let alpha: f32 = r.gen_range(0.1..10.0);
                        row.iter().map(|v| v * alpha).collect()
                    })
                    .collect(),
            );
            let _ = trial;
            assert_eq!(
                find_most_dissimilar(&base).unwrap().indices,
                find_most_dissimilar(&scaled).unwrap().indices
            );
            assert_eq!(
                find_most_similar(&base, &base).unwrap().indices,
                find_most_similar(&scaled, &scaled).unwrap().indices
            );
        }
    }
}
