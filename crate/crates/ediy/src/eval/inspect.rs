//! Match inspector: serializes the region assignments and similarity
//! matrices a teacher produces for one image's view pair.

use serde::Serialize;

use crate::data::{augment_pair, AugConfig, Image};
use crate::error::Result;
use crate::matching::{
    find_most_dissimilar, find_most_similar, similarity_matrix, AssignMode, MatchAssignment,
    SimilarityMatrix,
};
use crate::model::{teacher_regions_batch, ModelConfig, RegionFeatureSet};
use crate::nn::ParamSet;

/// One assignment with its full similarity matrix.
#[derive(Debug, Clone, Serialize)]
pub struct AssignmentReport {
    pub mode: AssignMode,
    pub indices: Vec<usize>,
    pub similarities: Vec<Vec<f32>>,
}

impl AssignmentReport {
    fn new(assign: MatchAssignment, sim: &SimilarityMatrix) -> Self {
        let (nq, nk) = (sim.values.shape()[0], sim.values.shape()[1]);
        let similarities = (0..nq)
            .map(|j| sim.values.data()[j * nk..(j + 1) * nk].to_vec())
            .collect();
        AssignmentReport {
            mode: assign.mode,
            indices: assign.indices,
            similarities,
        }
    }
}

/// Teacher-guided assignments for both views of one image: within-view
/// most-dissimilar pairs for each view, and most-similar pairs in both
/// cross-view directions.
#[derive(Debug, Clone, Serialize)]
pub struct MatchInspectReport {
    pub grid: (usize, usize),
    pub aug_seed: u64,
    pub rdem_view_a: AssignmentReport,
    pub rdem_view_b: AssignmentReport,
    pub riem_a_to_b: AssignmentReport,
    pub riem_b_to_a: AssignmentReport,
}

pub fn match_inspect(
    teacher: &ParamSet<f32>,
    model_cfg: &ModelConfig,
    aug: &AugConfig,
    image: &Image,
    seed: u64,
) -> Result<MatchInspectReport> {
    let pair = augment_pair(image, aug, seed);
    let regions = teacher_regions_batch(teacher, model_cfg, &[&pair.view_a, &pair.view_b])?;
    let (ra, rb): (&RegionFeatureSet, &RegionFeatureSet) = (&regions[0], &regions[1]);
    let grid = model_cfg.encoder.grid(aug.output_size, aug.output_size)?;

    let sim_aa = similarity_matrix(ra, ra)?;
    let sim_bb = similarity_matrix(rb, rb)?;
    let sim_ab = similarity_matrix(ra, rb)?;
    let sim_ba = similarity_matrix(rb, ra)?;

    Ok(MatchInspectReport {
        grid,
        aug_seed: seed,
        rdem_view_a: AssignmentReport::new(find_most_dissimilar(ra)?, &sim_aa),
        rdem_view_b: AssignmentReport::new(find_most_dissimilar(rb)?, &sim_bb),
        riem_a_to_b: AssignmentReport::new(find_most_similar(ra, rb)?, &sim_ab),
        riem_b_to_a: AssignmentReport::new(find_most_similar(rb, ra)?, &sim_ba),
    })
}
