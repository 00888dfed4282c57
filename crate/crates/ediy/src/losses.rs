//! The three loss components and their weighted composition.
//!
//! Each loss exists twice: as a graph builder used by training (generic over
//! precision, differentiable), and as a value-level operation on the domain
//! types that builds a 64-bit graph internally — one implementation path for
//! both training and verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{AssignMode, InstanceNegative, MatchAssignment};
use crate::model::{FeatureSource, GlobalFeature, RegionFeatureSet};
use crate::nn::graph::{Graph, VarId};
use crate::nn::tensor::{Scalar, Tensor};

/// Loss weights: `lambda1` scales the region diversity term, `lambda2` the
/// region invariance term, `lambda3` the instance alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        LossWeights { lambda1, lambda2, lambda3 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted component values, the weights, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub byol: f64,
    pub rdem: f64,
    pub riem: f64,
    pub weights: LossWeights,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// Instance alignment: `4 - 2 mean cos(f_a, g_b) - 2 mean cos(g_a, f_b)`
/// over the batch rows. `f_*` are online predictor outputs, `g_*` target
/// projector outputs (entered as constants by the caller).
pub fn byol_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    f_a: VarId,
    g_b: VarId,
    g_a: VarId,
    f_b: VarId,
) -> Result<VarId> {
    let c1 = g.cosine_rows(f_a, g_b)?;
    let c2 = g.cosine_rows(g_a, f_b)?;
    let m1 = g.mean_all(c1);
    let m2 = g.mean_all(c2);
    let s = g.weighted_sum(&[(m1, -2.0), (m2, -2.0)])?;
    Ok(g.affine(s, 1.0, 4.0))
}

/// Region diversity: per view, the mean cosine between each online region
/// row and its assigned most-dissimilar row, summed over both views; no
/// additive constant, so the value lives in `[-2, 2]` and minimization
/// pushes matched pairs toward cosine -1. Gradients flow into both rows of
/// each pair.
pub fn rdem_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    local_a: VarId,
    idx_a: &[usize],
    local_b: VarId,
    idx_b: &[usize],
) -> Result<VarId> {
    let ga = g.gather_rows(local_a, idx_a.to_vec())?;
    let ca = g.cosine_rows(local_a, ga)?;
    let ma = g.mean_all(ca);
    let gb = g.gather_rows(local_b, idx_b.to_vec())?;
    let cb = g.cosine_rows(local_b, gb)?;
    let mb = g.mean_all(cb);
    g.add(ma, mb)
}

/// Cross-instance ablation of the diversity term: each region's counterpart
/// is a donor global feature from another image (stop-gradient).
pub fn rdem_instance_graph<T: Scalar>(
    g: &mut Graph<T>,
    local_a: VarId,
    donors_a: VarId,
    local_b: VarId,
    donors_b: VarId,
) -> Result<VarId> {
    let ca = g.cosine_rows(local_a, donors_a)?;
    let ma = g.mean_all(ca);
    let cb = g.cosine_rows(local_b, donors_b)?;
    let mb = g.mean_all(cb);
    g.add(ma, mb)
}

/// Region invariance: `2 - mean cos(f^l(a), g^l(b)[match]) - mean
/// cos(f^l(b), g^l(a)[match])`; target rows are constants, so gradients flow
/// only into the online rows.
pub fn riem_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    online_a: VarId,
    target_b: VarId,
    idx_a: &[usize],
    online_b: VarId,
    target_a: VarId,
    idx_b: &[usize],
) -> Result<VarId> {
    let matched_b = g.gather_rows(target_b, idx_a.to_vec())?;
    let c1 = g.cosine_rows(online_a, matched_b)?;
    let m1 = g.mean_all(c1);
    let matched_a = g.gather_rows(target_a, idx_b.to_vec())?;
    let c2 = g.cosine_rows(online_b, matched_a)?;
    let m2 = g.mean_all(c2);
    let s = g.weighted_sum(&[(m1, -1.0), (m2, -1.0)])?;
    Ok(g.affine(s, 1.0, 2.0))
}

// ---------------------------------------------------------------------------
// value-level operations on the domain types
// ---------------------------------------------------------------------------

fn as_rows(v: &GlobalFeature, what: &str) -> Result<Tensor<f64>> {
    match v.rank() {
        1 => Ok(v.cast::<f64>().reshaped(vec![1, v.len()])?),
        2 => Ok(v.cast::<f64>()),
        r => Err(Error::dim(what, format!("rank {r} feature, expected vector or (N, D)"))),
    }
}

/// Value of the instance alignment loss; accepts single vectors or batches.
pub fn byol_loss(
    f_a: &GlobalFeature,
    g_b: &GlobalFeature,
    g_a: &GlobalFeature,
    f_b: &GlobalFeature,
) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let fa = g.constant(as_rows(f_a, "byol_loss")?);
    let gb = g.constant(as_rows(g_b, "byol_loss")?);
    let ga = g.constant(as_rows(g_a, "byol_loss")?);
    let fb = g.constant(as_rows(f_b, "byol_loss")?);
    let loss = byol_loss_graph(&mut g, fa, gb, ga, fb)?;
    Ok(g.value(loss).scalar_value())
}

fn check_within_view_assignment(
    assign: &MatchAssignment,
    regions: &RegionFeatureSet,
    what: &str,
) -> Result<()> {
    if !matches!(
        assign.mode,
        AssignMode::MostDissimilarWithinView | AssignMode::RandomRegion
    ) {
        return Err(Error::Usage(format!(
            "{what} requires a within-view assignment, got {:?}",
            assign.mode
        )));
    }
    if assign.indices.len() != regions.count() {
        return Err(Error::Usage(format!(
            "{what}: assignment length {} != region count {}",
            assign.indices.len(),
            regions.count()
        )));
    }
    Ok(())
}

fn check_source(set: &RegionFeatureSet, expect: FeatureSource, what: &str) -> Result<()> {
    if set.source != expect {
        return Err(Error::Usage(format!(
            "{what}: expected {expect:?} features, got {:?}",
            set.source
        )));
    }
    Ok(())
}

/// Value of the region diversity loss for one view pair.
pub fn rdem_loss(
    local_a: &RegionFeatureSet,
    assign_a: &MatchAssignment,
    local_b: &RegionFeatureSet,
    assign_b: &MatchAssignment,
) -> Result<f64> {
    check_source(local_a, FeatureSource::Online, "rdem_loss")?;
    check_source(local_b, FeatureSource::Online, "rdem_loss")?;
    check_within_view_assignment(assign_a, local_a, "rdem_loss")?;
    check_within_view_assignment(assign_b, local_b, "rdem_loss")?;
    let mut g: Graph<f64> = Graph::new();
    let la = g.constant(local_a.rows.cast());
    let lb = g.constant(local_b.rows.cast());
    let loss = rdem_loss_graph(&mut g, la, &assign_a.indices, lb, &assign_b.indices)?;
    Ok(g.value(loss).scalar_value())
}

/// Value of the cross-instance diversity ablation. Requires the region and
/// global feature widths to match.
pub fn rdem_instance_variant(
    local_a: &RegionFeatureSet,
    local_b: &RegionFeatureSet,
    negatives_a: &InstanceNegative,
    negatives_b: &InstanceNegative,
) -> Result<f64> {
    check_source(local_a, FeatureSource::Online, "rdem_instance_variant")?;
    check_source(local_b, FeatureSource::Online, "rdem_instance_variant")?;
    for (set, neg) in [(local_a, negatives_a), (local_b, negatives_b)] {
        if set.dim() != neg.donors.shape()[1] {
            return Err(Error::Config(format!(
                "cross-instance sampling requires equal region and global widths (D_l = D_g), got {} vs {}",
                set.dim(),
                neg.donors.shape()[1]
            )));
        }
        if set.count() != neg.donors.shape()[0] {
            return Err(Error::Usage(format!(
                "rdem_instance_variant: {} donors for {} regions",
                neg.donors.shape()[0],
                set.count()
            )));
        }
    }
    let mut g: Graph<f64> = Graph::new();
    let la = g.constant(local_a.rows.cast());
    let da = g.constant(negatives_a.donors.cast());
    let lb = g.constant(local_b.rows.cast());
    let db = g.constant(negatives_b.donors.cast());
    let loss = rdem_instance_graph(&mut g, la, da, lb, db)?;
    Ok(g.value(loss).scalar_value())
}

/// Value of the region invariance loss for one view pair.
pub fn riem_loss(
    local_f_a: &RegionFeatureSet,
    local_g_b: &RegionFeatureSet,
    assign_a: &MatchAssignment,
    local_f_b: &RegionFeatureSet,
    local_g_a: &RegionFeatureSet,
    assign_b: &MatchAssignment,
) -> Result<f64> {
    check_source(local_f_a, FeatureSource::Online, "riem_loss")?;
    check_source(local_f_b, FeatureSource::Online, "riem_loss")?;
    check_source(local_g_a, FeatureSource::Target, "riem_loss")?;
    check_source(local_g_b, FeatureSource::Target, "riem_loss")?;
    for (assign, what) in [(assign_a, "assign_a"), (assign_b, "assign_b")] {
        if !matches!(
            assign.mode,
            AssignMode::MostSimilarCrossView | AssignMode::RandomRegion
        ) {
            return Err(Error::Usage(format!(
                "riem_loss {what} requires a cross-view assignment, got {:?}",
                assign.mode
            )));
        }
    }
    if assign_a.indices.len() != local_f_a.count() || assign_b.indices.len() != local_f_b.count()
    {
        return Err(Error::Usage("riem_loss: assignment length != region count".into()));
    }
    let mut g: Graph<f64> = Graph::new();
    let fa = g.constant(local_f_a.rows.cast());
    let gb = g.constant(local_g_b.rows.cast());
    let fb = g.constant(local_f_b.rows.cast());
    let ga = g.constant(local_g_a.rows.cast());
    let loss = riem_loss_graph(&mut g, fa, gb, &assign_a.indices, fb, ga, &assign_b.indices)?;
    Ok(g.value(loss).scalar_value())
}

/// Weighted composition `total = l1*rdem + l2*riem + l3*byol`, recording the
/// unweighted components.
pub fn composite_loss(
    byol: f64,
    rdem: f64,
    riem: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [("byol", byol), ("rdem", rdem), ("riem", riem)] {
        if !v.is_finite() {
            return Err(Error::numeric(
                format!("loss component {name}"),
                format!("non-finite value {v}"),
            ));
        }
    }
    Ok(LossBreakdown {
        byol,
        rdem,
        riem,
        weights,
        total: weights.lambda1 * rdem + weights.lambda2 * riem + weights.lambda3 * byol,
    })
}
