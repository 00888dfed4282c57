//! Diagnostics and evaluation: collapse statistics, saliency heatmaps, the
//! linear probe, and the match inspector.

mod diversity;
mod inspect;
mod probe;
mod saliency;

pub use diversity::{diversity_report, region_stats, DiversityReport};
pub use inspect::{match_inspect, AssignmentReport, MatchInspectReport};
pub use probe::{extract_backbone_features, linear_probe, probe_on_features, ProbeConfig, ProbeResult};
pub use saliency::{heatmap_from_feature_map, saliency_map, SaliencyMap};
