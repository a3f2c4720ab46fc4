//! Tree layout construction from per-class channel scores.

pub mod build;
pub mod select;
pub mod ward;

pub use build::{build_hsd, decompose_node, ChildSpec, DecomposePolicy};
pub use select::{aggregate_scores, keep_count, select_channels};
pub use ward::{squared_distance, ward_cluster, ClusterResult, Side};
