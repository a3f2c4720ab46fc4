//! Chain and tree network graphs, validation, and DOT export.

pub mod chain;
pub mod dot;
pub mod tree;

pub use chain::{build_chain, Architecture, ChainNet, NetConfig, Stage};
pub use dot::export_dot;
pub use tree::{validate_tree, ChannelSelection, HsdNode, HsdTree, NodeId, ValidationReport, Violation, ViolationKind};
