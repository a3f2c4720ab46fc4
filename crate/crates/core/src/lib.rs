//! Decomposes a trained chain CNN into a class-hierarchical tree network
//! using per-class channel sensitivity, and extracts retraining-free
//! subnetworks for class subsets.
//!
//! Pipeline: train a [`ChainNet`], score channels per class with
//! [`sensitivity`], grow the tree layout with [`decomposer`], fill its edges
//! from the chain with [`transfer`], fine-tune with [`trainer`], and carve
//! out subnetworks with [`subnet`].

pub mod container;
pub mod decomposer;
pub mod engine;
pub mod error;
pub mod graph;
pub mod sensitivity;
pub mod subnet;
pub mod trainer;
pub mod transfer;

pub use engine::{
    sgd_step, BackwardOptions, ForwardResult, GradientStore, LayerKind, LayerSpec, Model, OutputGrad,
    ParamEntry, ParamStore, ProbeSet, Tensor,
};
pub use error::{Error, Result};
pub use graph::{
    build_chain, export_dot, validate_tree, Architecture, ChainNet, ChannelSelection, HsdNode, HsdTree,
    NetConfig, NodeId, ValidationReport,
};
pub use container::{load, save, Artifact, ArtifactKind};
pub use decomposer::{build_hsd, ward_cluster, ClusterResult, DecomposePolicy};
pub use sensitivity::{iscv_all_layers, IscvMatrix, IscvSet};
pub use subnet::{compute_metrics, extract_subnetwork, subset_sweep, MetricsReport, SweepRow};
pub use trainer::{evaluate, finetune, train, Dataset, History, Split, SynthSpec, TrainSchedule};
pub use transfer::{transfer_all, SlicePlan};
