use std::collections::{BTreeSet, VecDeque};

use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::graph::tree::{validate_tree, ROOT};
use crate::graph::{Architecture, ChannelSelection, HsdNode, HsdTree, NodeId};
use crate::sensitivity::{IscvMatrix, IscvSet};

use super::select::{keep_count, select_channels};
use super::ward::{ward_cluster, Side};

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposePolicy {
    /// Depths at which a node may split in two.
    pub clustering_layers: BTreeSet<usize>,
    pub min_classes_per_node: usize,
    /// Fraction of the conventional width a non-trunk node keeps.
    pub keep_fraction: f64,
    /// Nodes still responsible for every class keep the full width.
    pub trunk_full_width: bool,
}

impl DecomposePolicy {
    /// Splits at every layer followed by a pooling step.
    pub fn for_arch(arch: &Architecture) -> Self {
        Self {
            clustering_layers: arch.pool_preceding_layers().into_iter().collect(),
            min_classes_per_node: 2,
            keep_fraction: 0.5,
            trunk_full_width: true,
        }
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.clustering_layers = layers.into_iter().collect();
        self
    }

    /// Conv layers whose score matrices the build may consult.
    pub fn required_iscv_layers(&self, arch: &Architecture) -> Vec<usize> {
        let first = if self.trunk_full_width {
            self.clustering_layers.iter().next().copied().unwrap_or(arch.depth() + 1)
        } else {
            1
        };
        (first.max(1)..=arch.depth()).collect()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if let Some(&l) = self.clustering_layers.iter().find(|&&l| l == 0 || l > arch.depth()) {
            return Err(Error::InvalidArchitecture(format!(
                "clustering layer {l} is outside conv layers 1..={}",
                arch.depth()
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidArchitecture(format!(
                "keep fraction {} must lie in (0, 1]",
                self.keep_fraction
            )));
        }
        if self.min_classes_per_node == 0 {
            return Err(Error::InvalidArchitecture("minimum classes per node must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildSpec {
    pub classes: Vec<usize>,
    pub channels: ChannelSelection,
}

/// Children of a node whose children sit at `child_layer`.
///
/// `iscv` is the score matrix of `child_layer`; it may be `None` only when
/// no child needs channel selection and no split is attempted.
pub fn decompose_node(
    node: NodeId,
    parent_classes: &[usize],
    child_layer: usize,
    width: usize,
    iscv: Option<&IscvMatrix>,
    all_classes: &[usize],
    policy: &DecomposePolicy,
) -> Result<Vec<ChildSpec>> {
    let wrap = |e: Error| match e {
        e @ (Error::AbsentClass { .. } | Error::MissingIscv(_)) => e,
        other => Error::Decomposition { node, reason: other.to_string() },
    };
    let need = || iscv.ok_or(Error::MissingIscv(child_layer));

    let mut groups = vec![parent_classes.to_vec()];
    if policy.clustering_layers.contains(&child_layer) && parent_classes.len() >= 2 {
        let m = need()?;
        let rows: Vec<&[f64]> = parent_classes
            .iter()
            .map(|&c| m.row(c).ok_or(Error::AbsentClass { class: c, layer: child_layer }))
            .collect::<Result<_>>()?;
        let r = ward_cluster(&rows, policy.min_classes_per_node).map_err(wrap)?;
        if !r.merged_to_single {
            groups = [Side::Left, Side::Right]
                .iter()
                .map(|&s| r.members(s).into_iter().map(|i| parent_classes[i]).collect())
                .collect();
        }
    }

    let mut out = Vec::with_capacity(groups.len());
    for classes in groups {
        let channels = if policy.trunk_full_width && classes == all_classes {
            ChannelSelection::all(width)
        } else {
            let m = need()?;
            if m.width() != width {
                return Err(Error::Decomposition {
                    node,
                    reason: format!("iscv for layer {child_layer} has {} channels, layer has {width}", m.width()),
                });
            }
            select_channels(m, &classes, keep_count(width, policy.keep_fraction)).map_err(wrap)?
        };
        out.push(ChildSpec { classes, channels });
    }

    let mut seen = BTreeSet::new();
    for c in out.iter().flat_map(|s| &s.classes) {
        if !seen.insert(*c) {
            return Err(Error::Decomposition { node, reason: format!("class {c} assigned to two children") });
        }
    }
    if !seen.iter().copied().eq(parent_classes.iter().copied()) {
        return Err(Error::Decomposition { node, reason: "children do not cover the parent's classes".into() });
    }
    Ok(out)
}

/// Grows the tree layout breadth first from a full-width root. Node ids are
/// assigned in creation order. The result carries no parameters.
pub fn build_hsd(arch: &Architecture, iscv: &IscvSet, policy: &DecomposePolicy) -> Result<HsdTree> {
    policy.check(arch)?;
    let classes: Vec<usize> = (0..arch.num_classes()).collect();
    if let Some(m) = iscv.values().find(|m| m.num_classes() != classes.len()) {
        return Err(Error::Decomposition {
            node: ROOT,
            reason: format!("iscv for layer {} has {} classes, network has {}", m.layer, m.num_classes(), classes.len()),
        });
    }
    let mut nodes = vec![HsdNode {
        id: ROOT,
        layer: 0,
        parent: None,
        classes: classes.clone(),
        channels: ChannelSelection::all(arch.width(0)),
    }];
    let mut queue = VecDeque::from([ROOT]);
    while let Some(id) = queue.pop_front() {
        let (layer, parent_classes) = (nodes[id].layer, nodes[id].classes.clone());
        if layer == arch.depth() {
            continue;
        }
        let child_layer = layer + 1;
        let specs = decompose_node(
            id,
            &parent_classes,
            child_layer,
            arch.width(child_layer),
            iscv.get(&child_layer),
            &classes,
            policy,
        )?;
        for s in specs {
            let cid = nodes.len();
            nodes.push(HsdNode {
                id: cid,
                layer: child_layer,
                parent: Some(id),
                classes: s.classes,
                channels: s.channels,
            });
            queue.push_back(cid);
        }
    }
    let tree = HsdTree::new(arch.clone(), nodes, classes, ParamStore::new())?;
    let report = validate_tree(&tree);
    if let Some(v) = report.violations.first() {
        return Err(Error::Decomposition { node: v.nodes.first().copied().unwrap_or(ROOT), reason: v.to_string() });
    }
    Ok(tree)
}
