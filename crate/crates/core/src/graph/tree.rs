//! The decomposed tree network and its structural validation.
//!
//! Node 0 is the root (the input image, depth 0). Every other node is the
//! activation map produced by the conv stage at its depth, applied to its
//! parent's map through the edge filter `e{parent}-{child}`. Leaves sit at
//! the last conv depth and own a GAP + dense head `head{leaf}` that scores
//! the leaf's classes. Global logits concatenate the leaf scores in class
//! order and go through one softmax.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::engine::model::{
    check_batch, check_probe, head_backward, head_forward, logits_grad, record_probe, signature,
    stage_backward, stage_forward, BackwardOptions, ForwardResult, Model, OutputGrad, ProbeSet,
    StageCache,
};
use crate::engine::{ops, GradientStore, LayerSpec, ParamEntry, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph::chain::Architecture;

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

pub fn edge_name(parent: NodeId, child: NodeId) -> String {
    format!("e{parent}-{child}")
}

pub fn head_name(leaf: NodeId) -> String {
    format!("head{leaf}")
}

/// Strictly increasing channel positions into a conventional layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelSelection(Vec<usize>);

impl ChannelSelection {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "channel selection {indices:?} is not strictly increasing"
            )));
        }
        Ok(Self(indices))
    }

    pub fn all(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_full(&self, k: usize) -> bool {
        self.0.len() == k && self.0.iter().enumerate().all(|(i, &c)| i == c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsdNode {
    pub id: NodeId,
    pub layer: usize,
    pub parent: Option<NodeId>,
    /// Sorted global class ids.
    pub classes: Vec<usize>,
    pub channels: ChannelSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsdTree {
    arch: Architecture,
    nodes: BTreeMap<NodeId, HsdNode>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    classes: Vec<usize>,
    params: ParamStore,
}

impl HsdTree {
    /// Assembles a tree. Only referential structure is checked here (a root
    /// with id 0, parents that exist and precede their children, depths
    /// within the chain); class and arity rules are reported by `validate`.
    pub fn new(arch: Architecture, nodes: Vec<HsdNode>, classes: Vec<usize>, params: ParamStore) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in nodes {
            if map.contains_key(&n.id) {
                return Err(Error::Format(format!("duplicate node id {}", n.id)));
            }
            if n.layer > arch.depth() {
                return Err(Error::Format(format!(
                    "node {} at depth {} exceeds chain depth {}",
                    n.id,
                    n.layer,
                    arch.depth()
                )));
            }
            match n.parent {
                None if n.id != ROOT => {
                    return Err(Error::Format(format!("node {} has no parent but is not the root", n.id)))
                }
                Some(p) if p >= n.id || !map.contains_key(&p) => {
                    return Err(Error::Format(format!("node {} references parent {p} which does not precede it", n.id)))
                }
                Some(p) => children.entry(p).or_default().push(n.id),
                None => {}
            }
            map.insert(n.id, n);
        }
        if !map.contains_key(&ROOT) {
            return Err(Error::Format("tree has no root node".into()));
        }
        let mut classes = classes;
        classes.sort_unstable();
        classes.dedup();
        Ok(Self {
            arch,
            nodes: map,
            children,
            classes,
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HsdNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&HsdNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().filter(|&id| self.children(id).is_empty()).collect()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Conv spec of the edge into `id`, sized to the selected channels.
    pub fn node_spec(&self, id: NodeId) -> Option<LayerSpec> {
        let n = self.nodes.get(&id)?;
        let p = self.nodes.get(&n.parent?)?;
        let stage = self.arch.stage(n.layer)?;
        Some(stage.conv.with_channels(p.channels.len(), n.channels.len()))
    }

    pub fn head_spec(&self, leaf: NodeId) -> Option<LayerSpec> {
        let n = self.nodes.get(&leaf)?;
        Some(LayerSpec::dense(n.channels.len(), n.classes.len()))
    }

    /// Root-to-node path, root first.
    pub fn path(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes.get(&cur).and_then(|n| n.parent) {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// True when every edge and leaf head has parameters attached.
    pub fn is_parameterized(&self) -> bool {
        self.missing_params().is_empty()
    }

    pub fn missing_params(&self) -> Vec<String> {
        let mut missing = Vec::new();
        for n in self.nodes.values() {
            if let Some(p) = n.parent {
                let name = edge_name(p, n.id);
                if !self.params.contains(&name) {
                    missing.push(name);
                }
            }
        }
        for l in self.leaves() {
            let name = head_name(l);
            if !self.params.contains(&name) {
                missing.push(name);
            }
        }
        missing
    }

    pub(crate) fn parts(&self) -> (&Architecture, &BTreeMap<NodeId, HsdNode>) {
        (&self.arch, &self.nodes)
    }

    pub fn with_params(mut self, params: ParamStore) -> Self {
        self.params = params;
        self
    }

    /// Output column of every (leaf, row-in-head) pair.
    fn column_map(&self) -> Result<Vec<(NodeId, Vec<usize>)>> {
        let pos: BTreeMap<usize, usize> = self.classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
        let mut covered = vec![false; self.classes.len()];
        let mut out = Vec::new();
        for leaf in self.leaves() {
            let n = &self.nodes[&leaf];
            let mut cols = Vec::with_capacity(n.classes.len());
            for c in &n.classes {
                let j = *pos.get(c).ok_or_else(|| Error::Format(format!("leaf {leaf} scores unknown class {c}")))?;
                if covered[j] {
                    return Err(Error::Format(format!("class {c} is scored by more than one leaf")));
                }
                covered[j] = true;
                cols.push(j);
            }
            out.push((leaf, cols));
        }
        if let Some(j) = covered.iter().position(|c| !c) {
            return Err(Error::Format(format!("class {} is not scored by any leaf", self.classes[j])));
        }
        Ok(out)
    }

    fn param(&self, name: &str) -> Result<&ParamEntry> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Transfer { edge: name.to_string(), reason: "edge has no parameters".into() })
    }
}

impl Model for HsdTree {
    fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape()
    }

    fn output_classes(&self) -> &[usize] {
        &self.classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, batch: &Tensor, probes: Option<&ProbeSet>) -> Result<ForwardResult> {
        check_batch(batch, self.arch.input_shape())?;
        let empty = ProbeSet::new();
        let probes = probes.unwrap_or(&empty);
        for (&site, p) in probes {
            let n = self.nodes.get(&site).filter(|n| n.parent.is_some()).ok_or_else(|| {
                Error::shape(format!("{site} (probe)"), &[], &[site])
            })?;
            check_probe(site, p, n.channels.len())?;
        }
        let columns = self.column_map()?;
        let mut sites: BTreeMap<NodeId, StageCache> = BTreeMap::new();
        for n in self.nodes.values() {
            let Some(p) = n.parent else { continue };
            let x = if p == ROOT { batch } else { &sites[&p].output };
            let stage = self.arch.stage(n.layer).expect("depth checked at construction");
            let spec = self.node_spec(n.id).unwrap();
            let entry = self.param(&edge_name(p, n.id))?;
            if x.dim(1) != spec.in_channels {
                return Err(Error::shape(format!("{} (node {})", n.layer, n.id), &[spec.in_channels], &[x.dim(1)]));
            }
            let cache = stage_forward(x, &spec, entry, stage.pool, probes.get(&n.id).map(Vec::as_slice));
            sites.insert(n.id, cache);
        }
        let batch_n = batch.dim(0);
        let k = self.classes.len();
        let mut logits = vec![0.0; batch_n * k];
        let mut heads = BTreeMap::new();
        for (leaf, cols) in &columns {
            let x = sites.get(leaf).map(|c| &c.output).unwrap_or(batch);
            let head = head_forward(x, self.param(&head_name(*leaf))?);
            let m = cols.len();
            for i in 0..batch_n {
                for (r, &j) in cols.iter().enumerate() {
                    logits[i * k + j] = head.logits.data()[i * m + r];
                }
            }
            heads.insert(*leaf, head);
        }
        let logits = Tensor::new(vec![batch_n, k], logits).unwrap();
        let probs = ops::softmax_forward(&logits);
        Ok(ForwardResult {
            input: batch.clone(),
            sites,
            heads,
            probes: probes.clone(),
            signature: signature(&self.params),
            logits,
            probs,
        })
    }

    fn backward(&self, fwd: &ForwardResult, seed: &OutputGrad, opts: BackwardOptions) -> Result<GradientStore> {
        fwd.check_fresh(&self.params)?;
        if fwd.sites.len() + 1 != self.nodes.len() || fwd.logits.dim(1) != self.classes.len() {
            return Err(Error::StaleForward("forward result was produced by a different network".into()));
        }
        let g_logits = logits_grad(fwd, seed)?;
        let columns = self.column_map()?;
        let (batch_n, k) = (g_logits.dim(0), g_logits.dim(1));
        let mut grads = GradientStore::default();
        let mut pending: BTreeMap<NodeId, Tensor> = BTreeMap::new();
        for (leaf, cols) in &columns {
            let m = cols.len();
            let mut g = vec![0.0; batch_n * m];
            for i in 0..batch_n {
                for (r, &j) in cols.iter().enumerate() {
                    g[i * m + r] = g_logits.data()[i * k + j];
                }
            }
            let g = Tensor::new(vec![batch_n, m], g).unwrap();
            let x = fwd.sites.get(leaf).map(|c| &c.output).unwrap_or(&fwd.input);
            let name = head_name(*leaf);
            let (gx, gp) = head_backward(x.shape(), &fwd.heads[leaf], self.param(&name)?, &g, opts.param_grads);
            if let Some(p) = gp {
                grads.params.insert(name, p);
            }
            pending.insert(*leaf, gx);
        }
        for n in self.nodes.values().rev() {
            let Some(p) = n.parent else { continue };
            let cache = &fwd.sites[&n.id];
            let g = pending.remove(&n.id).unwrap_or_else(|| Tensor::zeros(cache.output.shape()));
            let input = if p == ROOT { &fwd.input } else { &fwd.sites[&p].output };
            let spec = self.node_spec(n.id).unwrap();
            let name = edge_name(p, n.id);
            let probe = fwd.probes.get(&n.id).map(Vec::as_slice);
            let sg = stage_backward(input, cache, &spec, self.param(&name)?, probe, &g, p != ROOT, opts.param_grads);
            if let Some(pg) = sg.params {
                grads.params.insert(name, pg);
            }
            if let Some(gs) = sg.probe {
                record_probe(&mut grads, n.id, gs);
            }
            if let Some(gi) = sg.input {
                match pending.get_mut(&p) {
                    Some(acc) => acc.add_assign(&gi),
                    None => {
                        pending.insert(p, gi);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn count_params(&self) -> u64 {
        let edges: u64 = self.nodes.keys().filter_map(|&id| self.node_spec(id)).map(|s| s.param_count()).sum();
        let heads: u64 = self.leaves().into_iter().filter_map(|l| self.head_spec(l)).map(|s| s.param_count()).sum();
        edges + heads
    }

    fn count_macs(&self, input: [usize; 3]) -> Result<u64> {
        let extents = self.arch.stage_input_extents(input)?;
        let mut total = 0u64;
        for n in self.nodes.values() {
            if let Some(spec) = self.node_spec(n.id) {
                let (h, w) = extents[n.layer - 1];
                total += spec.macs(h, w);
            }
        }
        for l in self.leaves() {
            total += self.head_spec(l).unwrap().macs(1, 1);
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    /// Root is not depth 0, does not hold every class, or slices the input.
    Root,
    /// Class set empty, unsorted, or holding classes outside the tree.
    ClassSet,
    /// Child depth differs from parent depth + 1.
    LayerIndex,
    /// Channel index outside the conventional layer's width.
    ChannelRange,
    /// More than two children, or a childless node above the last depth.
    Arity,
    /// Sibling class sets intersect.
    Overlap,
    /// Children's class sets do not union to the parent's.
    Union,
    /// Leaf class sets do not partition the tree's classes.
    LeafPartition,
    /// Leaf with fewer classes than the minimum.
    MinClasses,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub nodes: Vec<NodeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Nodes without children.
    pub leaf_count: usize,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

pub const MIN_LEAF_CLASSES: usize = 2;

fn fmt_set(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(|c| c.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// Checks the class-partition, arity, depth, and width rules.
pub fn validate_tree(tree: &HsdTree) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |kind, nodes: Vec<NodeId>, message: String| v.push(Violation { kind, nodes, message });
    let (arch, nodes) = tree.parts();
    let universe: BTreeSet<usize> = tree.classes.iter().copied().collect();
    let depth = arch.depth();

    if let Some(root) = nodes.get(&ROOT) {
        if root.layer != 0 {
            push(ViolationKind::Root, vec![ROOT], format!("root at depth {}", root.layer));
        }
        if root.classes != tree.classes {
            push(ViolationKind::Root, vec![ROOT], format!(
                "root classes {} differ from tree classes {}",
                fmt_set(&root.classes),
                fmt_set(&tree.classes)
            ));
        }
        if !root.channels.is_full(arch.width(0)) {
            push(ViolationKind::Root, vec![ROOT], "root must keep every input channel".into());
        }
    }

    for n in nodes.values() {
        if n.classes.is_empty() {
            push(ViolationKind::ClassSet, vec![n.id], format!("empty class set at id={}", n.id));
        }
        if n.classes.windows(2).any(|w| w[0] >= w[1]) {
            push(ViolationKind::ClassSet, vec![n.id], format!("unsorted class set at id={}", n.id));
        }
        if let Some(c) = n.classes.iter().find(|c| !universe.contains(c)) {
            push(ViolationKind::ClassSet, vec![n.id], format!("class {c} at id={} is not in the tree", n.id));
        }
        if let Some(p) = n.parent.and_then(|p| nodes.get(&p)) {
            if n.layer != p.layer + 1 {
                push(ViolationKind::LayerIndex, vec![p.id, n.id], format!(
                    "id={} at depth {} under id={} at depth {}",
                    n.id, n.layer, p.id, p.layer
                ));
            }
        }
        if n.layer > 0 {
            let k = arch.width(n.layer);
            if let Some(&c) = n.channels.indices().iter().find(|&&c| c >= k) {
                push(ViolationKind::ChannelRange, vec![n.id], format!(
                    "channel {c} at id={} exceeds width {k} of layer {}",
                    n.id, n.layer
                ));
            }
        }
        if n.channels.is_empty() {
            push(ViolationKind::ChannelRange, vec![n.id], format!("no channels at id={}", n.id));
        }

        let kids = tree.children(n.id);
        if kids.len() > 2 {
            push(ViolationKind::Arity, vec![n.id], format!("id={} has {} children", n.id, kids.len()));
        }
        if kids.is_empty() && n.layer != depth {
            push(ViolationKind::Arity, vec![n.id], format!(
                "id={} has no children at depth {} < {depth}",
                n.id, n.layer
            ));
        }
        if kids.len() >= 2 {
            for (i, &a) in kids.iter().enumerate() {
                for &b in &kids[i + 1..] {
                    let sa: BTreeSet<_> = nodes[&a].classes.iter().collect();
                    let shared: Vec<usize> = nodes[&b].classes.iter().filter(|c| sa.contains(c)).copied().collect();
                    if !shared.is_empty() {
                        push(ViolationKind::Overlap, vec![n.id, a, b], format!(
                            "overlap at parent id={}: children {a} and {b} share {}",
                            n.id,
                            fmt_set(&shared)
                        ));
                    }
                }
            }
        }
        if !kids.is_empty() {
            let union: BTreeSet<usize> = kids.iter().flat_map(|k| nodes[k].classes.iter().copied()).collect();
            let own: BTreeSet<usize> = n.classes.iter().copied().collect();
            if union != own {
                let u: Vec<usize> = union.into_iter().collect();
                push(ViolationKind::Union, vec![n.id], format!(
                    "children of id={} cover {} instead of {}",
                    n.id,
                    fmt_set(&u),
                    fmt_set(&n.classes)
                ));
            }
        } else if n.classes.len() < MIN_LEAF_CLASSES {
            push(ViolationKind::MinClasses, vec![n.id], format!(
                "leaf id={} has {} class(es), minimum is {MIN_LEAF_CLASSES}",
                n.id,
                n.classes.len()
            ));
        }
    }

    let mut seen: BTreeMap<usize, NodeId> = BTreeMap::new();
    for leaf in tree.leaves() {
        for &c in &nodes[&leaf].classes {
            if let Some(prev) = seen.insert(c, leaf) {
                push(ViolationKind::LeafPartition, vec![prev, leaf], format!(
                    "class {c} appears in leaves {prev} and {leaf}"
                ));
            }
        }
    }
    let missing: Vec<usize> = universe.iter().filter(|c| !seen.contains_key(c)).copied().collect();
    if !missing.is_empty() {
        push(ViolationKind::LeafPartition, vec![], format!("classes {} reach no leaf", fmt_set(&missing)));
    }

    ValidationReport { violations: v, leaf_count: tree.leaves().len() }
}

/// A tree that mirrors the chain exactly: one full-width node per depth.
pub fn chain_shaped_layout(arch: &Architecture) -> HsdTree {
    let classes: Vec<usize> = (0..arch.num_classes()).collect();
    let nodes = (0..=arch.depth())
        .map(|l| HsdNode {
            id: l,
            layer: l,
            parent: l.checked_sub(1),
            classes: classes.clone(),
            channels: ChannelSelection::all(arch.width(l)),
        })
        .collect();
    HsdTree::new(arch.clone(), nodes, classes, ParamStore::new()).expect("chain layout is well formed")
}
