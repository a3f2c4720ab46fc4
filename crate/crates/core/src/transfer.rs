//! Filling tree edges with slices of the trained chain's filters.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Model, ParamEntry, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph::chain::{conv_param_name, HEAD};
use crate::graph::tree::{edge_name, head_name};
use crate::graph::{ChainNet, ChannelSelection, HsdTree};

/// Output and input channels one tree edge takes from a chain layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicePlan {
    pub edge: String,
    pub out_channels: ChannelSelection,
    pub in_channels: ChannelSelection,
}

/// Gathers `filters[o][i]` for the planned output and input channels, and
/// the matching biases. Works for conv filters `[O, I, kh, kw]` and dense
/// weights `[O, I]`.
pub fn transfer_edge(source: &ParamEntry, plan: &SlicePlan) -> Result<ParamEntry> {
    let fail = |reason: String| Error::Transfer { edge: plan.edge.clone(), reason };
    let w = &source.weight;
    if w.rank() != 4 && w.rank() != 2 {
        return Err(fail(format!("source weight has rank {}", w.rank())));
    }
    let (o_total, i_total) = (w.dim(0), w.dim(1));
    let spatial: usize = w.shape()[2..].iter().product();
    if let Some(&o) = plan.out_channels.indices().iter().find(|&&o| o >= o_total) {
        return Err(fail(format!("output channel {o} outside source width {o_total}")));
    }
    if let Some(&i) = plan.in_channels.indices().iter().find(|&&i| i >= i_total) {
        return Err(fail(format!("input channel {i} outside source width {i_total}")));
    }
    if source.bias.len() != o_total {
        return Err(fail(format!("bias has {} entries for {o_total} outputs", source.bias.len())));
    }
    let (no, ni) = (plan.out_channels.len(), plan.in_channels.len());
    let mut data = Vec::with_capacity(no * ni * spatial);
    for &o in plan.out_channels.indices() {
        for &i in plan.in_channels.indices() {
            let start = (o * i_total + i) * spatial;
            data.extend_from_slice(&w.data()[start..start + spatial]);
        }
    }
    let mut shape = vec![no, ni];
    shape.extend_from_slice(&w.shape()[2..]);
    let bias: Vec<f64> = plan.out_channels.indices().iter().map(|&o| source.bias.data()[o]).collect();
    Ok(ParamEntry {
        weight: Tensor::new(shape, data)?,
        bias: Tensor::new(vec![no], bias)?,
    })
}

/// Slice plans for every edge and leaf head of `tree`, paired with the
/// chain parameter each one reads.
pub fn plan_transfer(tree: &HsdTree) -> Result<Vec<(String, SlicePlan)>> {
    let mut plans = Vec::new();
    for n in tree.nodes() {
        let Some(p) = n.parent else { continue };
        let parent = tree.node(p).expect("parent exists");
        plans.push((
            conv_param_name(n.layer),
            SlicePlan {
                edge: edge_name(p, n.id),
                out_channels: n.channels.clone(),
                in_channels: parent.channels.clone(),
            },
        ));
    }
    for leaf in tree.leaves() {
        let n = tree.node(leaf).expect("leaf exists");
        if n.layer != tree.arch().depth() {
            return Err(Error::Transfer {
                edge: head_name(leaf),
                reason: format!("leaf at depth {} is not at the last conv layer", n.layer),
            });
        }
        plans.push((
            HEAD.to_string(),
            SlicePlan {
                edge: head_name(leaf),
                out_channels: ChannelSelection::new(n.classes.clone())?,
                in_channels: n.channels.clone(),
            },
        ));
    }
    Ok(plans)
}

/// Returns `tree` with every edge and head copied out of `chain`.
pub fn transfer_all(chain: &ChainNet, tree: &HsdTree) -> Result<HsdTree> {
    if chain.arch() != tree.arch() {
        return Err(Error::Transfer {
            edge: "*".into(),
            reason: "tree was not built for this chain architecture".into(),
        });
    }
    let mut params = ParamStore::new();
    for (src, plan) in plan_transfer(tree)? {
        let source = chain.params().get(&src).ok_or_else(|| Error::Transfer {
            edge: plan.edge.clone(),
            reason: format!("chain has no parameter {src}"),
        })?;
        params.insert(plan.edge.clone(), transfer_edge(source, &plan)?);
    }
    let out = tree.clone().with_params(params);
    if let Some(edge) = out.missing_params().into_iter().next() {
        return Err(Error::Transfer { edge, reason: "unfilled edge".into() });
    }
    Ok(out)
}

/// Fresh uniform initialization of every edge and head, `U(-b, b)` with
/// `b = 1/sqrt(fan_in)`, edges in node order then heads in leaf order.
pub fn random_init(tree: &HsdTree, seed: u64) -> Result<HsdTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    for n in tree.nodes() {
        if let Some(p) = n.parent {
            specs.push((edge_name(p, n.id), tree.node_spec(n.id)));
        }
    }
    for leaf in tree.leaves() {
        specs.push((head_name(leaf), tree.head_spec(leaf)));
    }
    let mut params = ParamStore::new();
    for (name, spec) in specs {
        let shape = spec
            .and_then(|s| s.weight_shape())
            .ok_or_else(|| Error::Transfer { edge: name.clone(), reason: "edge has no layer spec".into() })?;
        let fan_in: usize = shape[1..].iter().product();
        let b = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-b, b);
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let bias: Vec<f64> = (0..shape[0]).map(|_| dist.sample(&mut rng)).collect();
        let out = shape[0];
        params.insert(
            name,
            ParamEntry {
                weight: Tensor::new(shape, w)?,
                bias: Tensor::new(vec![out], bias)?,
            },
        );
    }
    Ok(tree.clone().with_params(params))
}
