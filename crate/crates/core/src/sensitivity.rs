//! Class-specific channel impact scores.
//!
//! A probe scale `w_k = 1` multiplies channel `k` of a conv layer. For each
//! training sample of class `c`, the derivative of that sample's softmax
//! probability for `c` with respect to `w_k` measures how much channel `k`
//! drives the prediction. Absolute derivatives are summed over the class's
//! samples and each class row is divided by its maximum.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::engine::{BackwardOptions, Model, OutputGrad, ProbeSet, Tensor};
use crate::error::{Error, Result};
use crate::graph::ChainNet;
use crate::trainer::Dataset;

/// Per-channel probe weights at one layer, all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledLayerProbe {
    pub layer: usize,
    pub weights: Vec<f64>,
}

impl ScaledLayerProbe {
    pub fn new(layer: usize, channels: usize) -> Self {
        Self {
            layer,
            weights: vec![1.0; channels],
        }
    }
}

/// Summed absolute impact scores for one layer, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub layer: usize,
    /// `[classes, channels]`
    pub raw: Tensor,
    pub sample_counts: Vec<usize>,
}

impl RawScores {
    pub fn row(&self, class: usize) -> &[f64] {
        let k = self.raw.dim(1);
        &self.raw.data()[class * k..(class + 1) * k]
    }

    fn present(&self) -> Vec<bool> {
        self.sample_counts.iter().map(|&n| n > 0).collect()
    }
}

/// Normalized and raw scores of one layer. Rows are indexed by global class
/// id; rows of classes without samples are flagged absent.
#[derive(Debug, Clone, PartialEq)]
pub struct IscvMatrix {
    pub layer: usize,
    pub present: Vec<bool>,
    /// `[classes, channels]`, max-normalized per row.
    pub scores: Tensor,
    /// `[classes, channels]`
    pub raw: Tensor,
}

impl IscvMatrix {
    pub fn num_classes(&self) -> usize {
        self.scores.dim(0)
    }

    pub fn width(&self) -> usize {
        self.scores.dim(1)
    }

    /// Normalized row for `class`, `None` when absent.
    pub fn row(&self, class: usize) -> Option<&[f64]> {
        if !*self.present.get(class)? {
            return None;
        }
        let k = self.width();
        Some(&self.scores.data()[class * k..(class + 1) * k])
    }

    pub fn raw_row(&self, class: usize) -> Option<&[f64]> {
        if !*self.present.get(class)? {
            return None;
        }
        let k = self.width();
        Some(&self.raw.data()[class * k..(class + 1) * k])
    }

    /// Builds a matrix from already-normalized rows with every class present.
    pub fn from_scores(layer: usize, scores: Tensor) -> Self {
        let present = vec![true; scores.dim(0)];
        Self {
            layer,
            present,
            raw: scores.clone(),
            scores,
        }
    }
}

pub type IscvSet = BTreeMap<usize, IscvMatrix>;

/// Divides every row by its maximum; all-zero rows stay zero.
pub fn normalize_iscv(raw: &RawScores) -> IscvMatrix {
    let k = raw.raw.dim(1);
    let mut scores = raw.raw.clone();
    for row in scores.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            for v in row.iter_mut() {
                *v /= m;
            }
        }
    }
    IscvMatrix {
        layer: raw.layer,
        present: raw.present(),
        scores,
        raw: raw.raw.clone(),
    }
}

fn check_layers(net: &ChainNet, layers: &[usize]) -> Result<()> {
    for &l in layers {
        if net.arch().stage(l).is_none() {
            return Err(Error::InvalidArchitecture(format!(
                "layer {l} is not a conv layer of this chain (depth {})",
                net.arch().depth()
            )));
        }
    }
    Ok(())
}

/// Raw score tables for several layers from shared forward/backward passes.
pub fn raw_scores_all_layers(
    net: &ChainNet,
    data: &Dataset,
    layers: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, RawScores>> {
    check_layers(net, layers)?;
    let classes = net.arch().num_classes();
    if data.num_classes() != classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, network has {classes}",
            data.num_classes()
        )));
    }
    let mut probes = ProbeSet::new();
    for &l in layers {
        let p = ScaledLayerProbe::new(l, net.arch().width(l));
        probes.insert(p.layer, p.weights);
    }
    let bs = batch_size.max(1);
    let starts: Vec<usize> = (0..data.len()).step_by(bs).collect();
    let partials: Vec<BTreeMap<usize, Vec<f64>>> = starts
        .par_iter()
        .map(|&start| -> Result<BTreeMap<usize, Vec<f64>>> {
            let idx: Vec<usize> = (start..(start + bs).min(data.len())).collect();
            let (batch, labels) = data.gather(&idx);
            let fwd = net.forward(&batch, Some(&probes))?;
            let n = labels.len();
            let mut seed = Tensor::zeros(&[n, classes]);
            for (i, &y) in labels.iter().enumerate() {
                seed.data_mut()[i * classes + y] = 1.0;
            }
            let grads = net.backward(&fwd, &OutputGrad::Probabilities(seed), BackwardOptions { param_grads: false })?;
            let mut out = BTreeMap::new();
            for &l in layers {
                let per = &grads.probes_per_sample[&l];
                let k = per.dim(1);
                let mut table = vec![0.0; classes * k];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &per.data()[i * k..(i + 1) * k];
                    for (t, g) in table[y * k..(y + 1) * k].iter_mut().zip(row) {
                        *t += g.abs();
                    }
                }
                out.insert(l, table);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let counts = data.class_counts();
    let mut result = BTreeMap::new();
    for &l in layers {
        let k = net.arch().width(l);
        let mut table = vec![0.0; classes * k];
        for part in &partials {
            for (t, v) in table.iter_mut().zip(&part[&l]) {
                *t += v;
            }
        }
        result.insert(
            l,
            RawScores {
                layer: l,
                raw: Tensor::new(vec![classes, k], table)?,
                sample_counts: counts.clone(),
            },
        );
    }
    Ok(result)
}

/// Raw impact score table `I[c][k]` of one conv layer.
pub fn impact_scores(net: &ChainNet, data: &Dataset, layer: usize, batch_size: usize) -> Result<RawScores> {
    let mut all = raw_scores_all_layers(net, data, &[layer], batch_size)?;
    Ok(all.remove(&layer).expect("requested layer"))
}

/// Normalized score matrices for every requested layer.
pub fn iscv_all_layers(net: &ChainNet, data: &Dataset, layers: &[usize], batch_size: usize) -> Result<IscvSet> {
    Ok(raw_scores_all_layers(net, data, layers, batch_size)?
        .into_iter()
        .map(|(l, r)| (l, normalize_iscv(&r)))
        .collect())
}
