//! Retraining-free subnetworks for class subsets, efficiency metrics, and
//! subset sweeps.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Model, ParamStore};
use crate::error::{Error, Result};
use crate::graph::tree::{edge_name, head_name};
use crate::graph::{HsdNode, HsdTree};
use crate::trainer::{evaluate, Dataset};

fn check_subset(tree: &HsdTree, subset: &[usize]) -> Result<BTreeSet<usize>> {
    if subset.is_empty() {
        return Err(Error::InvalidSubset("subset is empty".into()));
    }
    let set: BTreeSet<usize> = subset.iter().copied().collect();
    if let Some(c) = set.iter().find(|c| !tree.classes().contains(c)) {
        return Err(Error::InvalidSubset(format!("class {c} is not in the tree")));
    }
    Ok(set)
}

/// Keeps the root-to-leaf paths of every leaf scoring a class in `subset`,
/// with their original ids and parameters. Node class sets are narrowed to
/// the classes of the kept leaves, which may include classes outside the
/// subset that share a leaf with one inside it.
pub fn extract_subnetwork(tree: &HsdTree, subset: &[usize]) -> Result<HsdTree> {
    let set = check_subset(tree, subset)?;
    let leaves: Vec<usize> = tree
        .leaves()
        .into_iter()
        .filter(|&l| tree.node(l).expect("leaf").classes.iter().any(|c| set.contains(c)))
        .collect();
    let kept: BTreeSet<usize> = leaves.iter().flat_map(|&l| tree.path(l)).collect();
    let classes: BTreeSet<usize> = leaves
        .iter()
        .flat_map(|&l| tree.node(l).expect("leaf").classes.iter().copied())
        .collect();

    let mut params = ParamStore::new();
    let mut nodes = Vec::with_capacity(kept.len());
    for &id in &kept {
        let n = tree.node(id).expect("kept node");
        if let Some(p) = n.parent {
            let name = edge_name(p, id);
            if let Some(e) = tree.params().get(&name) {
                params.insert(name, e.clone());
            }
        }
        nodes.push(HsdNode {
            classes: n.classes.iter().copied().filter(|c| classes.contains(c)).collect(),
            ..n.clone()
        });
    }
    for &l in &leaves {
        let name = head_name(l);
        if let Some(e) = tree.params().get(&name) {
            params.insert(name, e.clone());
        }
    }
    HsdTree::new(tree.arch().clone(), nodes, classes.into_iter().collect(), params)
}

/// Parameter compression rate `a / a*`.
pub fn compression_rate(base_params: u64, reduced_params: u64) -> f64 {
    base_params as f64 / reduced_params as f64
}

/// Fraction of multiply-accumulates saved, `(n - n*) / n`.
pub fn saved_computations(base_macs: u64, reduced_macs: u64) -> f64 {
    (base_macs as f64 - reduced_macs as f64) / base_macs as f64
}

/// Latency ratio `s / s*`.
pub fn speedup(base_latency: f64, reduced_latency: f64) -> f64 {
    base_latency / reduced_latency
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub base_params: u64,
    pub reduced_params: u64,
    pub base_macs: u64,
    pub reduced_macs: u64,
    /// Median single-sample forward time, seconds.
    pub base_latency: f64,
    pub reduced_latency: f64,
    pub compression_rate: f64,
    pub saved_computations: f64,
    pub speedup: f64,
    pub base_accuracy: f64,
    pub reduced_accuracy: f64,
    /// `base_accuracy - reduced_accuracy`, as a fraction.
    pub accuracy_drop: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "base_params={}\nreduced_params={}\nbase_macs={}\nreduced_macs={}\nbase_latency_s={:.6e}\n\
             reduced_latency_s={:.6e}\ncompression_rate={:.4}\nsaved_computations={:.4}\nspeedup={:.4}\n\
             base_accuracy={:.4}\nreduced_accuracy={:.4}\naccuracy_drop={:.4}\n",
            self.base_params,
            self.reduced_params,
            self.base_macs,
            self.reduced_macs,
            self.base_latency,
            self.reduced_latency,
            self.compression_rate,
            self.saved_computations,
            self.speedup,
            self.base_accuracy,
            self.reduced_accuracy,
            self.accuracy_drop,
        )
    }
}

/// Median wall time of `reps` single-sample forward passes, after a short
/// warm-up that is not timed.
pub fn median_latency<M: Model + ?Sized>(model: &M, data: &Dataset, reps: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (x, _) = data.gather(&[0]);
    for _ in 0..(reps / 10).max(1) {
        model.forward(&x, None)?;
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        model.forward(&x, None)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    Ok(if m % 2 == 1 { times[m / 2] } else { 0.5 * (times[m / 2 - 1] + times[m / 2]) })
}

/// Compares a reduced model against its base. Both accuracies are measured
/// on samples of the reduced model's classes, predicting among those classes.
pub fn compute_metrics<B, R>(base: &B, reduced: &R, data: &Dataset, latency_reps: usize) -> Result<MetricsReport>
where
    B: Model + Sync + ?Sized,
    R: Model + Sync + ?Sized,
{
    let classes = reduced.output_classes().to_vec();
    let input = base.input_shape();
    let (base_params, reduced_params) = (base.count_params(), reduced.count_params());
    let (base_macs, reduced_macs) = (base.count_macs(input)?, reduced.count_macs(input)?);
    let eval_data = data.filter_classes(&classes);
    let base_accuracy = evaluate(base, &eval_data, Some(&classes))?;
    let reduced_accuracy = evaluate(reduced, &eval_data, Some(&classes))?;
    let base_latency = median_latency(base, &eval_data, latency_reps)?;
    let reduced_latency = median_latency(reduced, &eval_data, latency_reps)?;
    Ok(MetricsReport {
        base_params,
        reduced_params,
        base_macs,
        reduced_macs,
        base_latency,
        reduced_latency,
        compression_rate: compression_rate(base_params, reduced_params),
        saved_computations: saved_computations(base_macs, reduced_macs),
        speedup: speedup(base_latency, reduced_latency),
        base_accuracy,
        reduced_accuracy,
        accuracy_drop: base_accuracy - reduced_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub subset: Vec<usize>,
    pub cardinality: usize,
    pub subnet_accuracy: f64,
    pub fulltree_accuracy: f64,
    pub params: u64,
    pub macs: u64,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// All `k`-subsets of `items` in lexicographic order.
fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { break };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Subsets evaluated for one cardinality: every combination when there are
/// at most `combos`, otherwise `combos` distinct seeded draws.
pub fn sweep_subsets(classes: &[usize], cardinality: usize, combos: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if binomial(classes.len(), cardinality) <= combos as u128 {
        return combinations(classes, cardinality);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(combos);
    while out.len() < combos {
        let mut s: Vec<usize> = sample(rng, classes.len(), cardinality).into_iter().map(|i| classes[i]).collect();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Subnetwork versus full-tree accuracy (both restricted to the subset) for
/// subsets of each requested cardinality.
pub fn subset_sweep(
    tree: &HsdTree,
    data: &Dataset,
    cardinalities: &[usize],
    combos: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let classes = tree.classes().to_vec();
    if let Some(&k) = cardinalities.iter().find(|&&k| k < 2 || k > classes.len()) {
        return Err(Error::InvalidSubset(format!(
            "cardinality {k} outside 2..={}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Vec<usize>> = cardinalities
        .iter()
        .flat_map(|&k| sweep_subsets(&classes, k, combos.max(1), &mut rng))
        .collect();
    let input = tree.input_shape();
    subsets
        .par_iter()
        .map(|s| -> Result<SweepRow> {
            let sub = extract_subnetwork(tree, s)?;
            Ok(SweepRow {
                subset: s.clone(),
                cardinality: s.len(),
                subnet_accuracy: evaluate(&sub, data, Some(s))?,
                fulltree_accuracy: evaluate(tree, data, Some(s))?,
                params: sub.count_params(),
                macs: sub.count_macs(input)?,
            })
        })
        .collect()
}

/// Writes sweep rows as CSV, subset ids joined with `;`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["subset", "cardinality", "subnet_accuracy", "fulltree_accuracy", "params", "macs"])
        .map_err(io)?;
    for r in rows {
        let subset: Vec<String> = r.subset.iter().map(|c| c.to_string()).collect();
        w.write_record([
            subset.join(";"),
            r.cardinality.to_string(),
            format!("{:.6}", r.subnet_accuracy),
            format!("{:.6}", r.fulltree_accuracy),
            r.params.to_string(),
            r.macs.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
