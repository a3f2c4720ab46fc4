#![allow(dead_code)]

pub mod fd;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use hsdnet::decomposer::Side;
use hsdnet::graph::{build_chain, ChainNet, NetConfig};
use hsdnet::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let d = Uniform::new(-1.0, 1.0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Relative error with a small absolute floor so entries that are zero up
/// to rounding do not blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn small_chain(rng: &mut ChaCha8Rng, classes: usize) -> ChainNet {
    let widths: Vec<usize> = (0..rng.gen_range(2..=3)).map(|_| rng.gen_range(2..=4)).collect();
    let cfg = NetConfig {
        pool_after: vec![1],
        conv_widths: widths,
        num_classes: classes,
        input_shape: [rng.gen_range(1..=2), 4, 4],
    };
    build_chain(&cfg, None, rng.gen()).unwrap()
}

fn ess(vectors: &[Vec<f64>], members: &[usize]) -> f64 {
    let k = vectors[0].len();
    let mut mean = vec![0.0; k];
    for &m in members {
        for (a, v) in mean.iter_mut().zip(&vectors[m]) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= members.len() as f64;
    }
    members
        .iter()
        .map(|&m| vectors[m].iter().zip(&mean).map(|(v, a)| (v - a) * (v - a)).sum::<f64>())
        .sum()
}

/// Ward clustering by direct search: every step tries each pair of current
/// clusters, recomputes the total within-cluster sum of squares of the
/// resulting partition from scratch, and commits the cheapest merge. Ties go
/// to the lexicographically smallest pair; a merge keeps the smaller index.
pub fn brute_force_ward(vectors: &[Vec<f64>], min_size: usize) -> (Vec<Side>, bool) {
    let m = vectors.len();
    let mut clusters: Vec<Option<Vec<usize>>> = (0..m).map(|i| Some(vec![i])).collect();
    let alive = |c: &Vec<Option<Vec<usize>>>| c.iter().filter(|x| x.is_some()).count();
    while alive(&clusters) > 2 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..m {
            for j in i + 1..m {
                let (Some(a), Some(b)) = (&clusters[i], &clusters[j]) else { continue };
                let mut total = 0.0;
                for (x, c) in clusters.iter().enumerate() {
                    match c {
                        Some(_) if x == i => {
                            let mut merged = a.clone();
                            merged.extend(b);
                            total += ess(vectors, &merged);
                        }
                        Some(_) if x == j => {}
                        Some(c) => total += ess(vectors, c),
                        None => {}
                    }
                }
                if best.map_or(true, |(t, _, _)| total < t - 1e-12 * t.abs().max(1.0)) {
                    best = Some((total, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        let b = clusters[j].take().unwrap();
        clusters[i].as_mut().unwrap().extend(b);
    }
    let left = clusters.iter().position(|c| c.as_ref().is_some_and(|c| c.contains(&0))).unwrap();
    let sides: Vec<Side> = (0..m)
        .map(|v| if clusters[left].as_ref().unwrap().contains(&v) { Side::Left } else { Side::Right })
        .collect();
    let nl = sides.iter().filter(|&&s| s == Side::Left).count();
    (sides, nl < min_size || m - nl < min_size)
}

/// Random per-class score matrices for every conv layer of `arch`.
pub fn random_iscv(rng: &mut ChaCha8Rng, arch: &hsdnet::Architecture) -> hsdnet::IscvSet {
    let c = arch.num_classes();
    (1..=arch.depth())
        .map(|l| {
            let k = arch.width(l);
            let t = Tensor::new(vec![c, k], (0..c * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            (l, hsdnet::IscvMatrix::from_scores(l, t))
        })
        .collect()
}

/// Small architecture with `classes` outputs and a random layout.
pub fn random_arch(rng: &mut ChaCha8Rng, classes: usize) -> hsdnet::Architecture {
    let depth = rng.gen_range(2..=4);
    let widths: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=6)).collect();
    NetConfig {
        conv_widths: widths,
        pool_after: vec![1],
        num_classes: classes,
        input_shape: [rng.gen_range(1..=2), 4, 4],
    }
    .architecture(None)
    .unwrap()
}

/// Random tree layout from random scores, splitting at every layer.
pub fn random_tree(rng: &mut ChaCha8Rng, classes: usize, trunk_full_width: bool) -> hsdnet::HsdTree {
    let arch = random_arch(rng, classes);
    let iscv = random_iscv(rng, &arch);
    let policy = hsdnet::DecomposePolicy {
        clustering_layers: (1..=arch.depth()).collect(),
        min_classes_per_node: 2,
        keep_fraction: 0.5,
        trunk_full_width,
    };
    hsdnet::build_hsd(&arch, &iscv, &policy).unwrap()
}

/// Channels `idx` of an `[n, c, h, w]` activation.
pub fn take_channels(t: &Tensor, idx: &[usize]) -> Tensor {
    let (n, c, hw) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
    let mut out = Vec::with_capacity(n * idx.len() * hw);
    for s in 0..n {
        for &ch in idx {
            let start = (s * c + ch) * hw;
            out.extend_from_slice(&t.data()[start..start + hw]);
        }
    }
    Tensor::new(vec![n, idx.len(), t.dim(2), t.dim(3)], out).unwrap()
}

/// Columns of `[n, k]` logits for the given global classes, given the
/// model's ascending output classes.
pub fn take_columns(t: &Tensor, outputs: &[usize], classes: &[usize]) -> Vec<f64> {
    let k = t.dim(1);
    let cols: Vec<usize> = classes.iter().map(|c| outputs.iter().position(|o| o == c).unwrap()).collect();
    (0..t.dim(0)).flat_map(|s| cols.iter().map(move |&j| t.data()[s * k + j])).collect()
}

/// Non-empty random subset of `classes`, each kept with probability 0.4.
pub fn random_subset(rng: &mut ChaCha8Rng, classes: &[usize]) -> Vec<usize> {
    loop {
        let s: Vec<usize> = classes.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
        if !s.is_empty() {
            return s;
        }
    }
}
