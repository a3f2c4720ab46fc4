//! Ward agglomerative clustering, stopped at two clusters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterResult {
    /// Side of each input vector; the cluster holding vector 0 is `Left`.
    pub assignment: Vec<Side>,
    /// Set when either final cluster is smaller than the minimum size, in
    /// which case the caller keeps a single child.
    pub merged_to_single: bool,
}

impl ClusterResult {
    pub fn members(&self, side: Side) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == side)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `vectors` bottom-up with Ward's criterion until two clusters
/// remain, using Lance-Williams updates on squared Euclidean distances.
///
/// Clusters are indexed by position; a merge keeps the smaller index. Among
/// pairs with equal merge cost the lexicographically smallest index pair
/// wins. The split is collapsed (`merged_to_single`) when either side holds
/// fewer than `min_size` vectors.
pub fn ward_cluster(vectors: &[&[f64]], min_size: usize) -> Result<ClusterResult> {
    let m = vectors.len();
    if m < 2 {
        return Err(Error::TooFewVectors(m));
    }
    let k = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != k) {
        return Err(Error::InvalidTensor(format!(
            "clustering vectors differ in length: {k} vs {}",
            v.len()
        )));
    }

    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = squared_distance(vectors[i], vectors[j]);
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }
    let mut size = vec![1usize; m];
    let mut owner: Vec<usize> = (0..m).collect();
    let mut active: Vec<usize> = (0..m).collect();

    while active.len() > 2 {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let d = dist[i * m + j];
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for &x in &active {
            if x == i || x == j {
                continue;
            }
            let nx = size[x] as f64;
            let d = ((ni + nx) * dist[x * m + i] + (nj + nx) * dist[x * m + j] - nx * dij) / (ni + nj + nx);
            dist[x * m + i] = d;
            dist[i * m + x] = d;
        }
        size[i] += size[j];
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        active.retain(|&x| x != j);
    }

    let left = owner[0];
    let assignment: Vec<Side> = owner
        .iter()
        .map(|&o| if o == left { Side::Left } else { Side::Right })
        .collect();
    let n_left = assignment.iter().filter(|&&s| s == Side::Left).count();
    let n_right = m - n_left;
    Ok(ClusterResult {
        assignment,
        merged_to_single: n_left < min_size || n_right < min_size,
    })
}
