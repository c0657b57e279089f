//! Dynamic dilated k-nearest-neighbour graphs over vertex features.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, VertexFeatures};

/// Directed edge lists: `neighbors(i)` are the source vertices feeding vertex `i`,
/// ordered by ascending distance with ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl EdgeSet {
    /// Builds an edge set from explicit per-vertex lists of equal length.
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        if lists.iter().any(|l| l.len() != k) {
            return Err(Error::Graph("neighbor lists must share one length".into()));
        }
        if let Some(&bad) = lists.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::Graph(format!("neighbor index {bad} out of range for {n} vertices")));
        }
        Ok(Self {
            n,
            k,
            neighbors: lists.iter().flatten().copied().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighbors per vertex after any fallback.
    pub fn k_effective(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }
}

/// One `(k, d)` pair per graph convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub k: usize,
    pub d: usize,
}

/// Per-block neighbour counts and dilation rates for a branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdSchedule {
    blocks: Vec<BlockPlan>,
}

impl KdSchedule {
    pub const K_RANGE: (usize, usize) = (3, 8);
    pub const D_RANGE: (usize, usize) = (1, 3);

    /// `k` non-decreasing within `[3, 8]`, `d` within `[1, 3]`.
    pub fn new(ks: &[usize], ds: &[usize]) -> Result<Self> {
        if ks.len() != ds.len() {
            return Err(Error::Config(format!(
                "schedule has {} k values but {} d values",
                ks.len(),
                ds.len()
            )));
        }
        if ks.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("k must be non-decreasing, got {ks:?}")));
        }
        let (klo, khi) = Self::K_RANGE;
        let (dlo, dhi) = Self::D_RANGE;
        if ks.iter().any(|k| !(klo..=khi).contains(k)) {
            return Err(Error::Config(format!("k outside [{klo}, {khi}]: {ks:?}")));
        }
        if ds.iter().any(|d| !(dlo..=dhi).contains(d)) {
            return Err(Error::Config(format!("d outside [{dlo}, {dhi}]: {ds:?}")));
        }
        Ok(Self {
            blocks: ks.iter().zip(ds).map(|(&k, &d)| BlockPlan { k, d }).collect(),
        })
    }

    pub fn blocks(&self) -> &[BlockPlan] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.k).collect()
    }

    pub fn ds(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.d).collect()
    }
}

impl Default for KdSchedule {
    /// Six blocks with k growing 3 → 8 and dilation 1 → 3.
    fn default() -> Self {
        Self::new(&[3, 4, 5, 6, 7, 8], &[1, 1, 2, 2, 3, 3]).expect("default schedule is valid")
    }
}

fn check_finite(x: &VertexFeatures) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::numeric("vertex features contain NaN or infinity"));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense N×N squared Euclidean distances.
pub fn pairwise_sq_dist(x: &VertexFeatures) -> Result<Matrix> {
    check_finite(x)?;
    let n = x.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(x.row(i), x.row(j));
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    Ok(out)
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Dilated KNN: rank every other vertex by `(distance, index)`, take the
/// first `k·d` candidates and keep every `d`-th one. When fewer than `k·d`
/// candidates exist the selection falls back to plain top-`k` (capped at
/// `n − 1`). Self-loops are never produced.
pub fn dilated_knn(x: &VertexFeatures, k: usize, d: usize) -> Result<EdgeSet> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Graph(format!("a KNN graph needs at least 2 vertices, got {n}")));
    }
    if k == 0 || d == 0 {
        return Err(Error::Graph(format!("k and d must be positive (k={k}, d={d})")));
    }
    check_finite(x)?;

    let (window, stride) = if k * d <= n - 1 { (k * d, d) } else { (k.min(n - 1), 1) };
    let k_eff = window / stride;
    let mut neighbors = Vec::with_capacity(n * k_eff);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let xi = x.row(i);
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(xi, x.row(j)), j)));
        if window < cand.len() {
            cand.select_nth_unstable_by(window - 1, by_distance_then_index);
        }
        let head = &mut cand[..window];
        head.sort_unstable_by(by_distance_then_index);
        neighbors.extend(head.iter().step_by(stride).map(|&(_, j)| j));
    }
    Ok(EdgeSet { n, k: k_eff, neighbors })
}
