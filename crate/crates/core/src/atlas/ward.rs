//! Agglomerative clustering with Ward linkage.
//!
//! Distances start as Euclidean distances between points. When clusters `s`
//! and `t` merge into `u`, the distance to every other cluster `v` is
//! updated with the Lance-Williams recurrence
//!
//! ```text
//! d(u,v) = sqrt( (|v|+|s|)/T d(v,s)^2 + (|v|+|t|)/T d(v,t)^2 - |v|/T d(s,t)^2 ),  T = |v|+|s|+|t|
//! ```
//!
//! Cluster ids follow the usual convention: points are `0..n`, the cluster
//! created by merge step `i` is `n + i`. Among equal distances the pair with
//! the smallest `(min id, max id)` merges first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Smaller of the two merged cluster ids.
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Number of points in the new cluster.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n_points: usize,
    pub merges: Vec<Merge>,
}

/// Ward's update of the squared distance from `v` to `s ∪ t`.
pub fn lance_williams_ward(size_v: usize, size_s: usize, size_t: usize, d_vs2: f64, d_vt2: f64, d_st2: f64) -> f64 {
    let t = (size_v + size_s + size_t) as f64;
    let (v, s, tt) = (size_v as f64, size_s as f64, size_t as f64);
    (((v + s) / t) * d_vs2 + ((v + tt) / t) * d_vt2 - (v / t) * d_st2).max(0.0)
}

pub fn ward_linkage(points: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster zero points".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("points have mixed dimensionality".into()));
    }

    // Squared distances between slots; slot i initially holds point i and
    // later whichever cluster absorbed it.
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let mut slot_id: Vec<usize> = (0..n).collect();
    let mut slot_size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (ai, &p) in active.iter().enumerate() {
            for &q in &active[ai + 1..] {
                let d = d2[p * n + q];
                let (lo, hi) = minmax(slot_id[p], slot_id[q]);
                let better = match best {
                    None => true,
                    Some((bd, blo, bhi, _, _)) => d < bd || (d == bd && (lo, hi) < (blo, bhi)),
                };
                if better {
                    best = Some((d, lo, hi, p, q));
                }
            }
        }
        let (dist2, lo, hi, p, q) = best.expect("at least two active clusters");
        let (size_s, size_t) = (slot_size[p], slot_size[q]);
        for &v in &active {
            if v == p || v == q {
                continue;
            }
            let nd = lance_williams_ward(slot_size[v], size_s, size_t, d2[v * n + p], d2[v * n + q], dist2);
            d2[v * n + p] = nd;
            d2[p * n + v] = nd;
        }
        slot_id[p] = n + step;
        slot_size[p] = size_s + size_t;
        active.retain(|&s| s != q);
        merges.push(Merge {
            a: lo,
            b: hi,
            distance: dist2.sqrt(),
            size: size_s + size_t,
        });
    }
    Ok(Dendrogram { n_points: n, merges })
}

fn minmax(a: usize, b: usize) -> (usize, usize) {
    if a <= b { (a, b) } else { (b, a) }
}

impl Dendrogram {
    /// Labels each point with its cluster after cutting to `k` clusters.
    /// Labels are `0..k`, numbered in order of each cluster's smallest point.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.n_points;
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!("cannot cut {n} points into {k} clusters")));
        }
        let mut parent: Vec<usize> = (0..(2 * n - 1)).collect();
        for (i, m) in self.merges.iter().take(n - k).enumerate() {
            parent[m.a] = n + i;
            parent[m.b] = n + i;
        }
        let root = |mut x: usize| {
            while parent[x] != x {
                x = parent[x];
            }
            x
        };
        let mut label_of_root = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(n);
        for p in 0..n {
            let r = root(p);
            let next = label_of_root.len();
            labels.push(*label_of_root.entry(r).or_insert(next));
        }
        Ok(labels)
    }
}
