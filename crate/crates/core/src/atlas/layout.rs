//! UMAP-style 2D layout of explanation embeddings under cosine distance.
//!
//! 1. exact k-NN graph (cosine distance, self excluded);
//! 2. per-point memberships `exp(-max(0, d - rho_i) / sigma_i)`, with `rho_i`
//!    the nearest non-zero neighbor distance and `sigma_i` found by bisection
//!    so that memberships sum to `log2(n_neighbors)`;
//! 3. fuzzy union `a + b - a*b`;
//! 4. seeded SGD on the cross-entropy against `1 / (1 + a d^(2b))` with
//!    negative sampling.
//!
//! Rows that are identical after normalization are embedded once and share
//! their coordinates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub seed: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            n_neighbors: 15,
            min_dist: 0.3,
            spread: 1.0,
            n_epochs: 300,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            seed: 42,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::InvalidInput("n_neighbors must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.min_dist) {
            return Err(Error::InvalidInput("min_dist must be in [0, 1)".into()));
        }
        if self.n_epochs == 0 || self.learning_rate <= 0.0 || self.spread <= 0.0 {
            return Err(Error::InvalidInput("n_epochs, learning_rate and spread must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// `n x 2`
    pub coords: Matrix,
    pub warnings: Vec<String>,
}

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;

/// Fits `(a, b)` of `1 / (1 + a x^(2b))` to the offset-exponential target
/// curve defined by `min_dist` and `spread`, by Levenberg-Marquardt.
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let loss = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut current = loss(a, b);
    for _ in 0..500 {
        // Normal equations J^T J delta = -J^T r for two parameters.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let p = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let denom = 1.0 + a * p;
            let r = 1.0 / denom - y;
            let da = -p / (denom * denom);
            let db = if x > 0.0 { -a * p * 2.0 * x.ln() / (denom * denom) } else { 0.0 };
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let (m_aa, m_bb) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
        let det = m_aa * m_bb - jab * jab;
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m_bb * ga - jab * gb) / det;
        let step_b = -(m_aa * gb - jab * ga) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let candidate = if na > 0.0 && nb > 0.0 { loss(na, nb) } else { f64::INFINITY };
        if candidate < current {
            let improvement = current - candidate;
            a = na;
            b = nb;
            current = candidate;
            lambda = (lambda * 0.3).max(1e-12);
            if improvement < 1e-15 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// `1 - cos` between rows, in f64.
fn cosine_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let v = (1.0 - c).max(0.0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Indices and distances of the `k` nearest other points, ties by index.
fn knn(dist: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    dist.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut others: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, d)| (j, *d))
                .collect();
            others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            others.truncate(k);
            others
        })
        .collect()
}

/// Returns `(rho, sigma)` per point.
fn smooth_knn(neighbors: &[Vec<(usize, f64)>], n_neighbors: usize) -> Vec<(f64, f64)> {
    let target = (n_neighbors as f64).log2();
    let all_mean = {
        let (s, c) = neighbors
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), (_, d)| (s + d, c + 1));
        if c == 0 { 0.0 } else { s / c as f64 }
    };
    neighbors
        .iter()
        .map(|nb| {
            let rho = nb.iter().map(|(_, d)| *d).find(|d| *d > 0.0).unwrap_or(0.0);
            let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
            for _ in 0..64 {
                let psum: f64 = nb
                    .iter()
                    .map(|(_, d)| {
                        let gap = d - rho;
                        if gap > 0.0 { (-gap / mid).exp() } else { 1.0 }
                    })
                    .sum();
                if (psum - target).abs() < SMOOTH_K_TOLERANCE {
                    break;
                }
                if psum > target {
                    hi = mid;
                    mid = (lo + hi) / 2.0;
                } else {
                    lo = mid;
                    mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
                }
            }
            let mean_i = nb.iter().map(|(_, d)| d).sum::<f64>() / nb.len().max(1) as f64;
            let floor = if rho > 0.0 { MIN_K_DIST_SCALE * mean_i } else { MIN_K_DIST_SCALE * all_mean };
            (rho, mid.max(floor))
        })
        .collect()
}

/// Symmetric fuzzy graph as a sorted `(i, j) -> weight` map, both directions.
fn fuzzy_graph(neighbors: &[Vec<(usize, f64)>], params: &[(f64, f64)]) -> BTreeMap<(usize, usize), f64> {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, nb) in neighbors.iter().enumerate() {
        let (rho, sigma) = params[i];
        for &(j, d) in nb {
            let w = if d - rho <= 0.0 { 1.0 } else { (-(d - rho) / sigma).exp() };
            directed.insert((i, j), w);
        }
    }
    let mut sym = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let u = w + back - w * back;
        sym.insert((i, j), u);
        sym.insert((j, i), u);
    }
    sym
}

/// Top-2 principal components of the rows, rescaled to `[0, 10]`.
fn pca_init(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut components: Vec<Vec<f64>> = Vec::new();
    for comp in 0..2 {
        // Power iteration on X^T X from a fixed start vector.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + comp * 13) % 11) as f64 / 11.0).collect();
        for _ in 0..100 {
            let xv: Vec<f64> = centered.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let mut next = vec![0.0; d];
            for (r, s) in centered.iter().zip(&xv) {
                for (acc, a) in next.iter_mut().zip(r) {
                    *acc += a * s;
                }
            }
            for prev in &components {
                let p: f64 = next.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (a, b) in next.iter_mut().zip(prev) {
                    *a -= p * b;
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = next.iter().map(|x| x / norm).collect();
        }
        components.push(v);
    }
    let mut coords: Vec<[f64; 2]> = centered
        .iter()
        .map(|r| {
            let p = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    for axis in 0..2 {
        let lo = coords.iter().map(|c| c[axis]).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(|c| c[axis]).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for c in coords.iter_mut() {
            c[axis] = 10.0 * (c[axis] - lo) / span;
        }
    }
    coords
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

fn optimize(
    coords: &mut [[f64; 2]],
    graph: &BTreeMap<(usize, usize), f64>,
    a: f64,
    b: f64,
    config: &LayoutConfig,
    rng: &mut ChaCha8Rng,
) {
    let n = coords.len();
    let n_epochs = config.n_epochs as f64;
    let max_w = graph.values().copied().fold(0.0, f64::max);
    let edges: Vec<(usize, usize, f64)> = graph
        .iter()
        .filter(|(_, w)| **w >= max_w / n_epochs)
        .map(|(&(i, j), &w)| (i, j, w))
        .collect();
    let per_sample: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let per_negative: Vec<f64> = per_sample
        .iter()
        .map(|e| e / config.negative_sample_rate as f64)
        .collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();

    for epoch in 0..config.n_epochs {
        let e = epoch as f64;
        let alpha = config.learning_rate * (1.0 - e / n_epochs);
        for (idx, &(head, tail, _)) in edges.iter().enumerate() {
            if next_sample[idx] > e {
                continue;
            }
            let d2 = dist2(coords[head], coords[tail]);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for k in 0..2 {
                let g = clip(coeff * (coords[head][k] - coords[tail][k]));
                coords[head][k] += g * alpha;
                coords[tail][k] -= g * alpha;
            }
            next_sample[idx] += per_sample[idx];

            let n_neg = ((e - next_negative[idx]) / per_negative[idx]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                if other == head {
                    continue;
                }
                let d2 = dist2(coords[head], coords[other]);
                let coeff = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for k in 0..2 {
                    let g = if coeff > 0.0 {
                        clip(coeff * (coords[head][k] - coords[other][k]))
                    } else {
                        4.0
                    };
                    coords[head][k] += g * alpha;
                }
            }
            next_negative[idx] += n_neg as f64 * per_negative[idx];
        }
    }
}

fn dist2(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

pub fn compute_layout(embeddings: &Matrix, config: &LayoutConfig) -> Result<Layout> {
    config.validate()?;
    let n = embeddings.rows();
    if n < config.n_neighbors + 1 {
        return Err(Error::InvalidInput(format!(
            "layout needs at least {} points, got {n}",
            config.n_neighbors + 1
        )));
    }
    let rows: Vec<Vec<f64>> = embeddings
        .iter_rows()
        .map(|r| {
            let norm = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter().map(|v| if norm > 0.0 { *v as f64 / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut first_of: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let owner: Vec<usize> = rows
        .iter()
        .map(|r| {
            let key = r.iter().map(|v| v.to_bits()).collect();
            *first_of.entry(key).or_insert_with(|| {
                unique.push(r.clone());
                unique.len() - 1
            })
        })
        .collect();
    let mut warnings = Vec::new();
    let (rows, owner) = if unique.len() == n {
        (rows, (0..n).collect())
    } else if unique.len() >= config.n_neighbors + 1 {
        (unique, owner)
    } else {
        warnings.push(format!("only {} distinct rows; duplicates laid out separately", unique.len()));
        (rows, (0..n).collect::<Vec<usize>>())
    };
    let dist = cosine_distances(&rows);

    let max_d = dist.iter().flatten().copied().fold(0.0, f64::max);
    if max_d < 1e-9 {
        tracing::warn!("all embeddings identical; returning jittered coordinates");
        let coords = Matrix::from_fn(n, 2, |_, _| rng.random_range(-0.5f32..0.5));
        return Ok(Layout {
            coords,
            warnings: vec!["degenerate embeddings: all rows identical, coordinates are jitter".into()],
        });
    }

    let neighbors = knn(&dist, config.n_neighbors - 1);
    let params = smooth_knn(&neighbors, config.n_neighbors);
    let graph = fuzzy_graph(&neighbors, &params);
    let (a, b) = fit_ab(config.min_dist, config.spread);

    let mut coords = pca_init(&rows);
    for c in coords.iter_mut() {
        c[0] += rng.random_range(-1e-4..1e-4);
        c[1] += rng.random_range(-1e-4..1e-4);
    }
    optimize(&mut coords, &graph, a, b, config, &mut rng);

    let out = Matrix::from_fn(n, 2, |r, c| coords[owner[r]][c] as f32);
    if !out.is_finite() {
        return Err(Error::NonFinite("layout coordinates".into()));
    }
    Ok(Layout { coords: out, warnings })
}
