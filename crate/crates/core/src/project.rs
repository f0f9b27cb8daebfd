//! Exact neighbor graphs and a UMAP-style 2D neighbor embedding.
//!
//! The layout follows the usual construction: smoothed k-NN distances give
//! directed membership strengths, a fuzzy union symmetrizes them, and a
//! sequential attractive/repulsive SGD places the points. Every random draw
//! comes from one seeded ChaCha stream consumed in a fixed order, so a given
//! `(input, config)` always produces the same coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("k = {k} must be positive and smaller than the point count {n}")]
    BadK { k: usize, n: usize },
    #[error("non-finite input at row {0}")]
    NonFinite(usize),
    #[error("invalid projection config: {0}")]
    BadConfig(&'static str),
    #[error("point sets are not aligned ({0} vs {1})")]
    Misaligned(usize, usize),
}

pub type Result<T> = std::result::Result<T, ProjectError>;

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> MatrixView<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "matrix shape");
        Self { data, dim }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(ProjectError::NonFinite(p / self.dim)),
            None => Ok(()),
        }
    }
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Metric used for neighbor search. Only Euclidean is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: 200,
            seed: 42,
            metric: Metric::Euclidean,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(ProjectError::BadConfig("n_neighbors must be at least 2"));
        }
        if !self.min_dist.is_finite() || self.min_dist < 0.0 {
            return Err(ProjectError::BadConfig("min_dist must be finite and non-negative"));
        }
        if self.n_epochs == 0 {
            return Err(ProjectError::BadConfig("n_epochs must be positive"));
        }
        Ok(())
    }

    /// Neighbor count actually used for a set of `n` points.
    pub fn effective_neighbors(&self, n: usize) -> usize {
        self.n_neighbors.min(n.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// For each point, its `k` nearest other points by ascending distance.
/// Equal distances are ordered by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub lists: Vec<Vec<Neighbor>>,
}

/// Exact brute-force k-nearest-neighbor graph, parallel over query points.
pub fn knn_graph(points: MatrixView<'_>, k: usize) -> Result<NeighborGraph> {
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(ProjectError::BadK { k, n });
    }
    points.check_finite()?;
    let lists = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = points.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(q, points.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter()
                .map(|(d2, j)| Neighbor {
                    index: j,
                    distance: d2.sqrt(),
                })
                .collect()
        })
        .collect();
    Ok(NeighborGraph { k, lists })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
}

/// Projects the whole corpus. `n_neighbors` is clamped to `n - 1` for tiny
/// inputs.
pub fn project_global(
    ids: &[String],
    points: MatrixView<'_>,
    cfg: &ProjectionConfig,
) -> Result<Projection2D> {
    if ids.len() != points.rows() {
        return Err(ProjectError::Misaligned(ids.len(), points.rows()));
    }
    let coords = embed(points, cfg)?;
    Ok(Projection2D {
        ids: ids.to_vec(),
        coords,
    })
}

/// Projects the members of one cluster into an unconstrained local frame.
pub fn project_local(
    ids: &[String],
    points: MatrixView<'_>,
    cfg: &ProjectionConfig,
) -> Result<Projection2D> {
    project_global(ids, points, cfg)
}

fn embed(points: MatrixView<'_>, cfg: &ProjectionConfig) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let n = points.rows();
    if n < 2 {
        return Err(ProjectError::TooFewPoints { needed: 2, got: n });
    }
    points.check_finite()?;
    if n == 2 {
        return Ok(vec![[0.0, 0.0], [1.0, 0.0]]);
    }
    let k = cfg.effective_neighbors(n);
    let graph = knn_graph(points, k)?;
    let edges = fuzzy_edges(&graph);
    let (a, b) = find_ab_params(1.0, cfg.min_dist);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = pca_init(points, &mut rng);
    optimize_layout(&mut coords, &edges, a, b, cfg.n_epochs, &mut rng);
    Ok(coords)
}

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;

/// Per-point `(rho, sigma)` so that `sum_j exp(-(d_j - rho) / sigma) = log2(k)`.
pub fn smooth_knn_dist(graph: &NeighborGraph) -> Vec<(f64, f64)> {
    let target = (graph.k as f64).log2();
    let mean_all = {
        let (s, c) = graph
            .lists
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), nb| (s + nb.distance, c + 1));
        if c == 0 { 0.0 } else { s / c as f64 }
    };
    graph
        .lists
        .iter()
        .map(|list| {
            let rho = list
                .iter()
                .map(|nb| nb.distance)
                .find(|&d| d > 0.0)
                .unwrap_or(0.0);
            let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
            for _ in 0..64 {
                let psum: f64 = list
                    .iter()
                    .map(|nb| {
                        let d = nb.distance - rho;
                        if d > 0.0 { (-d / mid).exp() } else { 1.0 }
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
            let mean_i = list.iter().map(|nb| nb.distance).sum::<f64>() / list.len() as f64;
            let floor = if rho > 0.0 { mean_i } else { mean_all } * MIN_K_DIST_SCALE;
            (rho, mid.max(floor))
        })
        .collect()
}

/// Directed edge `(head, tail, weight)` of the symmetrized fuzzy graph.
/// Both directions of each undirected edge are present, sorted by
/// `(head, tail)`.
pub fn fuzzy_edges(graph: &NeighborGraph) -> Vec<(usize, usize, f64)> {
    let params = smooth_knn_dist(graph);
    let mut directed: Vec<(usize, usize, f64)> = Vec::new();
    for (i, list) in graph.lists.iter().enumerate() {
        let (rho, sigma) = params[i];
        for nb in list {
            let d = nb.distance - rho;
            let w = if d > 0.0 { (-d / sigma).exp() } else { 1.0 };
            directed.push((i, nb.index, w));
        }
    }
    // fuzzy union: w_ij + w_ji - w_ij * w_ji
    let mut keyed: Vec<((usize, usize), f64, bool)> = directed
        .into_iter()
        .map(|(i, j, w)| ((i.min(j), i.max(j)), w, i < j))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(b.2.cmp(&a.2)));
    let mut out = Vec::with_capacity(keyed.len() * 2);
    let mut idx = 0;
    while idx < keyed.len() {
        let key = keyed[idx].0;
        let (mut fwd, mut back) = (0.0, 0.0);
        while idx < keyed.len() && keyed[idx].0 == key {
            if keyed[idx].2 { fwd = keyed[idx].1 } else { back = keyed[idx].1 }
            idx += 1;
        }
        let w = fwd + back - fwd * back;
        if w > 0.0 {
            out.push((key.0, key.1, w));
            out.push((key.1, key.0, w));
        }
    }
    out.sort_by_key(|e| (e.0, e.1));
    out
}

/// Fits `1 / (1 + a x^(2b))` to the offset-exponential target curve by
/// damped Gauss-Newton on 300 samples of `[0, 3 * spread]`.
pub fn find_ab_params(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (1..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut err = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let f = 1.0 / den;
            let r = f - y;
            let da = -p / (den * den);
            let db = -a * p * 2.0 * x.ln() / (den * den);
            let g = [da, db];
            for u in 0..2 {
                jtr[u] += g[u] * r;
                for v in 0..2 {
                    jtj[u][v] += g[u] * g[v];
                }
            }
        }
        let m = [
            [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
            [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = (m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let step_b = (m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
        let (na, nb) = (a - step_a, b - step_b);
        if na > 0.0 && nb > 0.0 {
            let nerr = sse(na, nb);
            if nerr < err {
                let done = (err - nerr) < 1e-15 * err.max(1e-300);
                a = na;
                b = nb;
                err = nerr;
                lambda = (lambda * 0.3).max(1e-12);
                if done {
                    break;
                }
                continue;
            }
        }
        lambda *= 10.0;
        if lambda > 1e12 {
            break;
        }
    }
    (a, b)
}

/// First two principal components, rescaled to `[0, 10]` with a small
/// seeded jitter so coincident points separate.
fn pca_init(points: MatrixView<'_>, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = points.rows();
    let d = points.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(points.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let project = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                points
                    .row(i)
                    .iter()
                    .zip(v)
                    .zip(&mean)
                    .map(|((&x, &w), &m)| (f64::from(x) - m) * w)
                    .sum()
            })
            .collect()
    };
    let back_project = |u: &[f64]| -> Vec<f64> {
        const CHUNK: usize = 256;
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0f64; d];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    for ((a, &x), &m) in acc.iter_mut().zip(points.row(i)).zip(&mean) {
                        *a += u[i] * (f64::from(x) - m);
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0f64; d];
        for p in partials {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        }
        out
    };

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        for _ in 0..64 {
            for c in &components {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            v = back_project(&project(&v));
        }
        for c in &components {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        components.push(v);
    }
    let xs = project(&components[0]);
    let ys = project(&components[1]);
    let rescale = |vals: &[f64]| -> Vec<f64> {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        vals.iter()
            .map(|&v| if span > 0.0 { 10.0 * (v - lo) / span } else { 5.0 })
            .collect()
    };
    let xs = rescale(&xs);
    let ys = rescale(&ys);
    xs.into_iter()
        .zip(ys)
        .map(|(x, y)| [x + 1e-3 * (rng.random::<f64>() - 0.5), y + 1e-3 * (rng.random::<f64>() - 0.5)])
        .collect()
}

const NEGATIVE_SAMPLE_RATE: f64 = 5.0;

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

fn optimize_layout(
    coords: &mut [[f64; 2]],
    edges: &[(usize, usize, f64)],
    a: f64,
    b: f64,
    n_epochs: usize,
    rng: &mut ChaCha8Rng,
) {
    let n = coords.len();
    let w_max = edges.iter().map(|e| e.2).fold(0.0f64, f64::max);
    let edges: Vec<&(usize, usize, f64)> = edges
        .iter()
        .filter(|e| e.2 >= w_max / n_epochs as f64)
        .collect();
    let eps: Vec<f64> = edges.iter().map(|e| w_max / e.2).collect();
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / NEGATIVE_SAMPLE_RATE).collect();
    let mut next = eps.clone();
    let mut next_neg = eps_neg.clone();

    for epoch in 0..n_epochs {
        let alpha = 1.0 - epoch as f64 / n_epochs as f64;
        let ep = epoch as f64;
        for (e, &&(j, k, _)) in edges.iter().enumerate() {
            if next[e] > ep {
                continue;
            }
            let (cj, ck) = (coords[j], coords[k]);
            let dx = [cj[0] - ck[0], cj[1] - ck[1]];
            let d2 = dx[0] * dx[0] + dx[1] * dx[1];
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for dim in 0..2 {
                    let g = clip(coeff * dx[dim]) * alpha;
                    coords[j][dim] += g;
                    coords[k][dim] -= g;
                }
            }
            next[e] += eps[e];

            let n_neg = ((ep - next_neg[e]) / eps_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.random_range(0..n);
                if other == j {
                    continue;
                }
                let (cj, co) = (coords[j], coords[other]);
                let dx = [cj[0] - co[0], cj[1] - co[1]];
                let d2 = dx[0] * dx[0] + dx[1] * dx[1];
                if d2 <= 0.0 {
                    continue;
                }
                let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                for dim in 0..2 {
                    coords[j][dim] += clip(coeff * dx[dim]) * alpha;
                }
            }
            next_neg[e] += n_neg as f64 * eps_neg[e];
        }
    }
}

/// Trustworthiness of a 2D layout with respect to the original points.
///
/// `1 - 2 / (n k (2n - 3k - 1)) * sum_i sum_{j in U_i} (r(i, j) - k)`, where
/// `U_i` are the 2D k-neighbors of `i` that are not among its original
/// k-neighbors and `r` is the 1-based rank in the original space.
pub fn trustworthiness(high: MatrixView<'_>, low: &[[f64; 2]], k: usize) -> Result<f64> {
    let n = high.rows();
    if n != low.len() {
        return Err(ProjectError::Misaligned(n, low.len()));
    }
    if k == 0 || k >= n {
        return Err(ProjectError::BadK { k, n });
    }
    let penalty: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut order: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(high.row(i), high.row(j)), j))
                .collect();
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut rank = vec![0usize; n];
            for (r, &(_, j)) in order.iter().enumerate() {
                rank[j] = r + 1;
            }
            let mut low_order: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = low[i][0] - low[j][0];
                    let dy = low[i][1] - low[j][1];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            low_order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            low_order[..k]
                .iter()
                .filter(|&&(_, j)| rank[j] > k)
                .map(|&(_, j)| (rank[j] - k) as f64)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}
