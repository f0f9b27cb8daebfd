//! Regionization of a 2D projection: k-means, clipped Voronoi cells,
//! country merging, local layout fitting, outlier nudging and region
//! representatives.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curate::FusedSet;
use crate::geometry::{self, Point, Rect};

#[derive(Debug, Error, PartialEq)]
pub enum CartoError {
    #[error("k = {k} must be between 1 and the point count {n}")]
    BadK { k: usize, n: usize },
    #[error("target country count {target} must be between 1 and the region count {regions}")]
    BadTarget { target: usize, regions: usize },
    #[error("invalid cartography config: {0}")]
    BadConfig(&'static str),
    #[error("region {0} has no members")]
    EmptyRegion(usize),
}

pub type Result<T> = std::result::Result<T, CartoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartographyConfig {
    pub n_regions: usize,
    pub n_countries: usize,
    pub map_rect: Rect,
    /// Median-absolute-deviation multiplier for outlier detection.
    pub outlier_mad: f64,
    pub min_separation: f64,
    pub kmeans_max_iter: usize,
    pub seed: u64,
}

impl Default for CartographyConfig {
    fn default() -> Self {
        Self {
            n_regions: 64,
            n_countries: 8,
            map_rect: Rect::square(1000.0),
            outlier_mad: 3.0,
            min_separation: 0.5,
            kmeans_max_iter: 100,
            seed: 42,
        }
    }
}

impl CartographyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 || self.n_countries == 0 {
            return Err(CartoError::BadConfig("region and country counts must be positive"));
        }
        if self.n_countries > self.n_regions {
            return Err(CartoError::BadConfig("n_countries exceeds n_regions"));
        }
        if !self.map_rect.is_valid() {
            return Err(CartoError::BadConfig("map_rect is degenerate"));
        }
        if !(self.outlier_mad.is_finite() && self.outlier_mad > 0.0) {
            return Err(CartoError::BadConfig("outlier_mad must be positive"));
        }
        let half = self.map_rect.width().min(self.map_rect.height()) / 2.0;
        if !(self.min_separation.is_finite() && self.min_separation > 0.0 && self.min_separation < half)
        {
            return Err(CartoError::BadConfig("min_separation must be positive and smaller than half the map"));
        }
        if self.kmeans_max_iter == 0 {
            return Err(CartoError::BadConfig("kmeans_max_iter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub iterations: usize,
}

impl KMeans {
    pub fn objective(&self, points: &[Point]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| geometry::distance_sq(*p, self.centroids[a]))
            .sum()
    }
}

fn nearest(p: Point, centroids: &[Point]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = geometry::distance_sq(p, *c);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

fn kmeans_pp_init(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| geometry::distance_sq(*p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= r {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|c| !c).unwrap()
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(geometry::distance_sq(*p, points[pick]));
        }
    }
    centroids
}

fn means(points: &[Point], assignments: &[usize], k: usize) -> (Vec<Point>, Vec<usize>) {
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sums[a][0] += p[0];
        sums[a][1] += p[1];
        counts[a] += 1;
    }
    let c = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { [s[0] / n as f64, s[1] / n as f64] } else { [f64::NAN; 2] })
        .collect();
    (c, counts)
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// An empty cluster takes the point of the largest cluster that lies
/// farthest from that cluster's centroid.
pub fn kmeans_2d(points: &[Point], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(CartoError::BadK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids)).collect();
    let mut iterations = 0;
    loop {
        let (mut c, mut counts) = means(points, &assignments, k);
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
            let far = (0..n)
                .filter(|&i| assignments[i] == largest)
                .max_by(|&a, &b| {
                    geometry::distance_sq(points[a], c[largest])
                        .total_cmp(&geometry::distance_sq(points[b], c[largest]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assignments[far] = empty;
            let (nc, ncounts) = means(points, &assignments, k);
            c = nc;
            counts = ncounts;
        }
        centroids = c;
        iterations += 1;
        if iterations >= max_iter {
            break;
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        assignments,
        centroids,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voronoi {
    /// Sites after deterministic de-duplication.
    pub sites: Vec<Point>,
    /// Counter-clockwise convex cells clipped to the rectangle.
    pub cells: Vec<Vec<Point>>,
}

/// Separates coincident sites by `eps` along golden-angle directions.
fn dedupe_sites(sites: &[Point], rect: &Rect, eps: f64) -> Vec<Point> {
    const GOLDEN: f64 = 2.399_963_229_728_653;
    let mut out: Vec<Point> = Vec::with_capacity(sites.len());
    for (i, &s) in sites.iter().enumerate() {
        let mut p = s;
        let mut attempt = 0usize;
        while out.iter().any(|q| geometry::distance_sq(*q, p) <= 1e-24) {
            attempt += 1;
            let theta = GOLDEN * (i + attempt) as f64;
            let r = eps * attempt as f64;
            p = [
                (s[0] + r * theta.cos()).clamp(rect.min_x + eps, rect.max_x - eps),
                (s[1] + r * theta.sin()).clamp(rect.min_y + eps, rect.max_y - eps),
            ];
        }
        out.push(p);
    }
    out
}

/// Voronoi cells of `centroids` clipped to `rect` by half-plane
/// intersection. Duplicate centroids are perturbed by `min_separation / 100`.
pub fn voronoi_cells(centroids: &[Point], rect: &Rect, min_separation: f64) -> Voronoi {
    let sites = dedupe_sites(centroids, rect, min_separation / 100.0);
    let base = rect.to_polygon();
    let cells = (0..sites.len())
        .map(|i| {
            let si = sites[i];
            let mut others: Vec<(f64, usize)> = (0..sites.len())
                .filter(|&j| j != i)
                .map(|j| (geometry::distance_sq(si, sites[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut poly = base.clone();
            for (d2, j) in others {
                let reach = poly
                    .iter()
                    .map(|v| geometry::distance_sq(*v, si))
                    .fold(0.0f64, f64::max);
                // the bisector lies at half the site distance
                if d2 / 4.0 > reach {
                    break;
                }
                let sj = sites[j];
                let normal = [2.0 * (sj[0] - si[0]), 2.0 * (sj[1] - si[1])];
                let c = sj[0] * sj[0] + sj[1] * sj[1] - si[0] * si[0] - si[1] * si[1];
                poly = geometry::clip_half_plane(&poly, normal, c);
                if poly.is_empty() {
                    break;
                }
            }
            poly
        })
        .collect();
    Voronoi { sites, cells }
}

/// Pairs of cells sharing an edge of positive length.
pub fn cell_adjacency(v: &Voronoi, rect: &Rect) -> Vec<BTreeSet<usize>> {
    let k = v.sites.len();
    let tol = 1e-9 * rect.diagonal();
    let mut adj = vec![BTreeSet::new(); k];
    for i in 0..k {
        let cell = &v.cells[i];
        let m = cell.len();
        for e in 0..m {
            let a = cell[e];
            let b = cell[(e + 1) % m];
            if geometry::distance(a, b) <= tol {
                continue;
            }
            let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
            let di = geometry::distance(mid, v.sites[i]);
            for j in 0..k {
                if j == i {
                    continue;
                }
                let on_bisector = |p: Point| {
                    (geometry::distance(p, v.sites[i]) - geometry::distance(p, v.sites[j])).abs()
                        <= tol.max(1e-9 * di)
                };
                if on_bisector(a) && on_bisector(b) && on_bisector(mid) {
                    adj[i].insert(j);
                    adj[j].insert(i);
                }
            }
        }
    }
    adj
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    /// Country index per region; countries are numbered by their smallest
    /// region id.
    pub country_of_region: Vec<usize>,
    pub n_countries: usize,
    /// Merged `(kept, absorbed)` country pairs in order, named by the
    /// smallest region id of each side.
    pub merges: Vec<(usize, usize)>,
    /// Set when a non-adjacent pair had to be merged.
    pub used_fallback: bool,
}

struct CountryAcc {
    regions: BTreeSet<usize>,
    sum: Vec<f64>,
    count: usize,
    centroid_sum: Point,
}

impl CountryAcc {
    fn mean_distance(&self, other: &CountryAcc) -> f64 {
        if self.count == 0 || other.count == 0 {
            return f64::INFINITY;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        self.sum
            .iter()
            .zip(&other.sum)
            .map(|(a, b)| {
                let d = a / na - b / nb;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn centroid(&self) -> Point {
        let n = self.regions.len() as f64;
        [self.centroid_sum[0] / n, self.centroid_sum[1] / n]
    }
}

/// Merges adjacent regions into `target` countries, always joining the
/// adjacent pair whose mean fused vectors are closest.
///
/// `members[r]` are row indices into `fused`. Ties go to the smaller
/// `(id, id)` pair. If the adjacency graph cannot reach `target`, the pair
/// with the nearest 2D centroids is merged and `used_fallback` is set.
pub fn merge_regions(
    members: &[Vec<usize>],
    adjacency: &[BTreeSet<usize>],
    region_centroids: &[Point],
    target: usize,
    fused: &FusedSet,
) -> Result<MergeResult> {
    let k = members.len();
    if target == 0 || target > k {
        return Err(CartoError::BadTarget { target, regions: k });
    }
    let dim = fused.dim();
    let mut countries: BTreeMap<usize, CountryAcc> = BTreeMap::new();
    for (r, rows) in members.iter().enumerate() {
        let mut sum = vec![0.0f64; dim];
        for &i in rows {
            for (s, &v) in sum.iter_mut().zip(fused.row(i)) {
                *s += f64::from(v);
            }
        }
        countries.insert(
            r,
            CountryAcc {
                regions: BTreeSet::from([r]),
                sum,
                count: rows.len(),
                centroid_sum: region_centroids[r],
            },
        );
    }
    let mut owner: Vec<usize> = (0..k).collect();
    let mut country_adj: BTreeMap<usize, BTreeSet<usize>> =
        (0..k).map(|r| (r, adjacency[r].iter().copied().filter(|&o| o != r).collect())).collect();
    let mut cache: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut merges = Vec::new();
    let mut used_fallback = false;

    while countries.len() > target {
        let mut best: Option<(f64, (usize, usize))> = None;
        for (&a, nbrs) in &country_adj {
            for &b in nbrs.range(a + 1..) {
                let d = *cache
                    .entry((a, b))
                    .or_insert_with(|| countries[&a].mean_distance(&countries[&b]));
                let better = match best {
                    None => true,
                    Some((bd, pair)) => d < bd || (d == bd && (a, b) < pair),
                };
                if better {
                    best = Some((d, (a, b)));
                }
            }
        }
        let (a, b) = match best {
            Some((_, pair)) => pair,
            None => {
                used_fallback = true;
                let ids: Vec<usize> = countries.keys().copied().collect();
                let mut pick: Option<(f64, (usize, usize))> = None;
                for (x, &a) in ids.iter().enumerate() {
                    for &b in &ids[x + 1..] {
                        let d = geometry::distance(countries[&a].centroid(), countries[&b].centroid());
                        if pick.is_none_or(|(pd, pp)| d < pd || (d == pd && (a, b) < pp)) {
                            pick = Some((d, (a, b)));
                        }
                    }
                }
                pick.expect("at least two countries").1
            }
        };
        let absorbed = countries.remove(&b).unwrap();
        let keep = countries.get_mut(&a).unwrap();
        keep.regions.extend(absorbed.regions.iter().copied());
        keep.sum.iter_mut().zip(&absorbed.sum).for_each(|(s, v)| *s += v);
        keep.count += absorbed.count;
        keep.centroid_sum[0] += absorbed.centroid_sum[0];
        keep.centroid_sum[1] += absorbed.centroid_sum[1];
        for &r in &absorbed.regions {
            owner[r] = a;
        }
        let b_adj = country_adj.remove(&b).unwrap_or_default();
        for nb in &b_adj {
            if let Some(s) = country_adj.get_mut(nb) {
                s.remove(&b);
                if *nb != a {
                    s.insert(a);
                }
            }
        }
        let a_adj = country_adj.get_mut(&a).unwrap();
        a_adj.extend(b_adj.into_iter().filter(|&x| x != a));
        a_adj.remove(&b);
        cache.retain(|&(x, y), _| x != a && y != a && x != b && y != b);
        merges.push((a, b));
    }

    let renumber: BTreeMap<usize, usize> = countries.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    Ok(MergeResult {
        country_of_region: owner.iter().map(|o| renumber[o]).collect(),
        n_countries: countries.len(),
        merges,
        used_fallback,
    })
}

/// Greedy coloring of the country adjacency graph, in country order.
pub fn color_countries(country_of_region: &[usize], n_countries: usize, adjacency: &[BTreeSet<usize>]) -> Vec<usize> {
    let mut nbrs = vec![BTreeSet::new(); n_countries];
    for (r, adj) in adjacency.iter().enumerate() {
        for &o in adj {
            let (a, b) = (country_of_region[r], country_of_region[o]);
            if a != b {
                nbrs[a].insert(b);
                nbrs[b].insert(a);
            }
        }
    }
    let mut colors: Vec<usize> = Vec::with_capacity(n_countries);
    for c in 0..n_countries {
        let used: BTreeSet<usize> = nbrs[c].iter().filter(|&&o| o < c).map(|&o| colors[o]).collect();
        colors.push((0..).find(|x| !used.contains(x)).unwrap());
    }
    colors
}

/// Largest axis-aligned rectangle inside a convex polygon, searching the
/// left and right edges on a grid of 1% of the polygon's width.
pub fn largest_inscribed_rect(poly: &[Point]) -> Rect {
    let bbox = Rect::bounding(poly.iter().copied()).expect("non-empty polygon");
    const STEPS: usize = 100;
    let xs: Vec<f64> = (0..=STEPS)
        .map(|i| bbox.min_x + bbox.width() * i as f64 / STEPS as f64)
        .collect();
    let sections: Vec<Option<(f64, f64)>> =
        xs.iter().map(|&x| geometry::convex_vertical_section(poly, x)).collect();
    let mut best: Option<(f64, Rect)> = None;
    for i in 0..xs.len() {
        let Some((lo_i, hi_i)) = sections[i] else { continue };
        for j in i + 1..xs.len() {
            let Some((lo_j, hi_j)) = sections[j] else { continue };
            let lo = lo_i.max(lo_j);
            let hi = hi_i.min(hi_j);
            if hi <= lo {
                continue;
            }
            let a = (xs[j] - xs[i]) * (hi - lo);
            if best.is_none_or(|(ba, _)| a > ba) {
                best = Some((a, Rect::new(xs[i], lo, xs[j], hi)));
            }
        }
    }
    match best {
        Some((_, r)) => r,
        None => {
            let c = geometry::polygon_centroid(poly);
            Rect::new(c[0], c[1], c[0], c[1])
        }
    }
}

/// Places a region's local layout strictly inside its polygon.
///
/// The layout is scaled uniformly and centered into the largest inscribed
/// rectangle; points that still fail the interior margin walk toward the
/// region centroid in steps of `min_separation`.
pub fn fit_local_layout(
    polygon: &[Point],
    centroid: Point,
    local: &[Point],
    min_separation: f64,
) -> Vec<Point> {
    let target = if geometry::convex_interior_margin(polygon, centroid) > 0.0 {
        centroid
    } else {
        geometry::polygon_centroid(polygon)
    };
    if local.len() <= 1 {
        return vec![target; local.len()];
    }
    let margin = min_separation.min(0.5 * geometry::convex_interior_margin(polygon, target));
    let inner = largest_inscribed_rect(polygon);
    let shrink = margin.min(0.25 * inner.width().min(inner.height()));
    let inner = inner.inset(shrink.max(0.0));
    let lb = Rect::bounding(local.iter().copied()).unwrap();
    let scale = {
        let sx = if lb.width() > 0.0 { inner.width() / lb.width() } else { f64::INFINITY };
        let sy = if lb.height() > 0.0 { inner.height() / lb.height() } else { f64::INFINITY };
        let s = sx.min(sy);
        if s.is_finite() { s } else { 0.0 }
    };
    let (lc, ic) = (lb.center(), inner.center());
    local
        .iter()
        .map(|p| {
            let mut q = [ic[0] + (p[0] - lc[0]) * scale, ic[1] + (p[1] - lc[1]) * scale];
            while geometry::convex_interior_margin(polygon, q) < margin {
                let d = geometry::distance(q, target);
                if d <= min_separation {
                    q = target;
                    break;
                }
                let t = min_separation / d;
                q = [q[0] + t * (target[0] - q[0]), q[1] + t * (target[1] - q[1])];
            }
            q
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-axis `(median, MAD)`.
pub fn median_mad(points: &[Point]) -> [(f64, f64); 2] {
    let mut out = [(0.0, 0.0); 2];
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut v: Vec<f64> = points.iter().map(|p| p[axis]).collect();
        let med = median(&mut v);
        let mut dev: Vec<f64> = points.iter().map(|p| (p[axis] - med).abs()).collect();
        *slot = (med, median(&mut dev));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NudgeResult {
    pub placements: Vec<Point>,
    pub flagged: Vec<bool>,
}

/// Pulls outliers toward the map center.
///
/// A point is an outlier when either coordinate deviates from its median by
/// more than `outlier_mad * MAD`, or when it lies outside `rect` inset by
/// `min_separation`. Each outlier advances along the ray to the center in
/// steps of 1% of the ray length (at least one step) until it is inside the
/// inset rectangle. Other points are untouched.
pub fn nudge_outliers(placements: &[Point], rect: &Rect, outlier_mad: f64, min_separation: f64) -> NudgeResult {
    if placements.is_empty() {
        return NudgeResult {
            placements: vec![],
            flagged: vec![],
        };
    }
    let stats = median_mad(placements);
    let inset = rect.inset(min_separation);
    let center = rect.center();
    let mut out = placements.to_vec();
    let mut flagged = vec![false; placements.len()];
    for (i, p) in placements.iter().enumerate() {
        let off_band = (0..2).any(|a| (p[a] - stats[a].0).abs() > outlier_mad * stats[a].1);
        if !(off_band || !inset.contains(*p)) {
            continue;
        }
        flagged[i] = true;
        for step in 1..=100 {
            let t = step as f64 / 100.0;
            let q = [p[0] + t * (center[0] - p[0]), p[1] + t * (center[1] - p[1])];
            if inset.contains(q) || step == 100 {
                out[i] = if step == 100 { center } else { q };
                break;
            }
        }
    }
    NudgeResult {
        placements: out,
        flagged,
    }
}

/// Affine map of a raw projection into `rect`, sized so the robust
/// `median ± outlier_mad * MAD` band on each axis fits the rectangle inset
/// by `min_separation`, with aspect ratio preserved. Points beyond the band
/// land outside and are left for [`nudge_outliers`].
pub fn scale_to_map(coords: &[Point], rect: &Rect, outlier_mad: f64, min_separation: f64) -> Vec<Point> {
    if coords.is_empty() {
        return vec![];
    }
    let stats = median_mad(coords);
    let bbox = Rect::bounding(coords.iter().copied()).unwrap();
    let band = |axis: usize| -> (f64, f64) {
        let (med, mad) = stats[axis];
        let (lo, hi) = if axis == 0 { (bbox.min_x, bbox.max_x) } else { (bbox.min_y, bbox.max_y) };
        if mad > 0.0 {
            ((med - outlier_mad * mad).max(lo), (med + outlier_mad * mad).min(hi))
        } else {
            (lo, hi)
        }
    };
    let (bx, by) = (band(0), band(1));
    let target = rect.inset(min_separation);
    let sx = if bx.1 > bx.0 { target.width() / (bx.1 - bx.0) } else { f64::INFINITY };
    let sy = if by.1 > by.0 { target.height() / (by.1 - by.0) } else { f64::INFINITY };
    let s = sx.min(sy);
    let s = if s.is_finite() { s } else { 0.0 };
    let src_c = [(bx.0 + bx.1) / 2.0, (by.0 + by.1) / 2.0];
    let dst_c = rect.center();
    coords
        .iter()
        .map(|p| [dst_c[0] + (p[0] - src_c[0]) * s, dst_c[1] + (p[1] - src_c[1]) * s])
        .collect()
}

/// Member nearest the centroid; ties go to the smaller id.
pub fn choose_representative<'a>(
    members: impl IntoIterator<Item = (&'a str, Point)>,
    centroid: Point,
) -> Result<&'a str> {
    members
        .into_iter()
        .map(|(id, p)| (geometry::distance_sq(p, centroid), id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
        .map(|(_, id)| id)
        .ok_or(CartoError::EmptyRegion(0))
}
