//! Level-of-detail selection for a viewport.
//!
//! Candidates inside the query box are ranked by a fixed priority: region
//! representatives, then pinned artworks, then everything else by
//! descending region size and id. A grid of `G x G` cells over the box
//! keeps at most one winner per cell. Grid sizes double from 4 up to 32 as
//! zoom grows, so every coarser grid is refined by every finer one and a
//! cell winner at a coarse level still wins its sub-cell at finer levels.
//! Winners are emitted by the level at which they first win and then by
//! priority; truncating that order to the budget keeps results nested
//! across zoom. The coarsest level admits representatives only.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::atlas::AtlasMap;
use crate::geometry::{Point, Rect};

pub const MAX_GRID: usize = 32;
const BASE_GRID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportQuery {
    pub bbox: Rect,
    pub zoom: f64,
    pub budget: usize,
}

/// Finest grid level for a zoom: `G = 4 * 2^level`, the largest power-of-two
/// multiple of 4 not exceeding `floor(4 + 4 * zoom)`, capped at 32.
pub fn grid_level(zoom: f64) -> usize {
    let raw = (BASE_GRID as f64 + BASE_GRID as f64 * zoom.max(0.0)).floor();
    let mut level = 0;
    while level < 3 && (BASE_GRID << (level + 1)) as f64 <= raw {
        level += 1;
    }
    level
}

pub fn grid_size(zoom: f64) -> usize {
    BASE_GRID << grid_level(zoom)
}

/// Cell of `p` in a `g x g` grid over `bbox`, clamped to the last row and
/// column for points on the max edges.
pub fn cell_of(bbox: &Rect, g: usize, p: Point) -> (usize, usize) {
    let fx = ((p[0] - bbox.min_x) / bbox.width() * g as f64).floor();
    let fy = ((p[1] - bbox.min_y) / bbox.height() * g as f64).floor();
    let clamp = |v: f64| (v.max(0.0) as usize).min(g - 1);
    (clamp(fx), clamp(fy))
}

#[derive(Debug, Clone)]
struct Entry {
    id: String,
    pos: Point,
    is_rep: bool,
    region_size: usize,
}

/// Placement index built once per atlas.
#[derive(Debug, Clone)]
pub struct LodIndex {
    entries: Vec<Entry>,
    bounds: Rect,
}

impl LodIndex {
    pub fn new(atlas: &AtlasMap) -> Self {
        let mut entries = Vec::with_capacity(atlas.placements.len());
        for r in &atlas.regions {
            for m in &r.member_ids {
                entries.push(Entry {
                    id: m.clone(),
                    pos: atlas.placements[m],
                    is_rep: *m == r.representative_id,
                    region_size: r.member_ids.len(),
                });
            }
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            entries,
            bounds: atlas.bounds,
        }
    }

    pub fn bounds(&self) -> Rect {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn select(&self, q: &ViewportQuery, pinned: &BTreeSet<String>) -> Vec<String> {
        if !q.bbox.is_valid() || !q.bbox.intersects(&self.bounds) || q.budget == 0 {
            return vec![];
        }
        let class = |e: &Entry| -> u8 {
            if e.is_rep {
                0
            } else if pinned.contains(&e.id) {
                1
            } else {
                2
            }
        };
        let mut cands: Vec<&Entry> = self.entries.iter().filter(|e| q.bbox.contains(e.pos)).collect();
        cands.sort_by(|a, b| {
            class(a)
                .cmp(&class(b))
                .then(b.region_size.cmp(&a.region_size))
                .then(a.id.cmp(&b.id))
        });
        let top = grid_level(q.zoom);
        // first level at which each candidate wins its cell
        let mut first_win: Vec<Option<usize>> = vec![None; cands.len()];
        for level in 0..=top {
            let g = BASE_GRID << level;
            let mut taken: HashMap<(usize, usize), ()> = HashMap::new();
            for (rank, e) in cands.iter().enumerate() {
                if level == 0 && !e.is_rep {
                    continue;
                }
                let cell = cell_of(&q.bbox, g, e.pos);
                if taken.insert(cell, ()).is_none() && first_win[rank].is_none() {
                    first_win[rank] = Some(level);
                }
            }
        }
        let mut winners: Vec<(usize, usize)> = first_win
            .iter()
            .enumerate()
            .filter_map(|(rank, l)| l.map(|l| (l, rank)))
            .collect();
        winners.sort_by(|a, b| match a.0.cmp(&b.0) {
            Ordering::Equal => a.1.cmp(&b.1),
            o => o,
        });
        winners
            .into_iter()
            .take(q.budget)
            .map(|(_, rank)| cands[rank].id.clone())
            .collect()
    }
}

pub fn lod_select(atlas: &AtlasMap, q: &ViewportQuery, pinned: &BTreeSet<String>) -> Vec<String> {
    LodIndex::new(atlas).select(q, pinned)
}
