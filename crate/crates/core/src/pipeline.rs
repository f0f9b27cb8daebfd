//! End-to-end atlas build: curate, fuse, project, regionize, assemble.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{AtlasError, AtlasMap, BuildMeta, Country, Region};
use crate::cartograph::{self, CartoError, CartographyConfig};
use crate::corpus::CorpusBundle;
use crate::curate::{self, CurateError, FusedSet, FusionConfig, ReducedCorpus, SalienceTable};
use crate::geometry::Point;
use crate::project::{self, MatrixView, ProjectError, ProjectionConfig};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Curate(#[from] CurateError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Carto(#[from] CartoError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error("no artwork is covered by the selected keywords")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub fusion: FusionConfig,
    pub salient_k: usize,
    pub projection: ProjectionConfig,
    pub cartography: CartographyConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            salient_k: curate::DEFAULT_SALIENT_K,
            projection: ProjectionConfig::default(),
            cartography: CartographyConfig::default(),
        }
    }
}

impl BuildConfig {
    pub fn from_meta(meta: &BuildMeta) -> Self {
        Self {
            fusion: meta.fusion,
            salient_k: meta.salient_k,
            projection: meta.projection,
            cartography: meta.cartography,
        }
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        self.fusion.validate()?;
        if self.salient_k == 0 {
            return Err(CurateError::ZeroTarget.into());
        }
        self.projection.validate()?;
        self.cartography.validate()?;
        Ok(())
    }
}

/// Curated corpus and its fused vectors.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub salience: SalienceTable,
    pub selected: Vec<String>,
    pub reduced: ReducedCorpus,
    pub fused: FusedSet,
}

pub fn prepare(bundle: &CorpusBundle, fusion: &FusionConfig, salient_k: usize) -> Result<Prepared, BuildError> {
    let salience = SalienceTable::from_corpus(bundle)?;
    let coverage = curate::coverage_from_corpus(bundle);
    let selected = curate::select_salient_keywords(&salience, &coverage, salient_k)?;
    let reduced = curate::reduce_corpus(bundle, &selected, &salience);
    let fused = curate::fuse_corpus(&reduced, fusion)?;
    Ok(Prepared {
        salience,
        selected,
        reduced,
        fused,
    })
}

#[derive(Debug, Clone)]
pub struct Built {
    pub atlas: AtlasMap,
    pub prepared: Prepared,
}

fn local_seed(seed: u64, region: usize) -> u64 {
    seed ^ (region as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the full map-making pipeline. The result is a pure function of the
/// corpus and `cfg`.
pub fn build_atlas(bundle: &CorpusBundle, cfg: &BuildConfig) -> Result<Built, BuildError> {
    cfg.validate()?;
    let prepared = prepare(bundle, &cfg.fusion, cfg.salient_k)?;
    let atlas = build_from_prepared(&prepared, bundle.content_hash(), cfg)?;
    Ok(Built { atlas, prepared })
}

pub fn build_from_prepared(prepared: &Prepared, corpus_hash: String, cfg: &BuildConfig) -> Result<AtlasMap, BuildError> {
    let fused = &prepared.fused;
    let n = fused.len();
    if n == 0 {
        return Err(BuildError::EmptyCorpus);
    }
    let carto = &cfg.cartography;
    let rect = carto.map_rect;
    let view = MatrixView::new(&fused.data, fused.dim());

    let raw: Vec<Point> = if n == 1 {
        vec![rect.center()]
    } else {
        project::project_global(&fused.ids, view, &cfg.projection)?.coords
    };
    let scaled = cartograph::scale_to_map(&raw, &rect, carto.outlier_mad, carto.min_separation);
    let nudged = cartograph::nudge_outliers(&scaled, &rect, carto.outlier_mad, carto.min_separation);
    let global = nudged.placements;

    let k = carto.n_regions.min(n);
    let km = cartograph::kmeans_2d(&global, k, carto.seed, carto.kmeans_max_iter)?;
    let vor = cartograph::voronoi_cells(&km.centroids, &rect, carto.min_separation);
    let adjacency = cartograph::cell_adjacency(&vor, &rect);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in km.assignments.iter().enumerate() {
        members[a].push(i);
    }
    if let Some(r) = members.iter().position(|m| m.is_empty()) {
        return Err(CartoError::EmptyRegion(r).into());
    }
    let target = carto.n_countries.min(k);
    let merge = cartograph::merge_regions(&members, &adjacency, &vor.sites, target, fused)?;
    let colors = cartograph::color_countries(&merge.country_of_region, merge.n_countries, &adjacency);

    let laid_out: Vec<(Region, Vec<(String, Point)>)> = members
        .par_iter()
        .enumerate()
        .map(|(r, rows)| -> Result<_, BuildError> {
            let polygon = vor.cells[r].clone();
            let centroid = vor.sites[r];
            let ids: Vec<String> = rows.iter().map(|&i| fused.ids[i].clone()).collect();
            let local: Vec<Point> = if rows.len() >= 2 {
                let dim = fused.dim();
                let mut data = Vec::with_capacity(rows.len() * dim);
                for &i in rows {
                    data.extend_from_slice(fused.row(i));
                }
                let lcfg = ProjectionConfig {
                    seed: local_seed(cfg.projection.seed, r),
                    ..cfg.projection
                };
                project::project_local(&ids, MatrixView::new(&data, dim), &lcfg)?.coords
            } else {
                vec![centroid]
            };
            let placed = cartograph::fit_local_layout(&polygon, centroid, &local, carto.min_separation);
            let mut member_ids = ids.clone();
            member_ids.sort();
            let region = Region {
                id: r,
                polygon,
                centroid_2d: centroid,
                member_ids,
                // chosen after quantization, below
                representative_id: String::new(),
                country_id: merge.country_of_region[r],
            };
            Ok((region, ids.into_iter().zip(placed).collect()))
        })
        .collect::<Result<_, _>>()?;

    let mut regions = Vec::with_capacity(k);
    let mut placements = BTreeMap::new();
    for (region, placed) in laid_out {
        placements.extend(placed);
        regions.push(region);
    }
    let countries: Vec<Country> = (0..merge.n_countries)
        .map(|c| Country {
            id: c,
            color_index: colors[c],
            region_ids: (0..k).filter(|&r| merge.country_of_region[r] == c).collect(),
        })
        .collect();

    let mut atlas = AtlasMap {
        bounds: rect,
        build_meta: BuildMeta {
            fusion: cfg.fusion,
            salient_k: cfg.salient_k,
            projection: cfg.projection,
            cartography: cfg.cartography,
            seed: cfg.projection.seed,
            corpus_hash,
            artwork_count: n,
            selected_keywords: prepared.selected.len(),
            effective_regions: k,
            effective_countries: merge.n_countries,
            merge_fallback: merge.used_fallback,
            nudged_outliers: nudged.flagged.iter().filter(|&&f| f).count(),
        },
        countries,
        regions,
        placements,
    }
    .canonicalize();
    for r in &mut atlas.regions {
        let placed = r.member_ids.iter().map(|m| (m.as_str(), atlas.placements[m]));
        r.representative_id = cartograph::choose_representative(placed, r.centroid_2d)?.to_string();
    }
    let expected: BTreeSet<String> = fused.ids.iter().cloned().collect();
    atlas.validate(Some(&expected))?;
    Ok(atlas)
}
