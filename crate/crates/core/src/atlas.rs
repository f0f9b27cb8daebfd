//! The hierarchical map document: countries, Voronoi regions and artwork
//! placements, with a canonical JSON encoding.
//!
//! Canonical JSON has lexicographically sorted keys and every float rounded
//! to six significant digits. [`AtlasMap::canonicalize`] pushes an atlas
//! through that encoding once, after which serialize/parse is an exact
//! round trip.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cartograph::CartographyConfig;
use crate::curate::FusionConfig;
use crate::geometry::{self, Point, Rect};
use crate::project::ProjectionConfig;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("atlas invariant `{name}` violated: {detail}")]
    Invariant { name: &'static str, detail: String },
    #[error("atlas JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn violated(name: &'static str, detail: impl Into<String>) -> AtlasError {
    AtlasError::Invariant {
        name,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Country {
    pub id: usize,
    pub color_index: usize,
    pub region_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub polygon: Vec<Point>,
    pub centroid_2d: Point,
    pub member_ids: Vec<String>,
    pub representative_id: String,
    pub country_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub fusion: FusionConfig,
    pub salient_k: usize,
    pub projection: ProjectionConfig,
    pub cartography: CartographyConfig,
    pub seed: u64,
    pub corpus_hash: String,
    pub artwork_count: usize,
    pub selected_keywords: usize,
    pub effective_regions: usize,
    pub effective_countries: usize,
    pub merge_fallback: bool,
    pub nudged_outliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasMap {
    pub bounds: Rect,
    pub build_meta: BuildMeta,
    pub countries: Vec<Country>,
    pub regions: Vec<Region>,
    pub placements: BTreeMap<String, Point>,
}

/// Rounds to six significant digits.
pub fn round_sig6(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn quantize(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            let q = round_sig6(n.as_f64().unwrap());
            *value = serde_json::Number::from_f64(q).map(Value::Number).unwrap_or(Value::Null);
        }
        Value::Array(items) => items.iter_mut().for_each(quantize),
        Value::Object(map) => map.values_mut().for_each(quantize),
        _ => {}
    }
}

/// Serializes any value with sorted keys and six-significant-digit floats.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut v = serde_json::to_value(value)?;
    quantize(&mut v);
    serde_json::to_string_pretty(&v)
}

impl AtlasMap {
    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("atlas serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AtlasError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Rounds every float the same way the JSON encoding does.
    pub fn canonicalize(&self) -> Self {
        Self::from_json(&self.to_json()).expect("canonical atlas parses")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), AtlasError> {
        fs::write(path, self.to_json()).map_err(|source| AtlasError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AtlasError> {
        let s = fs::read_to_string(path).map_err(|source| AtlasError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }

    pub fn region(&self, id: usize) -> Option<&Region> {
        self.regions.get(id).filter(|r| r.id == id)
    }

    /// Region id per placed artwork.
    pub fn region_of(&self) -> BTreeMap<&str, usize> {
        self.regions
            .iter()
            .flat_map(|r| r.member_ids.iter().map(move |m| (m.as_str(), r.id)))
            .collect()
    }

    /// Summary document without per-artwork placements.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct RegionSummary<'a> {
            id: usize,
            polygon: &'a [Point],
            centroid_2d: Point,
            representative_id: &'a str,
            country_id: usize,
            member_count: usize,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            bounds: Rect,
            build_meta: &'a BuildMeta,
            countries: &'a [Country],
            regions: Vec<RegionSummary<'a>>,
            atlas_hash: String,
        }
        let s = Summary {
            bounds: self.bounds,
            build_meta: &self.build_meta,
            countries: &self.countries,
            regions: self
                .regions
                .iter()
                .map(|r| RegionSummary {
                    id: r.id,
                    polygon: &r.polygon,
                    centroid_2d: r.centroid_2d,
                    representative_id: &r.representative_id,
                    country_id: r.country_id,
                    member_count: r.member_ids.len(),
                })
                .collect(),
            atlas_hash: self.content_hash(),
        };
        to_canonical_json(&s).expect("summary serializes")
    }

    /// Checks containment, partition and reference invariants.
    pub fn validate(&self, expected_ids: Option<&BTreeSet<String>>) -> Result<(), AtlasError> {
        if !self.bounds.is_valid() {
            return Err(violated("bounds_valid", format!("{:?}", self.bounds)));
        }
        let tol = 1e-9 * self.bounds.diagonal();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (i, r) in self.regions.iter().enumerate() {
            if r.id != i {
                return Err(violated("region_ids_dense", format!("region at {i} has id {}", r.id)));
            }
            if r.polygon.len() < 3 || geometry::signed_area(&r.polygon) <= 0.0 {
                return Err(violated("region_polygon_simple", format!("region {i}")));
            }
            if let Some(v) = r.polygon.iter().find(|v| !self.bounds.expand(tol).contains(**v)) {
                return Err(violated("polygon_inside_map", format!("region {i} vertex {v:?}")));
            }
            if !r.member_ids.contains(&r.representative_id) {
                return Err(violated(
                    "representative_is_member",
                    format!("region {i} representative {}", r.representative_id),
                ));
            }
            if r.country_id >= self.countries.len()
                || !self.countries[r.country_id].region_ids.contains(&r.id)
            {
                return Err(violated("country_contains_region", format!("region {i}")));
            }
            for m in &r.member_ids {
                if !seen.insert(m) {
                    return Err(violated("one_region_per_artwork", m.clone()));
                }
                let Some(&p) = self.placements.get(m) else {
                    return Err(violated("placement_exists", m.clone()));
                };
                if !p.iter().all(|v| v.is_finite())
                    || geometry::convex_interior_margin(&r.polygon, p) <= 0.0
                {
                    return Err(violated(
                        "placement_inside_region",
                        format!("{m} at {p:?} in region {i}"),
                    ));
                }
                if !self.bounds.contains_strict(p) {
                    return Err(violated("placement_inside_map", format!("{m} at {p:?}")));
                }
            }
        }
        if seen.len() != self.placements.len() {
            return Err(violated(
                "placement_has_region",
                format!("{} placements, {} region members", self.placements.len(), seen.len()),
            ));
        }
        let mut region_seen = BTreeSet::new();
        for (i, c) in self.countries.iter().enumerate() {
            if c.id != i || c.region_ids.is_empty() {
                return Err(violated("country_ids_dense", format!("country at {i}")));
            }
            for r in &c.region_ids {
                if !region_seen.insert(*r) || self.regions.get(*r).is_none_or(|x| x.country_id != i) {
                    return Err(violated("countries_partition_regions", format!("region {r}")));
                }
            }
        }
        if region_seen.len() != self.regions.len() {
            return Err(violated("countries_partition_regions", "unassigned region".to_string()));
        }
        if let Some(ids) = expected_ids {
            if ids.len() != seen.len() || ids.iter().any(|id| !seen.contains(id.as_str())) {
                return Err(violated("corpus_fully_placed", format!("{} expected, {} placed", ids.len(), seen.len())));
            }
        }
        Ok(())
    }
}
