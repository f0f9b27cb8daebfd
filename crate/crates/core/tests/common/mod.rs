#![allow(dead_code)]

pub mod traces;

use std::path::Path;
use std::sync::Arc;

use artcarto::atlas::{AtlasMap, BuildMeta, Country, Region};
use artcarto::cartograph::CartographyConfig;
use artcarto::corpus::{BlockKind, CorpusBundle};
use artcarto::curate::FusionConfig;
use artcarto::genclient::{BlockDims, GenerationClient, MockClient};
use artcarto::geometry::Rect;
use artcarto::pipeline::{build_atlas, BuildConfig, Built};
use artcarto::project::ProjectionConfig;
use artcarto::server::{AppState, Snapshot};
use artcarto::synth::{synth_corpus, SynthConfig};
use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn corpus(n: usize, seed: u64) -> CorpusBundle {
    synth_corpus(&SynthConfig {
        n_artworks: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .bundle
}

pub fn config(regions: usize, countries: usize) -> BuildConfig {
    BuildConfig {
        cartography: CartographyConfig {
            n_regions: regions,
            n_countries: countries,
            ..CartographyConfig::default()
        },
        ..BuildConfig::default()
    }
}

pub fn build(n: usize, regions: usize, countries: usize) -> (Arc<CorpusBundle>, Built) {
    let bundle = corpus(n, 7);
    let built = build_atlas(&bundle, &config(regions, countries)).unwrap();
    (Arc::new(bundle), built)
}

pub fn dims(bundle: &CorpusBundle) -> BlockDims {
    BlockDims {
        visual: bundle.block(BlockKind::Visual).dim(),
        joint: bundle.block(BlockKind::Joint).dim(),
        text: bundle.block(BlockKind::TextMeta).dim(),
    }
}

pub fn state_with(
    bundle: &Arc<CorpusBundle>,
    built: &Built,
    generator: Option<Arc<dyn GenerationClient>>,
    dir: &Path,
) -> Arc<AppState> {
    let snap = Snapshot::new(built.atlas.clone(), Some(built.prepared.clone()));
    Arc::new(AppState::new(Some(snap), Some(bundle.clone()), generator, dir.to_path_buf()).unwrap())
}

pub fn state(bundle: &Arc<CorpusBundle>, built: &Built, dir: &Path) -> Arc<AppState> {
    let mock: Arc<dyn GenerationClient> = Arc::new(MockClient::new(dims(bundle)));
    state_with(bundle, built, Some(mock), dir)
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Value,
    pub raw: Vec<u8>,
}

pub async fn call(app: &Router, method: &str, uri: &str, session: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(s) = session {
        req = req.header(artcarto::server::SESSION_HEADER, s);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let raw = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    let body = serde_json::from_slice(&raw).unwrap_or(Value::Null);
    Reply {
        status,
        headers,
        body,
        raw,
    }
}

pub async fn new_session(app: &Router) -> String {
    let r = call(app, "POST", "/api/session", None, None).await;
    assert_eq!(r.status, StatusCode::CREATED);
    r.body["session_id"].as_str().unwrap().to_string()
}

/// Hand-made atlas of `cols x rows` rectangular regions over a 1000 square,
/// each holding `per` artworks on a small diagonal offset from its center.
pub fn grid_atlas(cols: usize, rows: usize, per: usize) -> AtlasMap {
    let bounds = Rect::square(1000.0);
    let (w, h) = (1000.0 / cols as f64, 1000.0 / rows as f64);
    let mut regions = Vec::new();
    let mut placements = std::collections::BTreeMap::new();
    for j in 0..rows {
        for i in 0..cols {
            let id = j * cols + i;
            let (x0, y0) = (i as f64 * w, j as f64 * h);
            let c = [x0 + w / 2.0, y0 + h / 2.0];
            let members: Vec<String> = (0..per).map(|m| format!("r{id:02}m{m}")).collect();
            for (m, mid) in members.iter().enumerate() {
                placements.insert(mid.clone(), [c[0] + 5.0 * m as f64, c[1] + 5.0 * m as f64]);
            }
            regions.push(Region {
                id,
                polygon: vec![[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]],
                centroid_2d: c,
                representative_id: members[0].clone(),
                member_ids: members,
                country_id: 0,
            });
        }
    }
    AtlasMap {
        bounds,
        build_meta: BuildMeta {
            fusion: FusionConfig::default(),
            salient_k: 500,
            projection: ProjectionConfig::default(),
            cartography: CartographyConfig::default(),
            seed: 0,
            corpus_hash: String::new(),
            artwork_count: placements.len(),
            selected_keywords: 0,
            effective_regions: regions.len(),
            effective_countries: 1,
            merge_fallback: false,
            nudged_outliers: 0,
        },
        countries: vec![Country {
            id: 0,
            color_index: 0,
            region_ids: (0..regions.len()).collect(),
        }],
        regions,
        placements,
    }
}
