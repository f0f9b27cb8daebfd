//! HTTP API over an immutable atlas snapshot.
//!
//! Reads load the current snapshot once and answer entirely from it, so a
//! rebuild that swaps the snapshot mid-request cannot mix two atlases.
//! Sessions are identified by the `x-artcarto-session` header; their pins,
//! generations and events are appended to JSONL files under the data
//! directory and replayed on startup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex as StdMutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use arc_swap::ArcSwapOption;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

use crate::atlas::AtlasMap;
use crate::corpus::{self, Artwork, BlockKind, CorpusBundle};
use crate::curate::{self, FusedSet};
use crate::genclient::{BlockDims, GenError, GenerationClient, GenerationResult};
use crate::geometry::{self, Point, Rect};
use crate::lod::{self, LodIndex, ViewportQuery};
use crate::pipeline::{self, BuildConfig, Prepared};
use crate::trails;

pub const SESSION_HEADER: &str = "x-artcarto-session";
pub const HASH_HEADER: &str = "x-atlas-hash";
pub const NEIGHBORS: usize = 5;
pub const DEFAULT_BUDGET: usize = 256;
pub const MAX_BUDGET: usize = 10_000;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<u32>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retry_after: None,
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    fn unavailable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, m)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut res = (self.status, Json(json!({ "error": self.message }))).into_response();
        if let Some(s) = self.retry_after {
            res.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        res
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Serializes as `true` and only deserializes from `true`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance;

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bool(true)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        if bool::deserialize(d)? {
            Ok(Provenance)
        } else {
            Err(serde::de::Error::custom("flagged_generated must be true"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedGeneration {
    pub id: String,
    pub prompt: String,
    pub image_ref: String,
    pub position: Point,
    pub visual_neighbor_ids: Vec<String>,
    pub semantic_neighbor_ids: Vec<String>,
    pub flagged_generated: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum SessionRecord {
    Create { created_at_ms: u64 },
    Pin { artwork_id: String },
    Unpin { artwork_id: String },
    Generated { generation: PlacedGeneration },
}

#[derive(Debug, Clone, Default)]
pub struct Session {
    pub id: String,
    pub created_at_ms: u64,
    pub pins: Vec<String>,
    pub generated: Vec<PlacedGeneration>,
    last_event_ms: Option<u64>,
}

impl Session {
    fn apply(&mut self, rec: SessionRecord) {
        match rec {
            SessionRecord::Create { created_at_ms } => self.created_at_ms = created_at_ms,
            SessionRecord::Pin { artwork_id } => {
                if !self.pins.contains(&artwork_id) {
                    self.pins.push(artwork_id);
                }
            }
            SessionRecord::Unpin { artwork_id } => self.pins.retain(|p| *p != artwork_id),
            SessionRecord::Generated { generation } => self.generated.push(generation),
        }
    }
}

/// Everything a read request needs, built once per atlas.
pub struct Snapshot {
    pub atlas: AtlasMap,
    pub hash: String,
    summary: String,
    lod: LodIndex,
    region_of: HashMap<String, usize>,
    prepared: Option<Prepared>,
}

impl Snapshot {
    pub fn new(atlas: AtlasMap, prepared: Option<Prepared>) -> Self {
        let hash = atlas.content_hash();
        let summary = atlas.summary_json();
        let lod = LodIndex::new(&atlas);
        let region_of = atlas
            .region_of()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            atlas,
            hash,
            summary,
            lod,
            region_of,
            prepared,
        }
    }

    fn artwork(&self, id: &str) -> Option<&Artwork> {
        self.prepared.as_ref()?.reduced.bundle.artworks.get(id)
    }

    fn fused(&self) -> ApiResult<&FusedSet> {
        self.prepared
            .as_ref()
            .map(|p| &p.fused)
            .ok_or_else(|| ApiError::unavailable("no corpus loaded"))
    }
}

/// `k` nearest rows to `query` over `range` of the fused vectors, ties by
/// row order, skipping `exclude`.
pub fn nearest_in_span(
    fused: &FusedSet,
    query: &[f32],
    range: std::ops::Range<usize>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..fused.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| {
            let row = &fused.row(i)[range.clone()];
            let dist = row
                .iter()
                .zip(&query[range.clone()])
                .map(|(&a, &b)| {
                    let t = f64::from(a) - f64::from(b);
                    t * t
                })
                .sum::<f64>();
            (dist, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atlas_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AppState {
    snapshot: ArcSwapOption<Snapshot>,
    corpus: Option<Arc<CorpusBundle>>,
    generator: Option<Arc<dyn GenerationClient>>,
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    building: AtomicBool,
    jobs: StdMutex<BTreeMap<String, JobStatus>>,
}

fn random_token() -> String {
    format!("{:032x}", rand::rng().random::<u128>())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn valid_token(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

fn append_lines<T: Serialize>(path: &Path, values: &[T]) -> std::io::Result<()> {
    let mut buf = String::new();
    for v in values {
        buf.push_str(&serde_json::to_string(v).map_err(std::io::Error::other)?);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(buf.as_bytes())?;
    f.sync_data()
}

impl AppState {
    /// Opens the data directory and replays every session log in it.
    pub fn new(
        snapshot: Option<Snapshot>,
        corpus: Option<Arc<CorpusBundle>>,
        generator: Option<Arc<dyn GenerationClient>>,
        data_dir: PathBuf,
    ) -> anyhow::Result<Self> {
        fs::create_dir_all(data_dir.join("sessions"))?;
        fs::create_dir_all(data_dir.join("events"))?;
        let state = Self {
            snapshot: ArcSwapOption::from(snapshot.map(Arc::new)),
            corpus,
            generator,
            data_dir,
            sessions: RwLock::new(HashMap::new()),
            building: AtomicBool::new(false),
            jobs: StdMutex::new(BTreeMap::new()),
        };
        state.replay()?;
        Ok(state)
    }

    fn session_log(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(format!("{id}.jsonl"))
    }

    fn event_log(&self, id: &str) -> PathBuf {
        self.data_dir.join("events").join(format!("{id}.jsonl"))
    }

    fn replay(&self) -> anyhow::Result<()> {
        let mut sessions = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        for entry in fs::read_dir(self.data_dir.join("sessions"))? {
            let path = entry?.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).filter(|s| valid_token(s)) else {
                continue;
            };
            let mut s = Session {
                id: id.to_string(),
                ..Session::default()
            };
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SessionRecord =
                    serde_json::from_str(&line).with_context(|| format!("{}", path.display()))?;
                s.apply(rec);
            }
            let events = self.event_log(id);
            if events.exists() {
                let text = fs::read_to_string(&events)?;
                s.last_event_ms = text
                    .lines()
                    .rev()
                    .find(|l| !l.trim().is_empty())
                    .map(|l| serde_json::from_str::<trails::TrajectoryEvent>(l).map(|e| e.t_ms))
                    .transpose()
                    .with_context(|| format!("{}", events.display()))?;
            }
            sessions.insert(id.to_string(), Arc::new(Mutex::new(s)));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.load_full()
    }

    /// Installs a new snapshot atomically.
    pub fn swap(&self, snap: Snapshot) {
        self.snapshot.store(Some(Arc::new(snap)));
    }

    fn current(&self) -> ApiResult<Arc<Snapshot>> {
        self.snapshot().ok_or_else(|| ApiError::unavailable("no atlas loaded"))
    }

    fn session(&self, headers: &HeaderMap) -> ApiResult<Arc<Mutex<Session>>> {
        let token = headers
            .get(SESSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing session header"))?;
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown session"))
    }

    fn optional_session(&self, headers: &HeaderMap) -> ApiResult<Option<Arc<Mutex<Session>>>> {
        if headers.contains_key(SESSION_HEADER) {
            self.session(headers).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn create_session(&self) -> anyhow::Result<String> {
        let id = random_token();
        let created_at_ms = now_ms();
        append_line(&self.session_log(&id), &SessionRecord::Create { created_at_ms })?;
        let s = Session {
            id: id.clone(),
            created_at_ms,
            ..Session::default()
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn set_job(&self, status: JobStatus) {
        self.jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(status.id.clone(), status);
    }
}

fn with_hash(snap: &Snapshot, body: Value) -> Response {
    let mut res = Json(body).into_response();
    if let Ok(v) = HeaderValue::from_str(&snap.hash) {
        res.headers_mut().insert(HASH_HEADER, v);
    }
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/map", get(get_map))
        .route("/api/viewport", get(get_viewport))
        .route("/api/region/{id}", get(get_region))
        .route("/api/artwork/{id}", get(get_artwork))
        .route("/api/pins", get(get_pins).post(add_pin))
        .route("/api/pins/{id}", delete(remove_pin))
        .route("/api/generate", post(generate))
        .route("/api/events", post(post_events))
        .route("/api/rebuild", post(start_rebuild))
        .route("/api/rebuild/{id}", get(rebuild_status))
        .with_state(state)
}

async fn create_session(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let id = st.create_session().map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn get_map(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    let snap = st.current()?;
    let etag = format!("\"{}\"", snap.hash);
    let hash = HeaderValue::from_str(&snap.hash).map_err(ApiError::internal)?;
    let tag = HeaderValue::from_str(&etag).map_err(ApiError::internal)?;
    if headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(etag.as_str()) {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, tag), (HASH_HEADER.parse().unwrap(), hash)]).into_response());
    }
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::ETAG, tag),
            (HASH_HEADER.parse().unwrap(), hash),
        ],
        snap.summary.clone(),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct ViewportParams {
    minx: f64,
    miny: f64,
    maxx: f64,
    maxy: f64,
    #[serde(default)]
    zoom: f64,
    budget: Option<usize>,
}

async fn get_viewport(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    params: Result<Query<ViewportParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(p) = params.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let snap = st.current()?;
    let bbox = Rect::new(p.minx, p.miny, p.maxx, p.maxy);
    if !bbox.is_valid() {
        return Err(ApiError::bad_request("malformed bbox"));
    }
    if !bbox.intersects(&snap.atlas.bounds) {
        return Err(ApiError::bad_request("bbox does not intersect the map"));
    }
    if !p.zoom.is_finite() || p.zoom < 0.0 {
        return Err(ApiError::bad_request("zoom must be a non-negative number"));
    }
    let budget = p.budget.unwrap_or(DEFAULT_BUDGET).min(MAX_BUDGET);
    let (pins, generated) = match st.optional_session(&headers)? {
        Some(s) => {
            let s = s.lock().await;
            (s.pins.clone(), s.generated.clone())
        }
        None => (Vec::new(), Vec::new()),
    };
    let pinned: BTreeSet<String> = pins.iter().cloned().collect();
    let q = ViewportQuery {
        bbox,
        zoom: p.zoom,
        budget,
    };
    let mut ids = snap.lod.select(&q, &pinned);
    let chosen: BTreeSet<&String> = ids.iter().collect();
    let extra: Vec<String> = pins
        .iter()
        .filter(|id| !chosen.contains(id))
        .filter(|id| snap.atlas.placements.get(*id).is_some_and(|&pt| bbox.contains(pt)))
        .cloned()
        .collect();
    ids.extend(extra);
    let artworks: Vec<Value> = ids
        .iter()
        .map(|id| {
            let pt = snap.atlas.placements[id];
            json!({
                "id": id,
                "x": pt[0],
                "y": pt[1],
                "region_id": snap.region_of[id],
                "thumbnail_uri": snap.artwork(id).map(|a| a.image_uri.as_str()),
                "pinned": pinned.contains(id),
            })
        })
        .collect();
    let generated: Vec<&PlacedGeneration> = generated.iter().filter(|g| bbox.contains(g.position)).collect();
    Ok(with_hash(
        &snap,
        json!({
            "atlas_hash": snap.hash,
            "grid": lod::grid_size(p.zoom),
            "artworks": artworks,
            "generated": generated,
        }),
    ))
}

async fn get_region(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let snap = st.current()?;
    let region = id
        .parse::<usize>()
        .ok()
        .and_then(|i| snap.atlas.region(i))
        .ok_or_else(|| ApiError::not_found(format!("unknown region {id}")))?;
    let c = region.centroid_2d;
    let mut members: Vec<(f64, &String, Point)> = region
        .member_ids
        .iter()
        .map(|m| {
            let p = snap.atlas.placements[m];
            (geometry::distance_sq(p, c), m, p)
        })
        .collect();
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let list: Vec<Value> = members
        .iter()
        .map(|(_, m, p)| {
            let a = snap.artwork(m);
            json!({
                "id": m,
                "title": a.map(|a| a.title.as_str()),
                "artist": a.map(|a| a.artist.as_str()),
                "x": p[0],
                "y": p[1],
            })
        })
        .collect();
    Ok(with_hash(
        &snap,
        json!({
            "atlas_hash": snap.hash,
            "id": region.id,
            "country_id": region.country_id,
            "centroid_2d": region.centroid_2d,
            "representative_id": region.representative_id,
            "members": list,
        }),
    ))
}

fn neighbor_ids(fused: &FusedSet, query: &[f32], exclude: Option<usize>) -> (Vec<String>, Vec<String>) {
    let name = |v: Vec<usize>| v.into_iter().map(|i| fused.ids[i].clone()).collect();
    (
        name(nearest_in_span(fused, query, fused.spans.visual_range(), NEIGHBORS, exclude)),
        name(nearest_in_span(fused, query, fused.spans.semantic_range(), NEIGHBORS, exclude)),
    )
}

async fn get_artwork(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let snap = st.current()?;
    let fused = snap.fused()?;
    let (Some(row), Some(&pt)) = (fused.index_of(&id), snap.atlas.placements.get(&id)) else {
        return Err(ApiError::not_found(format!("unknown artwork {id}")));
    };
    let art = snap.artwork(&id).ok_or_else(|| ApiError::not_found(format!("unknown artwork {id}")))?;
    let (visual, semantic) = neighbor_ids(fused, fused.row(row), Some(row));
    let primary = snap.prepared.as_ref().and_then(|p| p.reduced.primary.get(&id));
    Ok(with_hash(
        &snap,
        json!({
            "atlas_hash": snap.hash,
            "artwork": art,
            "primary_keyword": primary,
            "x": pt[0],
            "y": pt[1],
            "region_id": snap.region_of[&id],
            "visual_neighbor_ids": visual,
            "semantic_neighbor_ids": semantic,
        }),
    ))
}

fn pins_body(snap: Option<&Snapshot>, pins: &[String]) -> Value {
    let list: Vec<Value> = pins
        .iter()
        .map(|p| {
            let stale = snap.is_none_or(|s| !s.atlas.placements.contains_key(p));
            json!({ "artwork_id": p, "stale": stale })
        })
        .collect();
    json!({ "pins": list })
}

async fn get_pins(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    let session = st.session(&headers)?;
    let pins = session.lock().await.pins.clone();
    let snap = st.snapshot();
    Ok(Json(pins_body(snap.as_deref(), &pins)).into_response())
}

#[derive(Debug, Deserialize)]
struct PinRequest {
    artwork_id: String,
}

async fn add_pin(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<PinRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let session = st.session(&headers)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let snap = st.current()?;
    if !snap.atlas.placements.contains_key(&req.artwork_id) {
        return Err(ApiError::not_found(format!("unknown artwork {}", req.artwork_id)));
    }
    let mut s = session.lock().await;
    if !s.pins.contains(&req.artwork_id) {
        let rec = SessionRecord::Pin {
            artwork_id: req.artwork_id.clone(),
        };
        append_line(&st.session_log(&s.id), &rec).map_err(ApiError::internal)?;
        s.apply(rec);
    }
    Ok(Json(pins_body(Some(&snap), &s.pins)).into_response())
}

async fn remove_pin(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let session = st.session(&headers)?;
    let snap = st.snapshot();
    let mut s = session.lock().await;
    let known = snap.as_ref().is_some_and(|x| x.atlas.placements.contains_key(&id));
    if s.pins.contains(&id) {
        let rec = SessionRecord::Unpin { artwork_id: id };
        append_line(&st.session_log(&s.id), &rec).map_err(ApiError::internal)?;
        s.apply(rec);
    } else if !known {
        return Err(ApiError::not_found(format!("unknown artwork {id}")));
    }
    Ok(Json(pins_body(snap.as_deref(), &s.pins)).into_response())
}

fn block_dims(bundle: &CorpusBundle) -> BlockDims {
    BlockDims {
        visual: bundle.block(BlockKind::Visual).dim(),
        joint: bundle.block(BlockKind::Joint).dim(),
        text: bundle.block(BlockKind::TextMeta).dim(),
    }
}

/// Seed derived from the generation id.
fn jitter_seed(generation_id: &str) -> u64 {
    let d = Sha256::digest(generation_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Centroid of the neighbors plus a seeded offset of length at most
/// `2 * min_separation`, clamped into the map inset by `min_separation`.
pub fn place_generation(neighbors: &[Point], generation_id: &str, bounds: &Rect, min_separation: f64) -> Point {
    let n = neighbors.len().max(1) as f64;
    let c = neighbors
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n]);
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed(generation_id));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = rng.random_range(0.0..=2.0 * min_separation);
    let p = [c[0] + radius * angle.cos(), c[1] + radius * angle.sin()];
    let m = min_separation.min(0.25 * bounds.width().min(bounds.height()));
    let inner = bounds.inset(m);
    [p[0].clamp(inner.min_x, inner.max_x), p[1].clamp(inner.min_y, inner.max_y)]
}

/// Places a generation result against a snapshot.
pub fn place_result(snap: &Snapshot, prompt: &str, result: GenerationResult, id: String) -> ApiResult<PlacedGeneration> {
    let fused = snap.fused()?;
    let fusion = snap.atlas.build_meta.fusion;
    let f = curate::fuse(&id, &result.visual, &result.joint, &result.text, &fusion)
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    if f.spans != fused.spans {
        return Err(ApiError::new(StatusCode::BAD_GATEWAY, "generation dims do not match the corpus"));
    }
    let (visual, semantic) = neighbor_ids(fused, &f.vector, None);
    let pts: Vec<Point> = visual.iter().map(|v| snap.atlas.placements[v]).collect();
    let position = place_generation(
        &pts,
        &id,
        &snap.atlas.bounds,
        snap.atlas.build_meta.cartography.min_separation,
    );
    Ok(PlacedGeneration {
        id,
        prompt: prompt.to_string(),
        image_ref: result.image_ref,
        position,
        visual_neighbor_ids: visual,
        semantic_neighbor_ids: semantic,
        flagged_generated: Provenance,
    })
}

#[derive(Debug, Deserialize)]
struct GenerateRequest {
    prompt: String,
}

async fn generate(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<GenerateRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let session = st.session(&headers)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if req.prompt.trim().is_empty() {
        return Err(ApiError::bad_request("empty prompt"));
    }
    let snap = st.current()?;
    let generator = st
        .generator
        .clone()
        .ok_or_else(|| ApiError::unavailable("no generation client configured"))?;
    let prompt = req.prompt.clone();
    let result = tokio::task::spawn_blocking(move || generator.generate(&prompt))
        .await
        .map_err(ApiError::internal)?;
    let result = result.map_err(|e| {
        let mut err = ApiError::new(StatusCode::BAD_GATEWAY, e.to_string());
        if matches!(e, GenError::Service(_)) {
            err.retry_after = Some(5);
        }
        err
    })?;
    if let Some(bundle) = &st.corpus {
        result
            .check(&block_dims(bundle))
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    }
    let placed = place_result(&snap, &req.prompt, result, random_token())?;
    let mut s = session.lock().await;
    let rec = SessionRecord::Generated {
        generation: placed.clone(),
    };
    append_line(&st.session_log(&s.id), &rec).map_err(ApiError::internal)?;
    s.apply(rec);
    drop(s);
    let mut body = serde_json::to_value(&placed).map_err(ApiError::internal)?;
    body["atlas_hash"] = json!(snap.hash);
    Ok(with_hash(&snap, body))
}

async fn post_events(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<Value>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let session = st.session(&headers)?;
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let values = body
        .as_array()
        .ok_or_else(|| ApiError::bad_request("expected a JSON array of events"))?;
    let mut s = session.lock().await;
    let events = trails::parse_batch(values, s.last_event_ms).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if !events.is_empty() {
        append_lines(&st.event_log(&s.id), &events).map_err(ApiError::internal)?;
        s.last_event_ms = events.last().map(|e| e.t_ms);
    }
    Ok(Json(json!({ "accepted": events.len() })).into_response())
}

fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Overlays a partial JSON config onto `base`.
pub fn merged_config(base: &BuildConfig, patch: Value) -> Result<BuildConfig, String> {
    if !patch.is_object() {
        return Err("rebuild body must be a JSON object".into());
    }
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    if let Some(obj) = patch.as_object() {
        if let Some(k) = obj.keys().find(|k| v.get(k.as_str()).is_none()) {
            return Err(format!("unknown field `{k}`"));
        }
    }
    merge_json(&mut v, patch);
    let cfg: BuildConfig = serde_json::from_value(v).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

async fn start_rebuild(
    State(st): State<Arc<AppState>>,
    body: Result<Json<Value>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(patch) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let corpus = st.corpus.clone().ok_or_else(|| ApiError::unavailable("no corpus loaded"))?;
    let base = st
        .snapshot()
        .map(|s| BuildConfig::from_meta(&s.atlas.build_meta))
        .unwrap_or_default();
    let cfg = merged_config(&base, patch).map_err(ApiError::bad_request)?;
    if st
        .building
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(StatusCode::CONFLICT, "a rebuild is already running"));
    }
    let id = random_token();
    st.set_job(JobStatus {
        id: id.clone(),
        state: JobState::Running,
        atlas_hash: None,
        error: None,
    });
    let job = id.clone();
    let state = st.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = pipeline::build_atlas(&corpus, &cfg);
        let status = match outcome {
            Ok(built) => {
                let snap = Snapshot::new(built.atlas, Some(built.prepared));
                let hash = snap.hash.clone();
                state.swap(snap);
                JobStatus {
                    id: job,
                    state: JobState::Succeeded,
                    atlas_hash: Some(hash),
                    error: None,
                }
            }
            Err(e) => JobStatus {
                id: job,
                state: JobState::Failed,
                atlas_hash: None,
                error: Some(e.to_string()),
            },
        };
        state.set_job(status);
        state.building.store(false, Ordering::Release);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

async fn rebuild_status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    st.job(&id)
        .map(|j| Json(j).into_response())
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub atlas: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub gen_url: Option<String>,
    pub data_dir: PathBuf,
}

/// Loads the corpus and atlas. With a corpus but no atlas file the atlas is
/// built with default settings (and written to the atlas path if one is
/// set). The corpus is re-curated with the atlas's own build settings so
/// neighbor queries match the map.
pub fn load_snapshot(cfg: &ServerConfig) -> anyhow::Result<(Option<Snapshot>, Option<Arc<CorpusBundle>>)> {
    let corpus = match &cfg.corpus {
        Some(p) => Some(Arc::new(corpus::load_corpus(p)?)),
        None => None,
    };
    let atlas = match &cfg.atlas {
        Some(p) if p.exists() => Some(AtlasMap::load(p)?),
        _ => None,
    };
    let snap = match (atlas, &corpus) {
        (Some(atlas), Some(bundle)) => {
            let meta = &atlas.build_meta;
            let prepared = pipeline::prepare(bundle, &meta.fusion, meta.salient_k)?;
            let ids: BTreeSet<&String> = prepared.fused.ids.iter().collect();
            if ids.len() != atlas.placements.len() || atlas.placements.keys().any(|k| !ids.contains(k)) {
                anyhow::bail!("atlas placements do not match the curated corpus");
            }
            atlas.validate(None)?;
            Some(Snapshot::new(atlas, Some(prepared)))
        }
        (Some(atlas), None) => {
            atlas.validate(None)?;
            Some(Snapshot::new(atlas, None))
        }
        (None, Some(bundle)) => {
            let built = pipeline::build_atlas(bundle, &BuildConfig::default())?;
            if let Some(p) = &cfg.atlas {
                built.atlas.save(p)?;
            }
            Some(Snapshot::new(built.atlas, Some(built.prepared)))
        }
        (None, None) => None,
    };
    Ok((snap, corpus))
}

pub fn generator_for(cfg: &ServerConfig, corpus: Option<&CorpusBundle>) -> Option<Arc<dyn GenerationClient>> {
    let dims = block_dims(corpus?);
    Some(match &cfg.gen_url {
        Some(url) => Arc::new(crate::genclient::LiveClient::new(url, dims, crate::genclient::DEFAULT_CONCURRENCY)),
        None => Arc::new(crate::genclient::MockClient::new(dims)),
    })
}

pub async fn serve(cfg: ServerConfig, port: u16) -> anyhow::Result<()> {
    let (snap, corpus) = load_snapshot(&cfg)?;
    if snap.is_none() {
        tracing::warn!("no atlas or corpus configured; map endpoints will answer 503");
    }
    let generator = generator_for(&cfg, corpus.as_deref());
    if cfg.gen_url.is_none() && generator.is_some() {
        tracing::info!("ARTCARTO_GEN_URL unset; using the offline mock generator");
    }
    let state = Arc::new(AppState::new(snap, corpus, generator, cfg.data_dir.clone())?);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_stays_near_neighbors() {
        let bounds = Rect::square(100.0);
        let pts = [[10.0, 10.0], [12.0, 11.0], [11.0, 14.0]];
        for i in 0..50 {
            let p = place_generation(&pts, &format!("g{i}"), &bounds, 0.5);
            assert!(p[0] >= 9.0 && p[0] <= 13.0 && p[1] >= 9.0 && p[1] <= 15.0, "{p:?}");
        }
        let edge = place_generation(&[[0.01, 0.01]], "g", &bounds, 0.5);
        assert!(edge[0] >= 0.5 && edge[1] >= 0.5);
    }

    #[test]
    fn provenance_only_true() {
        assert!(serde_json::from_str::<Provenance>("false").is_err());
        assert_eq!(serde_json::to_string(&Provenance).unwrap(), "true");
    }

    #[test]
    fn config_patch_merges_and_rejects_unknown() {
        let base = BuildConfig::default();
        let c = merged_config(&base, json!({"fusion": {"w_text": 0.0}})).unwrap();
        assert_eq!(c.fusion.w_text, 0.0);
        assert_eq!(c.fusion.w_visual, 1.0);
        assert!(merged_config(&base, json!({"colour": 1})).is_err());
        assert!(merged_config(&base, json!({"fusion": {"w_visual": -1.0}})).is_err());
    }
}
