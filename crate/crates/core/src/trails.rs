//! Exploration-trace analytics: moves, behavior segments (jump, wander,
//! revisit, fixation), marginal-band collection statistics and reports.
//!
//! Every distance threshold is a fraction of the map diagonal, so scaling a
//! trace and its map together leaves all labels unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::atlas::AtlasMap;
use crate::geometry::{self, Point, Rect};

#[derive(Debug, Error)]
pub enum TrailError {
    #[error("unknown event kind `{0}`")]
    UnknownKind(String),
    #[error("event {index}: {detail}")]
    Schema { index: usize, detail: String },
    #[error("event {index}: t_ms {t_ms} is earlier than the previous event ({prev})")]
    OutOfOrder { index: usize, t_ms: u64, prev: u64 },
    #[error("trace has no events")]
    EmptyTrace,
    #[error("map diagonal must be positive")]
    BadDiagonal,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Pan,
    Zoom,
    Click,
    Pin,
    Unpin,
    Focus,
    Generate,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Pan,
        EventKind::Zoom,
        EventKind::Click,
        EventKind::Pin,
        EventKind::Unpin,
        EventKind::Focus,
        EventKind::Generate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Pan => "pan",
            EventKind::Zoom => "zoom",
            EventKind::Click => "click",
            EventKind::Pin => "pin",
            EventKind::Unpin => "unpin",
            EventKind::Focus => "focus",
            EventKind::Generate => "generate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Events that move the camera.
    pub fn is_camera(self) -> bool {
        matches!(self, EventKind::Pan | EventKind::Zoom | EventKind::Focus)
    }

    /// Everything that is not pure navigation.
    pub fn is_interaction(self) -> bool {
        !matches!(self, EventKind::Pan | EventKind::Zoom)
    }

    fn needs_artwork(self) -> bool {
        matches!(self, EventKind::Click | EventKind::Pin | EventKind::Unpin | EventKind::Focus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEvent {
    pub t_ms: u64,
    pub kind: EventKind,
    pub x: f64,
    pub y: f64,
    pub zoom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artwork_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl TrajectoryEvent {
    pub fn pos(&self) -> Point {
        [self.x, self.y]
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.x.is_finite() && self.y.is_finite() && self.zoom.is_finite()) {
            return Err("coordinates and zoom must be finite".into());
        }
        if self.artwork_id.is_some() != self.kind.needs_artwork() {
            return Err(format!(
                "artwork_id must be {} for {}",
                if self.kind.needs_artwork() { "present" } else { "absent" },
                self.kind.as_str()
            ));
        }
        if self.prompt.is_some() != (self.kind == EventKind::Generate) {
            return Err(format!("prompt is only allowed (and required) for generate, got {}", self.kind.as_str()));
        }
        Ok(())
    }
}

/// Parses one event, reporting an unrecognized `kind` by name.
pub fn parse_event(index: usize, value: &Value) -> Result<TrajectoryEvent, TrailError> {
    let schema = |detail: String| TrailError::Schema { index, detail };
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("missing string field `kind`".into()))?;
    if EventKind::parse(kind).is_none() {
        return Err(TrailError::UnknownKind(kind.to_string()));
    }
    let e: TrajectoryEvent = serde_json::from_value(value.clone()).map_err(|e| schema(e.to_string()))?;
    e.validate().map_err(schema)?;
    Ok(e)
}

/// Validates a batch: schema per event, then non-decreasing `t_ms`
/// starting from `after` when given.
pub fn parse_batch(values: &[Value], after: Option<u64>) -> Result<Vec<TrajectoryEvent>, TrailError> {
    let mut out = Vec::with_capacity(values.len());
    let mut prev = after;
    for (i, v) in values.iter().enumerate() {
        let e = parse_event(i, v)?;
        if let Some(p) = prev {
            if e.t_ms < p {
                return Err(TrailError::OutOfOrder {
                    index: i,
                    t_ms: e.t_ms,
                    prev: p,
                });
            }
        }
        prev = Some(e.t_ms);
        out.push(e);
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TrajectoryEvent>, TrailError> {
    let values = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Value>(l).map_err(|e| TrailError::Schema {
                index: i,
                detail: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    parse_batch(&values, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub session_id: String,
    pub events: Vec<TrajectoryEvent>,
    pub diagonal: f64,
}

impl Trace {
    pub fn new(session_id: impl Into<String>, events: Vec<TrajectoryEvent>, diagonal: f64) -> Result<Self, TrailError> {
        if events.is_empty() {
            return Err(TrailError::EmptyTrace);
        }
        if !(diagonal > 0.0 && diagonal.is_finite()) {
            return Err(TrailError::BadDiagonal);
        }
        for (i, w) in events.windows(2).enumerate() {
            if w[1].t_ms < w[0].t_ms {
                return Err(TrailError::OutOfOrder {
                    index: i + 1,
                    t_ms: w[1].t_ms,
                    prev: w[0].t_ms,
                });
            }
        }
        Ok(Self {
            session_id: session_id.into(),
            events,
            diagonal,
        })
    }

    /// Camera center after each event. Before the first camera event the
    /// event's own position is used.
    pub fn camera_path(&self) -> Vec<Point> {
        let mut cam: Option<Point> = None;
        self.events
            .iter()
            .map(|e| {
                if e.kind.is_camera() {
                    cam = Some(e.pos());
                }
                cam.unwrap_or(e.pos())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub jump: f64,
    pub small: f64,
    pub min_run: usize,
    pub r_return: f64,
    pub r_away: f64,
    pub time_share: f64,
    pub collect_share: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            jump: 0.15,
            small: 0.05,
            min_run: 3,
            r_return: 0.08,
            r_away: 0.20,
            time_share: 0.40,
            collect_share: 0.50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub from_idx: usize,
    pub to_idx: usize,
    pub from: Point,
    pub to: Point,
    pub displacement_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Jump,
    Wander,
    Revisit,
    Fixation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSegment {
    pub kind: SegmentKind,
    pub start_idx: usize,
    pub end_idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<usize>,
}

fn segment(kind: SegmentKind, start_idx: usize, end_idx: usize) -> BehaviorSegment {
    BehaviorSegment {
        kind,
        start_idx,
        end_idx,
        anchor: None,
        region_id: None,
    }
}

/// One move per change of camera position between camera events.
pub fn segment_moves(trace: &Trace) -> Vec<Move> {
    let mut moves = Vec::new();
    let mut last: Option<(usize, Point)> = None;
    for (i, e) in trace.events.iter().enumerate() {
        if !e.kind.is_camera() {
            continue;
        }
        let p = e.pos();
        match last {
            Some((j, q)) if q != p => {
                moves.push(Move {
                    from_idx: j,
                    to_idx: i,
                    from: q,
                    to: p,
                    displacement_norm: geometry::distance(p, q) / trace.diagonal,
                });
                last = Some((i, p));
            }
            Some((_, _)) => last = Some((i, p)),
            None => last = Some((i, p)),
        }
    }
    moves
}

/// Each move above `theta` covers events `from_idx + 1 ..= to_idx`.
pub fn classify_jumps(moves: &[Move], theta: f64) -> Vec<BehaviorSegment> {
    moves
        .iter()
        .filter(|m| m.displacement_norm > theta)
        .map(|m| segment(SegmentKind::Jump, m.from_idx + 1, m.to_idx))
        .collect()
}

/// Maximal runs of at least `min_run` consecutive small moves that enclose
/// a click or pin.
pub fn classify_wander(trace: &Trace, moves: &[Move], theta_small: f64, min_run: usize) -> Vec<BehaviorSegment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < moves.len() {
        if moves[i].displacement_norm > theta_small {
            i += 1;
            continue;
        }
        let start = i;
        while i < moves.len() && moves[i].displacement_norm <= theta_small {
            i += 1;
        }
        let run = &moves[start..i];
        if run.len() < min_run.max(1) {
            continue;
        }
        let (lo, hi) = (run[0].from_idx, run[run.len() - 1].to_idx);
        let interactive = trace.events[lo..=hi]
            .iter()
            .any(|e| matches!(e.kind, EventKind::Click | EventKind::Pin));
        if interactive {
            out.push(segment(SegmentKind::Wander, lo + 1, hi));
        }
    }
    out
}

/// Anchor automaton over interaction positions; each anchor fires at most
/// once, when the camera returns within `r_return` after exceeding `r_away`.
pub fn detect_revisits(trace: &Trace, r_return: f64, r_away: f64) -> Vec<BehaviorSegment> {
    struct Anchor {
        pos: Point,
        created: usize,
        away: bool,
        fired: bool,
    }
    let near = r_return * trace.diagonal;
    let far = r_away * trace.diagonal;
    let cams = trace.camera_path();
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut out = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        let cam = cams[i];
        if e.kind.is_camera() {
            for a in anchors.iter_mut().filter(|a| !a.fired) {
                let d = geometry::distance(cam, a.pos);
                if d > far {
                    a.away = true;
                } else if d <= near && a.away {
                    a.fired = true;
                    out.push(BehaviorSegment {
                        anchor: Some(a.pos),
                        ..segment(SegmentKind::Revisit, a.created, i)
                    });
                }
            }
        }
        if e.kind.is_interaction() && anchors.iter().all(|a| geometry::distance(cam, a.pos) > near) {
            anchors.push(Anchor {
                pos: cam,
                created: i,
                away: false,
                fired: false,
            });
        }
    }
    out
}

fn region_at(atlas: &AtlasMap, p: Point) -> Option<usize> {
    atlas
        .regions
        .iter()
        .find(|r| geometry::point_in_polygon(&r.polygon, p))
        .map(|r| r.id)
}

/// Pin set after replaying pin/unpin events in order.
pub fn final_pins(trace: &Trace) -> Vec<String> {
    let mut pins: Vec<String> = Vec::new();
    for e in &trace.events {
        let Some(id) = &e.artwork_id else { continue };
        match e.kind {
            EventKind::Pin if !pins.contains(id) => pins.push(id.clone()),
            EventKind::Unpin => pins.retain(|p| p != id),
            _ => {}
        }
    }
    pins
}

/// Regions holding at least `theta_time` of the session's dwell time, or at
/// least `theta_collect` of the final pins when there are two or more.
pub fn detect_fixation(trace: &Trace, atlas: &AtlasMap, theta_time: f64, theta_collect: f64) -> Vec<BehaviorSegment> {
    let cams = trace.camera_path();
    let ev = &trace.events;
    let cam_region: Vec<Option<usize>> = cams.iter().map(|&p| region_at(atlas, p)).collect();
    let mut dwell: BTreeMap<usize, u64> = BTreeMap::new();
    for i in 0..ev.len().saturating_sub(1) {
        if let Some(r) = cam_region[i] {
            *dwell.entry(r).or_default() += ev[i + 1].t_ms - ev[i].t_ms;
        }
    }
    let total = ev[ev.len() - 1].t_ms - ev[0].t_ms;

    let region_of = atlas.region_of();
    let pins = final_pins(trace);
    let mut pin_count: BTreeMap<usize, usize> = BTreeMap::new();
    for id in &pins {
        let r = region_of.get(id.as_str()).copied().or_else(|| {
            ev.iter()
                .rev()
                .find(|e| e.kind == EventKind::Pin && e.artwork_id.as_deref() == Some(id))
                .and_then(|e| region_at(atlas, e.pos()))
        });
        if let Some(r) = r {
            *pin_count.entry(r).or_default() += 1;
        }
    }

    let mut hits: BTreeSet<usize> = BTreeSet::new();
    if total > 0 {
        hits.extend(dwell.iter().filter(|(_, &t)| t as f64 / total as f64 >= theta_time).map(|(&r, _)| r));
    }
    if pins.len() >= 2 {
        hits.extend(
            pin_count
                .iter()
                .filter(|(_, &c)| c as f64 / pins.len() as f64 >= theta_collect)
                .map(|(&r, _)| r),
        );
    }
    hits.into_iter()
        .map(|r| {
            let idx: Vec<usize> = (0..ev.len())
                .filter(|&i| {
                    cam_region[i] == Some(r)
                        || ev[i].artwork_id.as_deref().and_then(|a| region_of.get(a)) == Some(&r)
                })
                .collect();
            let (start, end) = match (idx.first(), idx.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => (0, ev.len() - 1),
            };
            BehaviorSegment {
                anchor: Some(atlas.regions[r].centroid_2d),
                region_id: Some(r),
                ..segment(SegmentKind::Fixation, start, end)
            }
        })
        .collect()
}

pub const DEFAULT_BANDS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub band_pct: f64,
    pub artwork_share: f64,
    pub collection_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub bands: Vec<Band>,
    pub artwork_count: usize,
    pub collection_count: usize,
    pub collection_empty: bool,
}

/// Whether `p` lies in the outer frame of `rect` with width `pct`% of the
/// rectangle's width (horizontal sides) and height (vertical sides).
pub fn in_band(rect: &Rect, pct: f64, p: Point) -> bool {
    let f = pct / 100.0;
    let (dx, dy) = (f * rect.width(), f * rect.height());
    p[0] < rect.min_x + dx || p[0] > rect.max_x - dx || p[1] < rect.min_y + dy || p[1] > rect.max_y - dy
}

fn share(rect: &Rect, pct: f64, pts: &[Point]) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    pts.iter().filter(|&&p| in_band(rect, pct, p)).count() as f64 / pts.len() as f64
}

pub fn band_stats(rect: &Rect, placements: &[Point], collected: &[Point], band_pcts: &[f64]) -> BandStats {
    BandStats {
        bands: band_pcts
            .iter()
            .map(|&p| Band {
                band_pct: p,
                artwork_share: share(rect, p, placements),
                collection_share: share(rect, p, collected),
            })
            .collect(),
        artwork_count: placements.len(),
        collection_count: collected.len(),
        collection_empty: collected.is_empty(),
    }
}

/// Band statistics of the atlas placements and a collected subset. Ids
/// without a placement are ignored.
pub fn marginal_band_stats(atlas: &AtlasMap, collected_ids: &[String], band_pcts: &[f64]) -> BandStats {
    let all: Vec<Point> = atlas.placements.values().copied().collect();
    let uniq: BTreeSet<&String> = collected_ids.iter().collect();
    let picked: Vec<Point> = uniq.iter().filter_map(|id| atlas.placements.get(*id).copied()).collect();
    band_stats(&atlas.bounds, &all, &picked, band_pcts)
}

/// Plain-text table: one row per band with artwork and collection shares.
pub fn format_band_table(stats: &BandStats) -> String {
    let mut s = String::from("band      artworks  collected\n");
    for b in &stats.bands {
        let _ = writeln!(
            s,
            "outer {:>2}%  {:>6.1}%  {:>8.1}%",
            b.band_pct,
            100.0 * b.artwork_share,
            100.0 * b.collection_share
        );
    }
    if stats.collection_empty {
        s.push_str("(no collected artworks)\n");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub event_count: usize,
    pub diagonal: f64,
    pub thresholds: Thresholds,
    pub moves: Vec<Move>,
    pub jumps: Vec<BehaviorSegment>,
    pub wanders: Vec<BehaviorSegment>,
    pub revisits: Vec<BehaviorSegment>,
    pub fixations: Vec<BehaviorSegment>,
    pub collected: Vec<String>,
    pub band_stats: BandStats,
    pub band_table: String,
}

pub fn analyze(trace: &Trace, atlas: &AtlasMap, th: &Thresholds, band_pcts: &[f64]) -> Report {
    let moves = segment_moves(trace);
    let collected = final_pins(trace);
    let band_stats = marginal_band_stats(atlas, &collected, band_pcts);
    Report {
        session_id: trace.session_id.clone(),
        event_count: trace.events.len(),
        diagonal: trace.diagonal,
        thresholds: *th,
        jumps: classify_jumps(&moves, th.jump),
        wanders: classify_wander(trace, &moves, th.small, th.min_run),
        revisits: detect_revisits(trace, th.r_return, th.r_away),
        fixations: detect_fixation(trace, atlas, th.time_share, th.collect_share),
        band_table: format_band_table(&band_stats),
        band_stats,
        collected,
        moves,
    }
}

fn time_color(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * f) as u8;
    let b = (255.0 - 215.0 * f) as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Trajectory polyline colored from blue (start) to red (end), with one
/// marker per interaction event.
pub fn render_svg(trace: &Trace, bounds: &Rect) -> String {
    let cams = trace.camera_path();
    let t0 = trace.events[0].t_ms as f64;
    let span = (trace.events[trace.events.len() - 1].t_ms as f64 - t0).max(1.0);
    let stroke = bounds.diagonal() / 400.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}">"#,
        bounds.min_x,
        bounds.min_y,
        bounds.width(),
        bounds.height()
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#fafafa" stroke="#999" stroke-width="{stroke}"/>"##,
        bounds.min_x,
        bounds.min_y,
        bounds.width(),
        bounds.height()
    );
    s.push_str("<g class=\"path\" fill=\"none\">\n");
    for i in 1..cams.len() {
        if cams[i] == cams[i - 1] {
            continue;
        }
        let f = (trace.events[i].t_ms as f64 - t0) / span;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="{stroke}"/>"#,
            cams[i - 1][0],
            cams[i - 1][1],
            cams[i][0],
            cams[i][1],
            time_color(f)
        );
    }
    s.push_str("</g>\n<g class=\"markers\">\n");
    for e in trace.events.iter().filter(|e| e.kind.is_interaction()) {
        let _ = writeln!(
            s,
            r##"<circle class="marker {}" cx="{}" cy="{}" r="{}" fill="#222"/>"##,
            e.kind.as_str(),
            e.x,
            e.y,
            stroke * 3.0
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Writes `report.json` and `trajectory.svg` into `dir`.
pub fn emit_report(trace: &Trace, report: &Report, bounds: &Rect, dir: &Path) -> Result<(), TrailError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| TrailError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(io(&json))?;
    let svg = dir.join("trajectory.svg");
    fs::write(&svg, render_svg(trace, bounds)).map_err(io(&svg))?;
    Ok(())
}
