//! C ABI over the atlas engine.
//!
//! Every function returns an [`ArtcartoStatus`]; outputs go through pointer
//! arguments. Strings returned to the caller are NUL-terminated UTF-8 and
//! must be released with [`artcarto_string_free`]. On failure a message is
//! kept per thread and available from [`artcarto_last_error_message`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use artcarto::atlas::AtlasMap;
use artcarto::curate;
use artcarto::geometry::Rect;
use artcarto::lod::{LodIndex, ViewportQuery};
use artcarto::trails;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtcartoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    NotFound = 6,
    Internal = 7,
}

/// Opaque loaded atlas.
pub struct ArtcartoAtlas {
    atlas: AtlasMap,
    lod: LodIndex,
    hash: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ArtcartoStatus, String);

impl Failure {
    fn new(status: ArtcartoStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ArtcartoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArtcartoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside artcarto");
            ArtcartoStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(ArtcartoStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(ArtcartoStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn atlas_ref<'a>(p: *const ArtcartoAtlas) -> Result<&'a ArtcartoAtlas, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(ArtcartoStatus::NullArgument, "atlas is null"))
}

fn check_out<T>(p: *mut T) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(ArtcartoStatus::NullArgument, "output pointer is null"))
    } else {
        Ok(())
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure::new(ArtcartoStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn wrap(atlas: AtlasMap) -> Result<Box<ArtcartoAtlas>, Failure> {
    atlas
        .validate(None)
        .map_err(|e| Failure::new(ArtcartoStatus::InvalidArgument, e.to_string()))?;
    Ok(Box::new(ArtcartoAtlas {
        lod: LodIndex::new(&atlas),
        hash: atlas.content_hash(),
        atlas,
    }))
}

/// Loads and validates an atlas JSON file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_load(path: *const c_char, out: *mut *mut ArtcartoAtlas) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        let path = read_str(path, "path")?;
        let atlas = AtlasMap::load(Path::new(path)).map_err(|e| match e {
            artcarto::atlas::AtlasError::Io { .. } => Failure::new(ArtcartoStatus::Io, e.to_string()),
            _ => Failure::new(ArtcartoStatus::Parse, e.to_string()),
        })?;
        *out = Box::into_raw(wrap(atlas)?);
        Ok(())
    })
}

/// Parses and validates an atlas from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_from_json(json: *const c_char, out: *mut *mut ArtcartoAtlas) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        let json = read_str(json, "json")?;
        let atlas = AtlasMap::from_json(json).map_err(|e| Failure::new(ArtcartoStatus::Parse, e.to_string()))?;
        *out = Box::into_raw(wrap(atlas)?);
        Ok(())
    })
}

/// Releases an atlas handle. Null is ignored.
///
/// # Safety
/// `atlas` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_free(atlas: *mut ArtcartoAtlas) {
    if !atlas.is_null() {
        drop(Box::from_raw(atlas));
    }
}

/// # Safety
/// `atlas` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_region_count(atlas: *const ArtcartoAtlas, out: *mut usize) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        *out = atlas_ref(atlas)?.atlas.regions.len();
        Ok(())
    })
}

/// # Safety
/// `atlas` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_artwork_count(atlas: *const ArtcartoAtlas, out: *mut usize) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        *out = atlas_ref(atlas)?.atlas.placements.len();
        Ok(())
    })
}

/// Hex SHA-256 of the canonical atlas JSON.
///
/// # Safety
/// `atlas` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_hash(atlas: *const ArtcartoAtlas, out: *mut *mut c_char) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        write_string(out, atlas_ref(atlas)?.hash.clone())
    })
}

/// Placement of one artwork.
///
/// # Safety
/// `atlas` must be a live handle, `id` a valid string, `x`/`y` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_placement(
    atlas: *const ArtcartoAtlas,
    id: *const c_char,
    x: *mut f64,
    y: *mut f64,
) -> ArtcartoStatus {
    guard(|| {
        check_out(x)?;
        check_out(y)?;
        let a = atlas_ref(atlas)?;
        let id = read_str(id, "id")?;
        let p = a
            .atlas
            .placements
            .get(id)
            .ok_or_else(|| Failure::new(ArtcartoStatus::NotFound, format!("unknown artwork {id}")))?;
        *x = p[0];
        *y = p[1];
        Ok(())
    })
}

/// Level-of-detail selection; writes a JSON array of artwork ids.
///
/// # Safety
/// `atlas` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_atlas_lod_select(
    atlas: *const ArtcartoAtlas,
    min_x: f64,
    min_y: f64,
    max_x: f64,
    max_y: f64,
    zoom: f64,
    budget: usize,
    out_json: *mut *mut c_char,
) -> ArtcartoStatus {
    guard(|| {
        check_out(out_json)?;
        let a = atlas_ref(atlas)?;
        let bbox = Rect::new(min_x, min_y, max_x, max_y);
        if !bbox.is_valid() || !zoom.is_finite() || zoom < 0.0 {
            return Err(Failure::new(ArtcartoStatus::InvalidArgument, "malformed viewport"));
        }
        let ids = a.lod.select(&ViewportQuery { bbox, zoom, budget }, &BTreeSet::new());
        let json = serde_json::to_string(&ids).map_err(|e| Failure::new(ArtcartoStatus::Internal, e.to_string()))?;
        write_string(out_json, json)
    })
}

/// `count^2 / total` for a keyword tagging `count` of `total` artworks.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_salience_score(count: u64, total: u64, out: *mut f64) -> ArtcartoStatus {
    guard(|| {
        check_out(out)?;
        *out = curate::salience_score(count as usize, total as usize)
            .map_err(|e| Failure::new(ArtcartoStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Classifies a JSONL event trace against the atlas with default
/// thresholds and bands; writes the report as JSON.
///
/// # Safety
/// `atlas` must be a live handle, `events_jsonl` a valid string, `out_json`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn artcarto_analyze_trace(
    atlas: *const ArtcartoAtlas,
    events_jsonl: *const c_char,
    out_json: *mut *mut c_char,
) -> ArtcartoStatus {
    guard(|| {
        check_out(out_json)?;
        let a = atlas_ref(atlas)?;
        let text = read_str(events_jsonl, "events_jsonl")?;
        let parse = |e: trails::TrailError| Failure::new(ArtcartoStatus::Parse, e.to_string());
        let events = trails::parse_jsonl(text).map_err(parse)?;
        let trace = trails::Trace::new("ffi", events, a.atlas.bounds.diagonal())
            .map_err(|e| Failure::new(ArtcartoStatus::InvalidArgument, e.to_string()))?;
        let report = trails::analyze(&trace, &a.atlas, &trails::Thresholds::default(), &trails::DEFAULT_BANDS);
        let json = serde_json::to_string(&report).map_err(|e| Failure::new(ArtcartoStatus::Internal, e.to_string()))?;
        write_string(out_json, json)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn artcarto_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn artcarto_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
