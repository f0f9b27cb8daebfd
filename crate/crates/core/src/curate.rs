//! Keyword salience, greedy salient-keyword selection, corpus reduction and
//! fused-vector assembly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BlockKind, CorpusBundle, EmbeddingBlock};

#[derive(Debug, Error, PartialEq)]
pub enum CurateError {
    #[error("total artwork count must be positive")]
    ZeroTotal,
    #[error("keyword count {count} exceeds total {total}")]
    CountExceedsTotal { count: usize, total: usize },
    #[error("k_target must be positive")]
    ZeroTarget,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("alpha_keyword {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("fusion weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("non-finite value in {0} block")]
    NonFinite(&'static str),
    #[error("artwork {0:?} has no primary keyword")]
    NoPrimaryKeyword(String),
}

pub type Result<T> = std::result::Result<T, CurateError>;

pub const DEFAULT_SALIENT_K: usize = 500;

/// `count * (count / total)`, evaluated as the single correctly rounded
/// quotient `count² / total`.
pub fn salience_score(count: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(CurateError::ZeroTotal);
    }
    if count > total {
        return Err(CurateError::CountExceedsTotal { count, total });
    }
    let c = count as f64;
    Ok(c * c / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceTable {
    pub total_artworks: usize,
    pub entries: BTreeMap<String, f64>,
}

impl SalienceTable {
    pub fn from_corpus(bundle: &CorpusBundle) -> Result<Self> {
        let total = bundle.artworks.len();
        let mut entries = BTreeMap::new();
        for k in bundle.keywords.values() {
            entries.insert(k.id.clone(), salience_score(k.count(), total)?);
        }
        Ok(Self {
            total_artworks: total,
            entries,
        })
    }

    pub fn get(&self, id: &str) -> f64 {
        self.entries.get(id).copied().unwrap_or(0.0)
    }
}

/// Per-keyword artwork sets, the input to greedy selection.
pub type Coverage = BTreeMap<String, BTreeSet<String>>;

pub fn coverage_from_corpus(bundle: &CorpusBundle) -> Coverage {
    bundle
        .keywords
        .values()
        .map(|k| (k.id.clone(), k.artwork_ids.iter().cloned().collect()))
        .collect()
}

/// Higher salience first, then lexicographically smaller id.
fn salience_order(table: &SalienceTable, a: &str, b: &str) -> Ordering {
    table
        .get(b)
        .total_cmp(&table.get(a))
        .then_with(|| a.cmp(b))
}

/// Greedy coverage selection seeded with the most salient keyword.
///
/// Each later pick maximizes the number of artworks not yet covered, with
/// ties going to higher salience and then the smaller id. Selection stops
/// at `k_target` picks or when nothing adds coverage.
pub fn select_salient_keywords(
    table: &SalienceTable,
    coverage: &Coverage,
    k_target: usize,
) -> Result<Vec<String>> {
    if k_target == 0 {
        return Err(CurateError::ZeroTarget);
    }
    let mut remaining: Vec<&String> = coverage.keys().collect();
    let mut covered: BTreeSet<&String> = BTreeSet::new();
    let mut picked = Vec::new();

    let first = remaining
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| salience_order(table, a, b))
        .map(|(i, _)| i);
    let Some(first) = first else {
        return Ok(picked);
    };
    if coverage[remaining[first]].is_empty() {
        return Ok(picked);
    }
    let id = remaining.swap_remove(first);
    covered.extend(coverage[id].iter());
    picked.push(id.clone());

    while picked.len() < k_target {
        let mut best: Option<(usize, usize)> = None;
        for (i, id) in remaining.iter().enumerate() {
            let gain = coverage[*id].iter().filter(|a| !covered.contains(a)).count();
            let better = match best {
                None => true,
                Some((bi, bgain)) => {
                    gain > bgain
                        || (gain == bgain
                            && salience_order(table, id, remaining[bi]) == Ordering::Less)
                }
            };
            if better {
                best = Some((i, gain));
            }
        }
        match best {
            Some((i, gain)) if gain > 0 => {
                let id = remaining.swap_remove(i);
                covered.extend(coverage[id].iter());
                picked.push(id.clone());
            }
            _ => break,
        }
    }
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct ReducedCorpus {
    pub bundle: CorpusBundle,
    /// Artwork id to its single primary salient keyword.
    pub primary: BTreeMap<String, String>,
}

/// Retains exactly the artworks tagged by at least one selected keyword.
///
/// Keyword entries are kept with their member lists restricted to retained
/// artworks, so the bundle stays referentially consistent.
pub fn reduce_corpus(
    bundle: &CorpusBundle,
    selected: &[String],
    table: &SalienceTable,
) -> ReducedCorpus {
    let selected_set: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let mut primary = BTreeMap::new();
    for a in bundle.artworks.values() {
        let best = a
            .tags
            .iter()
            .filter(|t| selected_set.contains(t.as_str()))
            .min_by(|x, y| salience_order(table, x, y));
        if let Some(k) = best {
            primary.insert(a.id.clone(), k.clone());
        }
    }
    let artworks = bundle
        .artworks
        .iter()
        .filter(|(id, _)| primary.contains_key(*id))
        .map(|(id, a)| (id.clone(), a.clone()))
        .collect();
    let keywords = bundle
        .keywords
        .iter()
        .map(|(id, k)| {
            let mut k = k.clone();
            k.artwork_ids.retain(|a| primary.contains_key(a));
            k.count = Some(k.artwork_ids.len());
            (id.clone(), k)
        })
        .collect();
    let blocks = bundle
        .blocks
        .iter()
        .map(|(kind, b)| {
            let b = if kind.keyed_by_artwork() {
                b.retain_ids(|id| primary.contains_key(id))
            } else {
                b.clone()
            };
            (*kind, b)
        })
        .collect();
    ReducedCorpus {
        bundle: CorpusBundle {
            artworks,
            keywords,
            blocks,
        },
        primary,
    }
}

/// `alpha * keyword_vec + (1 - alpha) * meta_vec`.
pub fn compose_text_embedding(keyword_vec: &[f32], meta_vec: &[f32], alpha: f64) -> Result<Vec<f32>> {
    if keyword_vec.len() != meta_vec.len() {
        return Err(CurateError::DimMismatch {
            left: keyword_vec.len(),
            right: meta_vec.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CurateError::BadAlpha(alpha));
    }
    if alpha == 1.0 {
        return Ok(keyword_vec.to_vec());
    }
    if alpha == 0.0 {
        return Ok(meta_vec.to_vec());
    }
    Ok(keyword_vec
        .iter()
        .zip(meta_vec)
        .map(|(&k, &m)| (alpha * f64::from(k) + (1.0 - alpha) * f64::from(m)) as f32)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub w_visual: f64,
    pub w_joint: f64,
    pub w_text: f64,
    pub alpha_keyword: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w_visual: 1.0,
            w_joint: 1.0,
            w_text: 1.0,
            alpha_keyword: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_visual, self.w_joint, self.w_text];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(CurateError::BadWeights);
        }
        if !(0.0..=1.0).contains(&self.alpha_keyword) {
            return Err(CurateError::BadAlpha(self.alpha_keyword));
        }
        Ok(())
    }
}

/// `(offset, length)` of each block inside a fused vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpans {
    pub visual: (usize, usize),
    pub joint: (usize, usize),
    pub text: (usize, usize),
}

impl BlockSpans {
    pub fn new(dim_visual: usize, dim_joint: usize, dim_text: usize) -> Self {
        Self {
            visual: (0, dim_visual),
            joint: (dim_visual, dim_joint),
            text: (dim_visual + dim_joint, dim_text),
        }
    }

    pub fn dim(&self) -> usize {
        self.text.0 + self.text.1
    }

    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.visual.0..self.visual.0 + self.visual.1
    }

    /// Joint and text spans together; they are contiguous.
    pub fn semantic_range(&self) -> std::ops::Range<usize> {
        self.joint.0..self.text.0 + self.text.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub id: String,
    pub vector: Vec<f32>,
    pub spans: BlockSpans,
}

fn push_normalized(out: &mut Vec<f32>, v: &[f32], weight: f64) {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        out.extend(std::iter::repeat_n(0.0, v.len()));
    } else {
        let scale = weight / norm;
        out.extend(v.iter().map(|&x| (f64::from(x) * scale) as f32));
    }
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// L2-normalizes each block, scales it by its weight and concatenates in
/// the order visual, joint, text.
pub fn fuse(
    id: &str,
    visual: &[f32],
    joint: &[f32],
    text: &[f32],
    cfg: &FusionConfig,
) -> Result<FusedEmbedding> {
    cfg.validate()?;
    for (name, v) in [("visual", visual), ("joint", joint), ("text", text)] {
        if !all_finite(v) {
            return Err(CurateError::NonFinite(name));
        }
    }
    let spans = BlockSpans::new(visual.len(), joint.len(), text.len());
    let mut vector = Vec::with_capacity(spans.dim());
    push_normalized(&mut vector, visual, cfg.w_visual);
    push_normalized(&mut vector, joint, cfg.w_joint);
    push_normalized(&mut vector, text, cfg.w_text);
    Ok(FusedEmbedding {
        id: id.to_string(),
        vector,
        spans,
    })
}

/// Row-major matrix of fused vectors for a whole corpus, rows in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSet {
    pub ids: Vec<String>,
    pub spans: BlockSpans,
    pub data: Vec<f32>,
}

impl FusedSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spans.dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }
}

/// Fuses every artwork of a reduced corpus. The text block is the
/// composition of the primary keyword's vector and the artwork's metadata
/// vector.
pub fn fuse_corpus(reduced: &ReducedCorpus, cfg: &FusionConfig) -> Result<FusedSet> {
    cfg.validate()?;
    let b = &reduced.bundle;
    let visual = b.block(BlockKind::Visual);
    let joint = b.block(BlockKind::Joint);
    let meta = b.block(BlockKind::TextMeta);
    let kw: &EmbeddingBlock = b.block(BlockKind::TextKeyword);
    if kw.dim() != meta.dim() {
        return Err(CurateError::DimMismatch {
            left: kw.dim(),
            right: meta.dim(),
        });
    }
    let spans = BlockSpans::new(visual.dim(), joint.dim(), meta.dim());
    let mut ids = Vec::with_capacity(b.artworks.len());
    let mut data = Vec::with_capacity(b.artworks.len() * spans.dim());
    for id in b.artworks.keys() {
        let primary = reduced
            .primary
            .get(id)
            .ok_or_else(|| CurateError::NoPrimaryKeyword(id.clone()))?;
        let text = compose_text_embedding(
            kw.get(primary).expect("validated keyword row"),
            meta.get(id).expect("validated meta row"),
            cfg.alpha_keyword,
        )?;
        let f = fuse(
            id,
            visual.get(id).expect("validated visual row"),
            joint.get(id).expect("validated joint row"),
            &text,
            cfg,
        )?;
        ids.push(id.clone());
        data.extend_from_slice(&f.vector);
    }
    Ok(FusedSet { ids, spans, data })
}
