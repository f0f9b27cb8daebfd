//! Corpus records, embedding blocks and the AEM1 on-disk embedding format.
//!
//! A corpus is described by a JSON manifest that points at an artwork
//! metadata file, a keyword file and one AEM1 file per embedding block.
//! Everything is validated on load; a [`CorpusBundle`] that exists is
//! internally consistent and is never mutated afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const AEM1_MAGIC: &[u8; 4] = b"AEM1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad magic {found:?}, expected \"AEM1\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated embedding payload: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after embedding payload")]
    TrailingBytes(usize),
    #[error("dimension mismatch: file has {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("id count {ids} does not match row count {rows}")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("id table entry is not valid UTF-8")]
    BadUtf8,
    #[error("duplicate {what} id {id:?}")]
    DuplicateId { what: &'static str, id: String },
    #[error("artwork {artwork:?} references unknown keyword {keyword:?}")]
    DanglingTag { artwork: String, keyword: String },
    #[error("keyword {keyword:?} references unknown artwork {artwork:?}")]
    DanglingArtwork { keyword: String, artwork: String },
    #[error("keyword {keyword:?} lists {artwork:?} but the artwork is not tagged with it")]
    InconsistentTag { keyword: String, artwork: String },
    #[error("keyword {keyword:?} has count {count} but lists {listed} artworks")]
    BadCount {
        keyword: String,
        count: usize,
        listed: usize,
    },
    #[error("artwork {id:?} has an empty license")]
    MissingLicense { id: String },
    #[error("artwork {id:?} has no row in the {kind} block")]
    MissingEmbedding { kind: BlockKind, id: String },
    #[error("keyword {id:?} has no row in the text_keyword block")]
    MissingKeywordEmbedding { id: String },
    #[error("{kind} block row {id:?} does not belong to the corpus")]
    UnknownBlockId { kind: BlockKind, id: String },
    #[error("manifest does not reference a {0} block")]
    MissingBlock(BlockKind),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artwork {
    pub id: String,
    pub title: String,
    pub artist: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    pub image_uri: String,
    pub license: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub id: String,
    pub label: String,
    pub artwork_ids: Vec<String>,
    /// Optional in the file; always equal to `artwork_ids.len()` after load.
    #[serde(default)]
    pub count: Option<usize>,
}

impl KeywordEntry {
    pub fn count(&self) -> usize {
        self.artwork_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Visual,
    TextKeyword,
    TextMeta,
    Joint,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::Visual,
        BlockKind::TextKeyword,
        BlockKind::TextMeta,
        BlockKind::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Visual => "visual",
            BlockKind::TextKeyword => "text_keyword",
            BlockKind::TextMeta => "text_meta",
            BlockKind::Joint => "joint",
        }
    }

    /// Whether rows of this block are keyed by artwork id. `text_keyword`
    /// holds one vector per keyword entry instead.
    pub fn keyed_by_artwork(self) -> bool {
        !matches!(self, BlockKind::TextKeyword)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense row-major matrix of `f32` vectors with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    kind: BlockKind,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingBlock {
    pub fn new(kind: BlockKind, dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(CorpusError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) || data.len() / dim != ids.len() {
            return Err(CorpusError::IdCountMismatch {
                ids: ids.len(),
                rows: data.len() / dim,
            });
        }
        check_finite(&data, dim)?;
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    what: "embedding row",
                    id: id.clone(),
                });
            }
        }
        Ok(Self {
            kind,
            dim,
            ids,
            data,
            index,
        })
    }

    pub fn from_rows(kind: BlockKind, dim: usize, rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(CorpusError::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        Self::new(kind, dim, ids, data)
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    /// Keeps only rows whose id satisfies `keep`, preserving order.
    pub fn retain_ids(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            if keep(id) {
                ids.push(id.clone());
                data.extend_from_slice(self.row(i));
            }
        }
        let index = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        Self {
            kind: self.kind,
            dim: self.dim,
            ids,
            data,
            index,
        }
    }
}

fn check_finite(data: &[f32], dim: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(CorpusError::NonFinite {
            row: p / dim,
            col: p % dim,
        }),
        None => Ok(()),
    }
}

/// Serializes a block into AEM1 bytes.
pub fn encode_embeddings(block: &EmbeddingBlock) -> Result<Vec<u8>> {
    check_finite(&block.data, block.dim)?;
    let id_bytes: usize = block.ids.iter().map(|id| 2 + id.len()).sum();
    let mut out = Vec::with_capacity(12 + id_bytes + block.data.len() * 4);
    out.extend_from_slice(AEM1_MAGIC);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&(block.dim as u32).to_le_bytes());
    for id in &block.ids {
        let len = u16::try_from(id.len()).map_err(|_| CorpusError::IdTooLong(id.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &block.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses AEM1 bytes. `kind` is attached to the result; the format itself
/// does not record it.
pub fn decode_embeddings(
    bytes: &[u8],
    kind: BlockKind,
    expected_dim: Option<usize>,
) -> Result<EmbeddingBlock> {
    let mut cur = bytes;
    let magic: [u8; 4] = take(&mut cur, 4, "header")?.try_into().unwrap();
    if &magic != AEM1_MAGIC {
        return Err(CorpusError::BadMagic { found: magic });
    }
    let count = u32::from_le_bytes(take(&mut cur, 4, "header")?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut cur, 4, "header")?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(CorpusError::ZeroDim);
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(CorpusError::DimMismatch {
                expected,
                found: dim,
            });
        }
    }
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut cur, 2, "id table")?.try_into().unwrap()) as usize;
        let raw = take(&mut cur, len, "id table")?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| CorpusError::BadUtf8)?);
    }
    let n_floats = count
        .checked_mul(dim)
        .ok_or(CorpusError::Truncated("vector payload"))?;
    let raw = take(&mut cur, n_floats * 4, "vector payload")?;
    if !cur.is_empty() {
        return Err(CorpusError::TrailingBytes(cur.len()));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingBlock::new(kind, dim, ids, data)
}

fn take<'a>(cur: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(CorpusError::Truncated(what));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

pub fn read_embeddings(
    path: &Path,
    kind: BlockKind,
    expected_dim: Option<usize>,
) -> Result<EmbeddingBlock> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_embeddings(&bytes, kind, expected_dim)
}

pub fn write_embeddings(block: &EmbeddingBlock, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(block)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub artworks: PathBuf,
    pub keywords: PathBuf,
    pub embeddings: BTreeMap<BlockKind, PathBuf>,
    #[serde(default)]
    pub dims: BTreeMap<BlockKind, usize>,
}

#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub artworks: BTreeMap<String, Artwork>,
    pub keywords: BTreeMap<String, KeywordEntry>,
    pub blocks: BTreeMap<BlockKind, EmbeddingBlock>,
}

impl CorpusBundle {
    /// Builds and validates a bundle from in-memory parts.
    pub fn from_parts(
        artworks: Vec<Artwork>,
        keywords: Vec<KeywordEntry>,
        blocks: Vec<EmbeddingBlock>,
    ) -> Result<Self> {
        let mut art_map = BTreeMap::new();
        for a in artworks {
            if a.license.trim().is_empty() {
                return Err(CorpusError::MissingLicense { id: a.id });
            }
            if art_map.contains_key(&a.id) {
                return Err(CorpusError::DuplicateId {
                    what: "artwork",
                    id: a.id,
                });
            }
            art_map.insert(a.id.clone(), a);
        }
        let mut kw_map = BTreeMap::new();
        for mut k in keywords {
            if let Some(count) = k.count {
                if count != k.artwork_ids.len() {
                    return Err(CorpusError::BadCount {
                        keyword: k.id,
                        count,
                        listed: k.artwork_ids.len(),
                    });
                }
            }
            k.count = Some(k.artwork_ids.len());
            if kw_map.contains_key(&k.id) {
                return Err(CorpusError::DuplicateId {
                    what: "keyword",
                    id: k.id,
                });
            }
            kw_map.insert(k.id.clone(), k);
        }
        let mut block_map = BTreeMap::new();
        for b in blocks {
            block_map.insert(b.kind, b);
        }
        let bundle = Self {
            artworks: art_map,
            keywords: kw_map,
            blocks: block_map,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        for a in self.artworks.values() {
            let mut seen = BTreeSet::new();
            for t in &a.tags {
                let Some(k) = self.keywords.get(t) else {
                    return Err(CorpusError::DanglingTag {
                        artwork: a.id.clone(),
                        keyword: t.clone(),
                    });
                };
                if !seen.insert(t) {
                    continue;
                }
                if !k.artwork_ids.iter().any(|x| x == &a.id) {
                    return Err(CorpusError::InconsistentTag {
                        keyword: t.clone(),
                        artwork: a.id.clone(),
                    });
                }
            }
        }
        for k in self.keywords.values() {
            let mut seen = BTreeSet::new();
            for aid in &k.artwork_ids {
                if !seen.insert(aid) {
                    return Err(CorpusError::DuplicateId {
                        what: "keyword member",
                        id: aid.clone(),
                    });
                }
                let Some(a) = self.artworks.get(aid) else {
                    return Err(CorpusError::DanglingArtwork {
                        keyword: k.id.clone(),
                        artwork: aid.clone(),
                    });
                };
                if !a.tags.iter().any(|t| t == &k.id) {
                    return Err(CorpusError::InconsistentTag {
                        keyword: k.id.clone(),
                        artwork: aid.clone(),
                    });
                }
            }
        }
        for kind in BlockKind::ALL {
            let block = self.blocks.get(&kind).ok_or(CorpusError::MissingBlock(kind))?;
            if kind.keyed_by_artwork() {
                for id in block.ids() {
                    if !self.artworks.contains_key(id) {
                        return Err(CorpusError::UnknownBlockId {
                            kind,
                            id: id.clone(),
                        });
                    }
                }
                for id in self.artworks.keys() {
                    if block.get(id).is_none() {
                        return Err(CorpusError::MissingEmbedding {
                            kind,
                            id: id.clone(),
                        });
                    }
                }
            } else {
                for id in block.ids() {
                    if !self.keywords.contains_key(id) {
                        return Err(CorpusError::UnknownBlockId {
                            kind,
                            id: id.clone(),
                        });
                    }
                }
                for id in self.keywords.keys() {
                    if block.get(id).is_none() {
                        return Err(CorpusError::MissingKeywordEmbedding { id: id.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn block(&self, kind: BlockKind) -> &EmbeddingBlock {
        &self.blocks[&kind]
    }

    /// SHA-256 over a canonical encoding of records and vectors, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for a in self.artworks.values() {
            h.update(serde_json::to_vec(a).expect("artwork serializes"));
            h.update([0u8]);
        }
        for k in self.keywords.values() {
            h.update(k.id.as_bytes());
            h.update([0u8]);
            h.update(k.label.as_bytes());
            h.update([0u8]);
            for aid in &k.artwork_ids {
                h.update(aid.as_bytes());
                h.update([0u8]);
            }
        }
        for b in self.blocks.values() {
            h.update(b.kind.as_str().as_bytes());
            h.update(encode_embeddings(b).expect("validated block encodes"));
        }
        hex::encode(h.finalize())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_corpus(manifest_path: &Path) -> Result<CorpusBundle> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let artworks: Vec<Artwork> = read_json(&base.join(&manifest.artworks))?;
    let keywords: Vec<KeywordEntry> = read_json(&base.join(&manifest.keywords))?;
    let mut blocks = Vec::new();
    for kind in BlockKind::ALL {
        let rel = manifest
            .embeddings
            .get(&kind)
            .ok_or(CorpusError::MissingBlock(kind))?;
        let expected = manifest.dims.get(&kind).copied();
        blocks.push(read_embeddings(&base.join(rel), kind, expected)?);
    }
    CorpusBundle::from_parts(artworks, keywords, blocks)
}

/// Writes a bundle as a manifest plus data files into `dir`.
pub fn save_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let artworks: Vec<&Artwork> = bundle.artworks.values().collect();
    let keywords: Vec<&KeywordEntry> = bundle.keywords.values().collect();
    write_json(&dir.join("artworks.json"), &artworks)?;
    write_json(&dir.join("keywords.json"), &keywords)?;
    let mut embeddings = BTreeMap::new();
    let mut dims = BTreeMap::new();
    for (kind, block) in &bundle.blocks {
        let name = format!("{}.aem", kind.as_str());
        write_embeddings(block, &dir.join(&name))?;
        embeddings.insert(*kind, PathBuf::from(name));
        dims.insert(*kind, block.dim());
    }
    let manifest = Manifest {
        artworks: "artworks.json".into(),
        keywords: "keywords.json".into(),
        embeddings,
        dims,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir.join("manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("corpus records serialize");
    fs::write(path, bytes).map_err(io_err(path))
}
