//! Seeded synthetic corpora: clustered Gaussian embeddings with keyword
//! tags drawn mostly from each artwork's own cluster.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Artwork, BlockKind, CorpusBundle, CorpusError, EmbeddingBlock, KeywordEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_artworks: usize,
    pub n_clusters: usize,
    pub keywords_per_cluster: usize,
    pub dim_visual: usize,
    pub dim_joint: usize,
    pub dim_text: usize,
    /// Noise standard deviation relative to unit-variance cluster centers.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_artworks: 1000,
            n_clusters: 8,
            keywords_per_cluster: 4,
            dim_visual: 32,
            dim_joint: 16,
            dim_text: 12,
            spread: 0.35,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub bundle: CorpusBundle,
    /// Generating cluster of every artwork.
    pub labels: BTreeMap<String, usize>,
}

const MEDIA: [&str; 4] = ["oil on canvas", "woodblock print", "bronze", "watercolor"];

pub fn artwork_id(i: usize) -> String {
    format!("a{i:05}")
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng) as f32).collect()
}

fn around(rng: &mut ChaCha8Rng, center: &[f32], std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    center.iter().map(|&c| c + normal.sample(rng) as f32).collect()
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_clusters = cfg.n_clusters.max(1);
    let per = cfg.keywords_per_cluster.max(1);
    let dims = [cfg.dim_visual, cfg.dim_joint, cfg.dim_text];
    let centers: Vec<[Vec<f32>; 3]> = (0..n_clusters)
        .map(|_| dims.map(|d| gaussian(&mut rng, 1.0, d)))
        .collect();

    let mut artworks = Vec::with_capacity(cfg.n_artworks);
    let mut labels = BTreeMap::new();
    let mut kw_members: Vec<Vec<String>> = vec![Vec::new(); n_clusters * per];
    let mut rows: [Vec<(String, Vec<f32>)>; 3] = Default::default();
    for i in 0..cfg.n_artworks {
        let id = artwork_id(i);
        let c = i % n_clusters;
        labels.insert(id.clone(), c);
        let mut tags = vec![c * per + rng.random_range(0..per)];
        if rng.random_bool(0.5) {
            let other = if rng.random_bool(0.8) {
                c * per + rng.random_range(0..per)
            } else {
                rng.random_range(0..n_clusters * per)
            };
            if !tags.contains(&other) {
                tags.push(other);
            }
        }
        for &t in &tags {
            kw_members[t].push(id.clone());
        }
        for (b, block) in rows.iter_mut().enumerate() {
            block.push((id.clone(), around(&mut rng, &centers[c][b], cfg.spread)));
        }
        artworks.push(Artwork {
            title: format!("Study {i}"),
            artist: format!("Artist {}", i % 37),
            year: Some(1500 + (i % 450) as i32),
            medium: Some(MEDIA[i % MEDIA.len()].to_string()),
            tags: tags.iter().map(|t| format!("k{t:03}")).collect(),
            image_uri: format!("https://images.example.org/{id}.jpg"),
            license: "CC0".to_string(),
            caption: None,
            id,
        });
    }

    let mut keywords = Vec::new();
    let mut kw_rows = Vec::new();
    for (t, members) in kw_members.into_iter().enumerate() {
        let id = format!("k{t:03}");
        kw_rows.push((id.clone(), around(&mut rng, &centers[t / per][2], cfg.spread)));
        keywords.push(KeywordEntry {
            label: format!("motif {t}"),
            count: Some(members.len()),
            artwork_ids: members,
            id,
        });
    }
    let [visual, joint, meta] = rows;
    let blocks = vec![
        EmbeddingBlock::from_rows(BlockKind::Visual, cfg.dim_visual, visual)?,
        EmbeddingBlock::from_rows(BlockKind::Joint, cfg.dim_joint, joint)?,
        EmbeddingBlock::from_rows(BlockKind::TextMeta, cfg.dim_text, meta)?,
        EmbeddingBlock::from_rows(BlockKind::TextKeyword, cfg.dim_text, kw_rows)?,
    ];
    let bundle = CorpusBundle::from_parts(artworks, keywords, blocks)?;
    Ok(SynthCorpus { bundle, labels })
}

/// `n` points in `dim` dimensions drawn around `k` well-separated centers.
/// Returns row-major data and the cluster label of each row.
pub fn gaussian_blobs(n: usize, k: usize, dim: usize, separation: f64, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..k).map(|_| gaussian(&mut rng, separation, dim)).collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        data.extend(around(&mut rng, &centers[c], 1.0));
        labels.push(c);
    }
    (data, labels)
}
