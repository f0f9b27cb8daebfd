//! Text-to-image + embedding service clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::BlockKind;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("generation service failure: {0}")]
    Service(String),
    #[error("{block} vector has dim {found}, corpus expects {expected}")]
    DimMismatch {
        block: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} vector contains a non-finite value")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub image_ref: String,
    pub visual: Vec<f32>,
    pub joint: Vec<f32>,
    pub text: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub visual: usize,
    pub joint: usize,
    pub text: usize,
}

impl GenerationResult {
    pub fn check(&self, dims: &BlockDims) -> Result<(), GenError> {
        for (block, v, expected) in [
            ("visual", &self.visual, dims.visual),
            ("joint", &self.joint, dims.joint),
            ("text", &self.text, dims.text),
        ] {
            if v.len() != expected {
                return Err(GenError::DimMismatch {
                    block,
                    expected,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GenError::NonFinite(block));
            }
        }
        Ok(())
    }
}

pub trait GenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<GenerationResult, GenError>;
}

/// Offline client: every vector is a seeded normal draw, L2-normalized.
#[derive(Debug, Clone)]
pub struct MockClient {
    dims: BlockDims,
}

impl MockClient {
    pub fn new(dims: BlockDims) -> Self {
        Self { dims }
    }
}

/// First eight bytes (little-endian) of SHA-256 over `prompt \0 kind`.
pub fn mock_seed(prompt: &str, kind: BlockKind) -> u64 {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(kind.as_str().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn unit_draw(seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

impl GenerationClient for MockClient {
    fn generate(&self, prompt: &str) -> Result<GenerationResult, GenError> {
        let digest = Sha256::digest(prompt.as_bytes());
        Ok(GenerationResult {
            image_ref: format!("mock://{}", hex::encode(&digest[..16])),
            visual: unit_draw(mock_seed(prompt, BlockKind::Visual), self.dims.visual),
            joint: unit_draw(mock_seed(prompt, BlockKind::Joint), self.dims.joint),
            text: unit_draw(mock_seed(prompt, BlockKind::TextMeta), self.dims.text),
        })
    }
}

/// Counting semaphore for blocking callers.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GatePass<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_CONCURRENCY: usize = 2;
pub const TIMEOUT: Duration = Duration::from_secs(30);

/// HTTP client for `POST {base}/generate`.
pub struct LiveClient {
    endpoint: String,
    dims: BlockDims,
    agent: ureq::Agent,
    gate: Gate,
}

impl LiveClient {
    pub fn new(base_url: &str, dims: BlockDims, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(TIMEOUT))
            .build()
            .into();
        Self {
            endpoint: format!("{}/generate", base_url.trim_end_matches('/')),
            dims,
            agent,
            gate: Gate {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        }
    }
}

impl GenerationClient for LiveClient {
    fn generate(&self, prompt: &str) -> Result<GenerationResult, GenError> {
        let _pass = self.gate.acquire();
        let res: GenerationResult = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "prompt": prompt }))
            .map_err(|e| GenError::Service(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| GenError::Service(e.to_string()))?;
        res.check(&self.dims)?;
        Ok(res)
    }
}
