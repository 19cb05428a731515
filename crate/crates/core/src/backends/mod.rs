//! Model contracts and their implementations.
//!
//! The pipeline talks to five roles: text embedder, image embedder,
//! segmenter, latent codec, and denoiser. Mock and fixture backends are
//! deterministic and run in process; the remote backend forwards every call
//! over the framed wire protocol in [`crate::protocol`].

mod codec;
mod fixture;
mod mock;
mod oracle;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use codec::{IdentityCodec, PoolCodec};
pub use fixture::{DenoiserSpec, EntityEntry, EntityManifest, FixtureEmbedder, FixtureFile, FixtureSegmenter, Scene};
pub use mock::{ColorSegmenter, HashEmbedder, MockDenoiser};
pub use oracle::OracleDenoiser;

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::protocol::{RemoteBackend, Transport};
use crate::tensor::Latent;

/// Environment variable holding the default backend descriptor.
pub const BACKEND_ENV: &str = "RETOUCH_BACKEND";

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

pub trait TextEmbedder: Send + Sync {
    /// Unit-norm embedding of `text`.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait ImageEmbedder: Send + Sync {
    /// Unit-norm embedding of `image`.
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>>;
}

pub trait Segmenter: Send + Sync {
    /// Class-agnostic entity masks, each sized like `image`.
    fn segment(&self, image: &Image) -> Result<Vec<BinaryMask>>;
}

pub trait LatentCodec: Send + Sync {
    /// Spatial downsampling factor between image and latent.
    fn stride(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
}

pub trait Denoiser: Send + Sync {
    /// ε_θ(z_t, t, v).
    fn predict_noise(&self, z_t: &Latent, t: usize, text: &str) -> Result<Latent>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Fixture,
    Remote,
}

/// Parsed backend selector.
///
/// Accepted forms:
/// - `mock` or `mock:seed=7,dim=64,stride=8`
/// - `fixture:path/to/fixture.json`
/// - `tcp://host:port`
/// - `stdio:command arg...`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub embedding_dim: usize,
    pub latent_stride: usize,
    pub seed: u64,
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            latent_stride: 1,
            seed: 0,
        }
    }

    pub fn parse(selector: &str) -> Result<Self> {
        let selector = selector.trim();
        if selector == "mock" {
            return Ok(Self::mock());
        }
        if let Some(opts) = selector.strip_prefix("mock:") {
            let mut d = Self::mock();
            for kv in opts.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("bad mock option {kv:?}")))?;
                let n: u64 = v
                    .parse()
                    .map_err(|_| Error::invalid(format!("mock option {k} needs an integer")))?;
                match k {
                    "seed" => d.seed = n,
                    "dim" => d.embedding_dim = n as usize,
                    "stride" => d.latent_stride = n as usize,
                    _ => return Err(Error::invalid(format!("unknown mock option {k:?}"))),
                }
            }
            if d.embedding_dim == 0 || d.latent_stride == 0 {
                return Err(Error::invalid("mock dim and stride must be >= 1"));
            }
            return Ok(d);
        }
        if let Some(path) = selector.strip_prefix("fixture:") {
            return Ok(Self {
                kind: BackendKind::Fixture,
                endpoint: Some(path.to_string()),
                ..Self::mock()
            });
        }
        if selector.starts_with("tcp://") || selector.starts_with("stdio:") {
            return Ok(Self {
                kind: BackendKind::Remote,
                endpoint: Some(selector.to_string()),
                ..Self::mock()
            });
        }
        Err(Error::invalid(format!("unrecognised backend descriptor {selector:?}")))
    }
}

/// The five model roles bundled for one pipeline run.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextEmbedder>,
    pub image: Arc<dyn ImageEmbedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub codec: Arc<dyn LatentCodec>,
    pub denoiser: Arc<dyn Denoiser>,
    pub descriptor: BackendDescriptor,
    /// Identifiers reported for each role, echoed into run reports.
    pub identifiers: Vec<(String, String)>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("descriptor", &self.descriptor)
            .field("identifiers", &self.identifiers)
            .finish()
    }
}

impl Backends {
    /// In-process deterministic backends.
    pub fn mock(seed: u64, embedding_dim: usize, stride: usize, sched: &DiffusionSchedule) -> Self {
        let embedder = Arc::new(HashEmbedder::new(seed, embedding_dim));
        let codec: Arc<dyn LatentCodec> = if stride == 1 {
            Arc::new(IdentityCodec)
        } else {
            Arc::new(PoolCodec::new(stride))
        };
        Self {
            text: embedder.clone(),
            image: embedder,
            segmenter: Arc::new(ColorSegmenter::default()),
            codec,
            denoiser: Arc::new(MockDenoiser::new(seed, sched.clone())),
            descriptor: BackendDescriptor {
                kind: BackendKind::Mock,
                endpoint: None,
                embedding_dim,
                latent_stride: stride,
                seed,
            },
            identifiers: vec![
                ("embedder".into(), format!("hash-sha256/seed={seed}/dim={embedding_dim}")),
                ("segmenter".into(), "color-components".into()),
                ("codec".into(), if stride == 1 { "identity".into() } else { format!("pool/{stride}") }),
                ("denoiser".into(), format!("mock/seed={seed}")),
            ],
        }
    }

    /// Build backends from a descriptor string. `sched` is handed to
    /// denoisers that need it (mock and oracle).
    pub fn resolve(selector: &str, sched: &DiffusionSchedule) -> Result<Self> {
        let d = BackendDescriptor::parse(selector)?;
        match d.kind {
            BackendKind::Mock => Ok(Self::mock(d.seed, d.embedding_dim, d.latent_stride, sched)),
            BackendKind::Fixture => {
                let path = PathBuf::from(d.endpoint.as_deref().unwrap_or_default());
                FixtureFile::load(&path)?.into_backends(sched)
            }
            BackendKind::Remote => {
                let transport = Transport::parse(d.endpoint.as_deref().unwrap_or_default())?;
                RemoteBackend::connect(transport)?.into_backends()
            }
        }
    }

    /// Resolve `selector`, falling back to `$RETOUCH_BACKEND`, then to `mock`.
    pub fn resolve_default(selector: Option<&str>, sched: &DiffusionSchedule) -> Result<Self> {
        match selector {
            Some(s) => Self::resolve(s, sched),
            None => match std::env::var(BACKEND_ENV) {
                Ok(s) if !s.trim().is_empty() => Self::resolve(&s, sched),
                _ => Self::resolve("mock", sched),
            },
        }
    }
}

/// Unit-normalise in `f64`; a zero vector is rejected.
pub(crate) fn normalize(v: &[f64]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Backend("embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}
