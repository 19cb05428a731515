//! File-driven backends: stored embeddings and entity masks read from disk.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    normalize, BackendDescriptor, BackendKind, Backends, ColorSegmenter, Denoiser, HashEmbedder,
    IdentityCodec, ImageEmbedder, LatentCodec, MockDenoiser, OracleDenoiser, PoolCodec, Segmenter,
    TextEmbedder, DEFAULT_EMBEDDING_DIM,
};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{apply_mask, BinaryMask, Image};
use crate::io::{read_image, read_mask};

/// Embedder answering from lookup tables keyed by text or by
/// [`Image::content_hash`], falling back to a [`HashEmbedder`] of the same
/// dimension on a miss.
#[derive(Debug, Clone)]
pub struct FixtureEmbedder {
    dim: usize,
    texts: HashMap<String, Vec<f32>>,
    images: HashMap<String, Vec<f32>>,
    fallback: HashEmbedder,
}

fn unitize(v: Vec<f32>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() <= 1e-6 {
        return Ok(v);
    }
    normalize(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>())
        .map_err(|_| Error::invalid("fixture embedding has zero norm"))
}

impl FixtureEmbedder {
    /// `dim` is required only when both tables are empty.
    pub fn new(
        texts: impl IntoIterator<Item = (String, Vec<f32>)>,
        images: impl IntoIterator<Item = (String, Vec<f32>)>,
        dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let texts: Vec<_> = texts.into_iter().collect();
        let images: Vec<_> = images.into_iter().collect();
        let dim = match texts.iter().chain(&images).map(|(_, v)| v.len()).next() {
            Some(d) => d,
            None => dim.unwrap_or(DEFAULT_EMBEDDING_DIM),
        };
        if dim == 0 {
            return Err(Error::invalid("fixture embedding dimension is zero"));
        }
        for (key, v) in texts.iter().chain(&images) {
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "fixture embedding for {key:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
        }
        let unit = |rows: Vec<(String, Vec<f32>)>| -> Result<HashMap<_, _>> {
            rows.into_iter().map(|(k, v)| Ok((k, unitize(v)?))).collect()
        };
        Ok(Self {
            dim,
            texts: unit(texts)?,
            images: unit(images)?,
            fallback: HashEmbedder::new(seed, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl TextEmbedder for FixtureEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        match self.texts.get(text) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed_text(text),
        }
    }
}

impl ImageEmbedder for FixtureEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        match self.images.get(&image.content_hash()) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.embed_image(image),
        }
    }
}

/// Segmenter that returns a fixed list of masks.
#[derive(Debug, Clone, Default)]
pub struct FixtureSegmenter {
    masks: Vec<BinaryMask>,
}

impl FixtureSegmenter {
    pub fn new(masks: Vec<BinaryMask>) -> Self {
        Self { masks }
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }
}

impl Segmenter for FixtureSegmenter {
    fn segment(&self, image: &Image) -> Result<Vec<BinaryMask>> {
        if let Some(m) = self.masks.iter().find(|m| m.dims() != image.dims()) {
            return Err(Error::shape(format!(
                "fixture mask is {:?} but image is {:?}",
                m.dims(),
                image.dims()
            )));
        }
        Ok(self.masks.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEntry {
    pub mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

/// Entity-set manifest: `{image, entities: [{mask_path, embedding?}]}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityManifest {
    pub image: PathBuf,
    pub entities: Vec<EntityEntry>,
}

/// A loaded entity scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub masks: Vec<BinaryMask>,
    /// `(content hash of I ⊙ M_i, embedding)` for entities that declare one.
    pub embeddings: Vec<(String, Vec<f32>)>,
}

impl EntityManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: EntityManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.image = base.join(&m.image);
        for e in &mut m.entities {
            e.mask_path = base.join(&e.mask_path);
        }
        Ok(m)
    }

    pub fn read_scene(&self) -> Result<Scene> {
        let image = read_image(&self.image)?;
        let mut masks = Vec::with_capacity(self.entities.len());
        let mut embeddings = Vec::new();
        for e in &self.entities {
            let mask = read_mask(&e.mask_path)?;
            if mask.dims() != image.dims() {
                return Err(Error::shape(format!(
                    "{}: mask is {:?} but scene image is {:?}",
                    e.mask_path.display(),
                    mask.dims(),
                    image.dims()
                )));
            }
            if let Some(v) = &e.embedding {
                embeddings.push((apply_mask(&image, &mask)?.content_hash(), v.clone()));
            }
            masks.push(mask);
        }
        Ok(Scene { image, masks, embeddings })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DenoiserSpec {
    Named(String),
    Oracle { oracle_target: PathBuf },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Named("mock".into())
    }
}

/// Fixture backend description, loaded from JSON:
///
/// ```json
/// {
///   "embedding_dim": 2,
///   "seed": 0,
///   "texts": {"dog": [1, 0]},
///   "images": {"<content hash>": [0.6, 0.8]},
///   "scene": "entities.json",
///   "stride": 1,
///   "denoiser": "mock" | {"oracle_target": "target.png"}
/// }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub texts: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub images: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
}

impl FixtureFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut f: FixtureFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(scene) = &mut f.scene {
            *scene = base.join(&*scene);
        }
        if let DenoiserSpec::Oracle { oracle_target } = &mut f.denoiser {
            *oracle_target = base.join(&*oracle_target);
        }
        Ok(f)
    }

    pub fn into_backends(self, sched: &DiffusionSchedule) -> Result<Backends> {
        let scene = match &self.scene {
            Some(p) => Some(EntityManifest::load(p)?.read_scene()?),
            None => None,
        };
        let mut images: Vec<(String, Vec<f32>)> = self.images.into_iter().collect();
        if let Some(s) = &scene {
            images.extend(s.embeddings.iter().cloned());
        }
        let embedder = Arc::new(FixtureEmbedder::new(
            self.texts,
            images,
            self.embedding_dim,
            self.seed,
        )?);
        if let Some(d) = self.embedding_dim {
            if d != embedder.dim() {
                return Err(Error::invalid(format!(
                    "fixture declares embedding_dim {d} but its table holds {}",
                    embedder.dim()
                )));
            }
        }
        let stride = self.stride.unwrap_or(1);
        if stride == 0 {
            return Err(Error::invalid("fixture stride must be >= 1"));
        }
        let codec: Arc<dyn LatentCodec> = if stride == 1 {
            Arc::new(IdentityCodec)
        } else {
            Arc::new(PoolCodec::new(stride))
        };
        let (segmenter, seg_id): (Arc<dyn Segmenter>, String) = match scene {
            Some(s) => (Arc::new(FixtureSegmenter::new(s.masks)), "fixture-scene".into()),
            None => (Arc::new(ColorSegmenter::default()), "color-components".into()),
        };
        let (denoiser, den_id): (Arc<dyn Denoiser>, String) = match self.denoiser {
            DenoiserSpec::Named(name) if name == "mock" => (
                Arc::new(MockDenoiser::new(self.seed, sched.clone())),
                format!("mock/seed={}", self.seed),
            ),
            DenoiserSpec::Named(name) => {
                return Err(Error::invalid(format!("unknown fixture denoiser {name:?}")))
            }
            DenoiserSpec::Oracle { oracle_target } => {
                let target = codec.encode(&read_image(&oracle_target)?)?;
                (
                    Arc::new(OracleDenoiser::new(target, sched.clone())),
                    format!("oracle/{}", oracle_target.display()),
                )
            }
        };
        let dim = embedder.dim();
        Ok(Backends {
            text: embedder.clone(),
            image: embedder,
            segmenter,
            codec,
            denoiser,
            descriptor: BackendDescriptor {
                kind: BackendKind::Fixture,
                endpoint: None,
                embedding_dim: dim,
                latent_stride: stride,
                seed: self.seed,
            },
            identifiers: vec![
                ("embedder".into(), format!("fixture/dim={dim}")),
                ("segmenter".into(), seg_id),
                ("codec".into(), if stride == 1 { "identity".into() } else { format!("pool/{stride}") }),
                ("denoiser".into(), den_id),
            ],
        })
    }
}
