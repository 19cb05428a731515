//! JSON message shapes and the base64 tensor encoding.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ProtocolError;
use crate::image::{BinaryMask, Image};
use crate::tensor::{Latent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Handshake,
    EmbedText,
    EmbedImage,
    Segment,
    Encode,
    Decode,
    PredictNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(id: u64, result: Value) -> Self {
        Self { id, ok: true, result: Some(result), error: None }
    }

    pub fn failure(id: u64, message: impl Into<String>) -> Self {
        Self { id, ok: false, result: None, error: Some(message.into()) }
    }

    /// Validate the ok/result/error combination.
    pub fn into_result(self) -> Result<Value, ProtocolError> {
        match (self.ok, self.result, self.error) {
            (true, Some(v), None) => Ok(v),
            (false, None, Some(msg)) => Err(ProtocolError::Remote { message: msg }),
            _ => Err(ProtocolError::Framing(format!("response {} has an inconsistent ok/result/error set", self.id))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

/// A tensor as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: String,
}

fn element_count(shape: &[usize]) -> Result<usize, ProtocolError> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ProtocolError::Framing(format!("tensor shape {shape:?} overflows")))
}

impl WireTensor {
    pub fn from_f32(shape: &[usize], values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { dtype: DType::F32, shape: shape.to_vec(), data: B64.encode(bytes) }
    }

    pub fn from_u8(shape: &[usize], values: &[u8]) -> Self {
        Self { dtype: DType::U8, shape: shape.to_vec(), data: B64.encode(values) }
    }

    fn bytes(&self, dtype: DType) -> Result<Vec<u8>, ProtocolError> {
        if self.dtype != dtype {
            return Err(ProtocolError::Framing(format!("expected {dtype:?} tensor, got {:?}", self.dtype)));
        }
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| ProtocolError::Framing(format!("tensor data is not base64: {e}")))?;
        let width = match dtype {
            DType::F32 => 4,
            DType::U8 => 1,
        };
        let n = element_count(&self.shape)?;
        if bytes.len() != n * width {
            return Err(ProtocolError::Framing(format!(
                "tensor {:?} needs {} bytes, got {}",
                self.shape,
                n * width,
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>, ProtocolError> {
        Ok(self
            .bytes(DType::F32)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_u8(&self) -> Result<Vec<u8>, ProtocolError> {
        self.bytes(DType::U8)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::from_f32(t.shape(), t.data())
    }

    pub fn to_tensor(&self) -> Result<Tensor, ProtocolError> {
        Tensor::new(self.shape.clone(), self.to_f32()?).map_err(|e| ProtocolError::Framing(e.to_string()))
    }

    /// Images travel as `[height, width, 3]`.
    pub fn from_image(image: &Image) -> Self {
        Self::from_f32(&[image.height(), image.width(), 3], image.data())
    }

    pub fn to_image(&self) -> Result<Image, ProtocolError> {
        match self.shape[..] {
            [h, w, 3] => Image::new(w, h, self.to_f32()?).map_err(|e| ProtocolError::Framing(e.to_string())),
            _ => Err(ProtocolError::Framing(format!("image tensor must be [h, w, 3], got {:?}", self.shape))),
        }
    }

    /// Masks travel as `[height, width]` of 0/1 bytes.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self::from_u8(&[mask.height(), mask.width()], mask.data())
    }

    pub fn to_mask(&self) -> Result<BinaryMask, ProtocolError> {
        match self.shape[..] {
            [h, w] => BinaryMask::new(w, h, self.to_u8()?).map_err(|e| ProtocolError::Framing(e.to_string())),
            _ => Err(ProtocolError::Framing(format!("mask tensor must be [h, w], got {:?}", self.shape))),
        }
    }

    /// Latents travel as `[channels, height, width]`.
    pub fn from_latent(latent: &Latent) -> Self {
        let (c, h, w) = latent.shape();
        Self::from_f32(&[c, h, w], latent.data())
    }

    pub fn to_latent(&self) -> Result<Latent, ProtocolError> {
        match self.shape[..] {
            [c, h, w] => Latent::new(c, h, w, self.to_f32()?).map_err(|e| ProtocolError::Framing(e.to_string())),
            _ => Err(ProtocolError::Framing(format!("latent tensor must be [c, h, w], got {:?}", self.shape))),
        }
    }
}

/// Handshake result: what the server hosts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandshakeInfo {
    pub embedding_dim: usize,
    pub latent_stride: usize,
    #[serde(default)]
    pub models: std::collections::BTreeMap<String, String>,
}

pub const MAX_EMBEDDING_DIM: usize = 4096;
pub const MAX_LATENT_STRIDE: usize = 16;

impl HandshakeInfo {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(1..=MAX_EMBEDDING_DIM).contains(&self.embedding_dim) {
            return Err(ProtocolError::Framing(format!(
                "handshake embedding_dim {} outside 1..={MAX_EMBEDDING_DIM}",
                self.embedding_dim
            )));
        }
        if !(1..=MAX_LATENT_STRIDE).contains(&self.latent_stride) {
            return Err(ProtocolError::Framing(format!(
                "handshake latent_stride {} outside 1..={MAX_LATENT_STRIDE}",
                self.latent_stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextArgs {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageArgs {
    pub image: WireTensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentArgs {
    pub latent: WireTensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictNoiseArgs {
    pub latent: WireTensor,
    pub t: usize,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub embedding: WireTensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MasksResult {
    pub masks: Vec<WireTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageResult {
    pub image: WireTensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentResult {
    pub latent: WireTensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseResult {
    pub noise: WireTensor,
}
