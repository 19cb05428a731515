//! Framed JSON protocol spoken with out-of-process model servers.
//!
//! Each message is a 4-byte big-endian payload length followed by UTF-8
//! JSON. Requests carry a client-chosen `id`; responses echo it and may
//! arrive in any order. Tensors are base64 strings of little-endian values.

mod client;
mod frame;
mod server;
mod wire;

use thiserror::Error;

pub use client::{Client, RemoteBackend, Transport};
pub use frame::{encode_frame, read_frame, write_frame, MAX_FRAME_LEN};
pub use server::{handle_request, loopback, serve, serve_listener};
pub use wire::{
    DType, EmbeddingResult, HandshakeInfo, ImageArgs, ImageResult, LatentArgs, LatentResult, MasksResult,
    NoiseResult, Op, PredictNoiseArgs, Request, Response, TextArgs, WireTensor, MAX_EMBEDDING_DIM,
    MAX_LATENT_STRIDE,
};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProtocolError {
    /// The connection failed or dropped; retrying on a fresh connection may help.
    #[error("transport: {0}")]
    Transport(String),

    /// The server answered `ok: false`.
    #[error("remote error: {message}")]
    Remote { message: String },

    /// The peer violated the framing or message contract. The connection is unusable.
    #[error("framing: {0}")]
    Framing(String),
}

impl ProtocolError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProtocolError::Transport(_))
    }
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Transport(e.to_string())
    }
}
