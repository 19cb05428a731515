//! Text-guided local image retouching without user-drawn masks.
//!
//! A query such as "the dog on the left" is turned into a region by scoring
//! segmented entities against the query ([`mask_gen`]). The region is then
//! repainted toward a conditional text with blended latent diffusion
//! ([`diffusion`]), and the candidate edits are ranked by text alignment and
//! fidelity to the input ([`assessment`]). [`metrics`] holds full-reference
//! quality measures and a manifest-driven evaluation harness.
//!
//! Model roles sit behind the traits in [`backends`], with deterministic
//! in-process implementations and a client for the framed [`protocol`].

pub mod assessment;
pub mod backends;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod mask_gen;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{apply_mask, mask_centroid, mask_union, BinaryMask, Image, PromptRole, TextPrompt};
pub use tensor::{Latent, Tensor};
