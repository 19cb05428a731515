//! Proposal ranking by text alignment and fidelity to the input.
//!
//! Each proposal gets a cross-modal alignment score `cma` in `[0, 1]` and a
//! fidelity penalty `iqa` (mean per-pixel RGB distance to the original).
//! The winner maximises `cma − α · iqa`; a disabled component contributes 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::image::{Image, TextPrompt};
use crate::mask_gen::cosine;

pub const DEFAULT_ALPHA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessmentConfig {
    pub alpha: f64,
    pub enable_cma: bool,
    pub enable_iqa: bool,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, enable_cma: true, enable_iqa: true }
    }
}

impl AssessmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }

    /// The four on/off combinations of the two components, CMA-major.
    pub fn ablation_variants(alpha: f64) -> [AssessmentConfig; 4] {
        [(false, false), (true, false), (false, true), (true, true)]
            .map(|(enable_cma, enable_iqa)| AssessmentConfig { alpha, enable_cma, enable_iqa })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessmentScore {
    pub proposal_index: usize,
    pub cma: f64,
    pub iqa: f64,
    /// Effective score under the active configuration.
    pub combined: f64,
}

impl AssessmentScore {
    pub fn new(proposal_index: usize, cma: f64, iqa: f64, config: &AssessmentConfig) -> Self {
        let mut s = Self { proposal_index, cma, iqa, combined: 0.0 };
        s.combined = s.effective(config);
        s
    }

    fn effective(&self, config: &AssessmentConfig) -> f64 {
        let cma = if config.enable_cma { self.cma } else { 0.0 };
        let iqa = if config.enable_iqa { self.iqa } else { 0.0 };
        cma - config.alpha * iqa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Proposal index of the winner.
    pub chosen: usize,
    pub scores: Vec<AssessmentScore>,
    pub config: AssessmentConfig,
}

/// Map a cosine similarity into `[0, 1]`.
pub fn cma_from_cosine(cos: f64) -> f64 {
    ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn cma_score(
    proposal: &Image,
    text: &TextPrompt,
    text_embedder: &dyn TextEmbedder,
    image_embedder: &dyn ImageEmbedder,
) -> Result<f64> {
    let t = text_embedder.embed_text(text.text())?;
    let i = image_embedder.embed_image(proposal)?;
    Ok(cma_from_cosine(cosine(&i, &t)?))
}

/// Mean over pixels of the Euclidean RGB distance; lies in `[0, √3]`.
pub fn iqa_score(original: &Image, proposal: &Image) -> Result<f64> {
    if original.dims() != proposal.dims() {
        return Err(Error::shape(format!(
            "proposal is {:?} but original is {:?}",
            proposal.dims(),
            original.dims()
        )));
    }
    let total: f64 = original
        .data()
        .chunks_exact(3)
        .zip(proposal.data().chunks_exact(3))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = f64::from(x) - f64::from(y);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / (original.width() * original.height()) as f64)
}

/// Argmax of the effective score; ties go to the earliest entry.
pub fn select(scores: &[AssessmentScore], config: &AssessmentConfig) -> Result<SelectionResult> {
    config.validate()?;
    let rescored: Vec<AssessmentScore> = scores
        .iter()
        .map(|s| AssessmentScore::new(s.proposal_index, s.cma, s.iqa, config))
        .collect();
    let best = rescored
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, s)| match best {
            Some((_, b)) if s.combined <= b => best,
            _ => Some((i, s.combined)),
        })
        .ok_or_else(|| Error::invalid("selection over an empty score list"))?;
    Ok(SelectionResult { chosen: rescored[best.0].proposal_index, scores: rescored, config: *config })
}

/// Raw component scores for every proposal, computed concurrently.
///
/// Components disabled in `config` are not computed and read 0. A proposal
/// whose embedding fails is dropped with a warning.
pub fn score_proposals(
    original: &Image,
    proposals: &[(usize, &Image)],
    text: &TextPrompt,
    text_embedder: &dyn TextEmbedder,
    image_embedder: &dyn ImageEmbedder,
    config: &AssessmentConfig,
) -> Result<Vec<AssessmentScore>> {
    let text_emb = if config.enable_cma { Some(text_embedder.embed_text(text.text())?) } else { None };
    let rows: Vec<Option<AssessmentScore>> = proposals
        .par_iter()
        .map(|&(index, image)| {
            let cma = match &text_emb {
                Some(t) => match image_embedder.embed_image(image).and_then(|e| cosine(&e, t)) {
                    Ok(c) => cma_from_cosine(c),
                    Err(e) => {
                        log::warn!("excluding proposal {index}: {e}");
                        return Ok(None);
                    }
                },
                None => 0.0,
            };
            let iqa = if config.enable_iqa { iqa_score(original, image)? } else { 0.0 };
            Ok(Some(AssessmentScore::new(index, cma, iqa, config)))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Score all proposals, given as `(proposal index, image)`, and pick the best.
pub fn assess(
    original: &Image,
    proposals: &[(usize, &Image)],
    text: &TextPrompt,
    text_embedder: &dyn TextEmbedder,
    image_embedder: &dyn ImageEmbedder,
    config: &AssessmentConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    if proposals.is_empty() {
        return Err(Error::invalid("no proposals to assess"));
    }
    let scores = score_proposals(original, proposals, text, text_embedder, image_embedder, config)?;
    if scores.is_empty() {
        return Err(Error::Backend(format!("all {} proposals failed scoring", proposals.len())));
    }
    select(&scores, config)
}
