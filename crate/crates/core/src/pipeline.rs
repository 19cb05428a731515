//! The full edit: region from the query, proposals from the region, and
//! the best proposal by assessment.

use serde::{Deserialize, Serialize};

use crate::assessment::{assess, AssessmentConfig, SelectionResult};
use crate::backends::Backends;
use crate::diffusion::{retouch, RetouchConfig, RetouchOutcome};
use crate::error::Error;
use crate::image::{BinaryMask, Image, TextPrompt};
use crate::mask_gen::{generate_mask, MaskGenConfig, MaskOutcome};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub mask: MaskGenConfig,
    #[serde(default)]
    pub retouch: RetouchConfig,
    #[serde(default)]
    pub assessment: AssessmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mask,
    Retouch,
    Assess,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mask => "mask",
            Stage::Retouch => "retouch",
            Stage::Assess => "assess",
        }
    }
}

/// A pipeline failure tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{} stage", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
        move |source| StageError { stage, source }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub mask: MaskOutcome,
    pub region: BinaryMask,
    pub retouch: RetouchOutcome,
    pub selection: SelectionResult,
}

impl PipelineRun {
    /// The winning proposal's image.
    pub fn output(&self) -> &Image {
        let chosen = self.selection.chosen;
        &self
            .retouch
            .proposals
            .iter()
            .find(|p| p.index == chosen)
            .expect("selection refers to a produced proposal")
            .image
    }
}

/// Generate the region for `query`. No matching entity is an error.
pub fn region_for(
    image: &Image,
    query: &TextPrompt,
    backends: &Backends,
    config: &MaskGenConfig,
) -> Result<(MaskOutcome, BinaryMask), StageError> {
    let outcome = generate_mask(
        image,
        query,
        backends.segmenter.as_ref(),
        backends.text.as_ref(),
        backends.image.as_ref(),
        config,
    )
    .map_err(StageError::at(Stage::Mask))?;
    let region = outcome.region.clone().ok_or(StageError { stage: Stage::Mask, source: Error::NoMatchingEntity })?;
    Ok((outcome, region))
}

/// Retouch `region` toward `text` and select the best proposal.
pub fn edit_region(
    image: &Image,
    region: &BinaryMask,
    text: &TextPrompt,
    backends: &Backends,
    retouch_config: &RetouchConfig,
    assessment: &AssessmentConfig,
) -> Result<(RetouchOutcome, SelectionResult), StageError> {
    let outcome = retouch(image, region, text, backends.codec.as_ref(), backends.denoiser.as_ref(), retouch_config)
        .map_err(StageError::at(Stage::Retouch))?;
    let candidates: Vec<(usize, &Image)> = outcome.proposals.iter().map(|p| (p.index, &p.image)).collect();
    let selection = assess(image, &candidates, text, backends.text.as_ref(), backends.image.as_ref(), assessment)
        .map_err(StageError::at(Stage::Assess))?;
    Ok((outcome, selection))
}

/// Mask, retouch, and assess in sequence.
pub fn run_pipeline(
    image: &Image,
    query: &TextPrompt,
    text: &TextPrompt,
    backends: &Backends,
    config: &PipelineConfig,
) -> Result<PipelineRun, StageError> {
    let (mask, region) = region_for(image, query, backends, &config.mask)?;
    let (retouch, selection) = edit_region(image, &region, text, backends, &config.retouch, &config.assessment)?;
    Ok(PipelineRun { mask, region, retouch, selection })
}
