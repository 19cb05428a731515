//! Blended latent diffusion: the retouching stage.
//!
//! Each proposal runs its own seeded sampling trajectory. After every
//! denoising step the cells outside the region are overwritten with the
//! encoded input noised to the same step, so the final latent carries the
//! encoded input bit for bit outside the region.

mod sampler;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sampler::{
    blend, blend_state, ddim_sigma, denoise_step, denoise_step_state, downsample_mask, forward_noise,
    forward_noise_state, sample_standard_normal, LatentMask, SamplingState,
};
pub use schedule::{DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

use crate::backends::{Denoiser, LatentCodec};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, TextPrompt};
use crate::tensor::Latent;

pub const DEFAULT_PROPOSALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetouchConfig {
    /// Number of proposals `m`.
    #[serde(rename = "m")]
    pub proposals: usize,
    /// Number of diffusion steps `T`.
    #[serde(rename = "T")]
    pub steps: usize,
    /// 0 gives deterministic DDIM, 1 the fully stochastic variant.
    pub eta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Skip classifier-free guidance in the loop; a denoiser may still apply it internally.
    #[serde(default = "default_true")]
    pub guidance_free: bool,
    /// One RNG seed per proposal, pairwise distinct.
    pub seeds: Vec<u64>,
}

fn default_true() -> bool {
    true
}

impl Default for RetouchConfig {
    fn default() -> Self {
        Self::with_base_seed(DEFAULT_PROPOSALS, 0)
    }
}

impl RetouchConfig {
    /// Defaults with seeds `base, base + 1, ..., base + m − 1`.
    pub fn with_base_seed(proposals: usize, base: u64) -> Self {
        Self {
            proposals,
            steps: DEFAULT_STEPS,
            eta: 1.0,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            guidance_free: true,
            seeds: (0..proposals as u64).map(|k| base.wrapping_add(k)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proposals == 0 {
            return Err(Error::invalid("at least one proposal is required"));
        }
        if self.seeds.len() != self.proposals {
            return Err(Error::invalid(format!(
                "{} seeds given for {} proposals",
                self.seeds.len(),
                self.proposals
            )));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("proposal seeds must be pairwise distinct"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub index: usize,
    pub seed: u64,
    pub image: Image,
    pub final_latent: Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RetouchOutcome {
    /// Successful proposals in index order.
    pub proposals: Vec<Proposal>,
    pub failures: Vec<ProposalFailure>,
    /// `encode(image)`, the latent the background is pinned to.
    pub encoded: Latent,
    pub latent_mask: LatentMask,
}

/// Generate `config.proposals` candidates editing `region` of `image` toward `text`.
///
/// Proposals run on the current rayon pool; results are assembled by index,
/// so output does not depend on how many run at once.
pub fn retouch(
    image: &Image,
    region: &BinaryMask,
    text: &TextPrompt,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    config: &RetouchConfig,
) -> Result<RetouchOutcome> {
    config.validate()?;
    if region.dims() != image.dims() {
        return Err(Error::shape(format!(
            "region is {:?} but image is {:?}",
            region.dims(),
            image.dims()
        )));
    }
    let sched = config.schedule()?;
    let encoded = codec.encode(image)?;
    let (_, lh, lw) = encoded.shape();
    let latent_mask = downsample_mask(region, lh, lw)?;

    let results: Vec<Result<Proposal>> = config
        .seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| {
            let final_latent =
                sample_proposal(&encoded, &latent_mask, text.text(), denoiser, &sched, config.eta, seed)?;
            let decoded = codec.decode(&final_latent)?;
            if decoded.dims() != image.dims() {
                return Err(Error::shape(format!(
                    "codec decoded {:?} for a {:?} input",
                    decoded.dims(),
                    image.dims()
                )));
            }
            Ok(Proposal { index, seed, image: decoded, final_latent })
        })
        .collect();

    let mut proposals = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => proposals.push(p),
            Err(e) => {
                log::warn!("proposal {index} failed: {e}");
                failures.push(ProposalFailure { index, seed: config.seeds[index], error: e.to_string() });
            }
        }
    }
    if proposals.is_empty() {
        return Err(Error::AllProposalsFailed(failures.len()));
    }
    Ok(RetouchOutcome { proposals, failures, encoded, latent_mask })
}

/// One blended sampling trajectory from `z_T ~ N(0, I)` down to `z_0`.
///
/// RNG draw order per step: the DDIM noise (only when σ_t > 0), then the
/// background noise (skipped on the final step, where the background is
/// the encoded input itself). The trajectory is carried in `f64`; the
/// denoiser sees it rounded to `f32`.
pub fn sample_proposal(
    encoded: &Latent,
    latent_mask: &LatentMask,
    text: &str,
    denoiser: &dyn Denoiser,
    sched: &DiffusionSchedule,
    eta: f64,
    seed: u64,
) -> Result<Latent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = encoded.shape();
    let mut z = SamplingState::from_latent(&sample_standard_normal(shape, &mut rng));
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict_noise(&z.to_latent(), t, text)?;
        let denoised = denoise_step_state(&z, t, &eps, sched, eta, &mut rng)?;
        let background = if t == 1 {
            SamplingState::from_latent(encoded)
        } else {
            let eps_bg = sample_standard_normal(shape, &mut rng);
            forward_noise_state(encoded, t - 1, &eps_bg, sched)?
        };
        z = blend_state(&background, &denoised, latent_mask)?;
    }
    Ok(z.to_latent())
}
