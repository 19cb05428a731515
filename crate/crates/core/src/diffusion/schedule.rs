use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear-β noise schedule. `alpha_bars[t]` is the cumulative product of
/// `1 - β_s` for `s <= t`, with `alpha_bars[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if steps > 1 && beta_start == beta_end {
            return Err(Error::invalid("betas must be strictly increasing"));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Ok(Self::from_betas_unchecked(betas))
    }

    /// Schedule from explicit betas, which must lie in (0, 1) and strictly increase.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("betas must be strictly increasing"));
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("timestep {t} outside 0..={}", self.steps()))
        })
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}
