use super::Denoiser;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Test denoiser that knows the clean latent it should recover.
///
/// Returns the unique ε for which `z_t = √ᾱ_t · target + √(1 − ᾱ_t) · ε`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: Latent,
    sched: DiffusionSchedule,
}

impl OracleDenoiser {
    pub fn new(target: Latent, sched: DiffusionSchedule) -> Self {
        Self { target, sched }
    }

    pub fn target(&self) -> &Latent {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, _text: &str) -> Result<Latent> {
        if t == 0 {
            return Err(Error::invalid("oracle denoiser is undefined at t = 0"));
        }
        z_t.ensure_same_shape(&self.target, "oracle denoiser input")?;
        let ab = self.sched.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z_t
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&z, &x)| ((f64::from(z) - a * f64::from(x)) / s) as f32)
            .collect();
        Ok(Latent::from_raw(z_t.shape(), data))
    }
}
