//! DDIM-style sampling kernels and latent-space blending.
//!
//! Kernels compute in `f64`. The `Latent` entry points round their result
//! to `f32`; the [`SamplingState`] ones keep full precision, which is what
//! a long trajectory should carry between steps.

use rand::Rng;
use rand_distr::StandardNormal;

use super::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::tensor::Latent;

/// Latent-resolution region mask, one value per spatial cell, broadcast over channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LatentMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::shape(format!(
                "latent mask {height}x{width} needs {} binary values",
                height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
}

/// Draw a latent of standard-normal values in a fixed (channel, row, column) order.
pub fn sample_standard_normal<R: Rng + ?Sized>(
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Latent {
    let n = shape.0 * shape.1 * shape.2;
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Latent::from_raw(shape, data)
}

/// A latent held in `f64` between sampling steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingState {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl SamplingState {
    pub fn from_latent(latent: &Latent) -> Self {
        Self { shape: latent.shape(), data: latent.data().iter().map(|&v| f64::from(v)).collect() }
    }

    /// Round to `f32`. A state built from a latent converts back bit for bit.
    pub fn to_latent(&self) -> Latent {
        Latent::from_raw(self.shape, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check(&self, other: (usize, usize, usize), what: &str) -> Result<()> {
        if self.shape != other {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape, other)));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(z0: &Latent, t: usize, eps: &Latent, sched: &DiffusionSchedule) -> Result<Latent> {
    if t == 0 {
        z0.ensure_same_shape(eps, "forward_noise eps")?;
        return Ok(z0.clone());
    }
    Ok(forward_noise_state(z0, t, eps, sched)?.to_latent())
}

/// [`forward_noise`] without the final rounding.
pub fn forward_noise_state(z0: &Latent, t: usize, eps: &Latent, sched: &DiffusionSchedule) -> Result<SamplingState> {
    z0.ensure_same_shape(eps, "forward_noise eps")?;
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Ok(SamplingState::from_latent(z0));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * f64::from(z) + b * f64::from(e))
        .collect();
    Ok(SamplingState { shape: z0.shape(), data })
}

/// σ_t of the DDIM update for a given `eta`.
pub fn ddim_sigma(t: usize, sched: &DiffusionSchedule, eta: f64) -> Result<f64> {
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!(
            "denoising timestep {t} outside 1..={}",
            sched.steps()
        )));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let var = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
    Ok(eta * var.max(0.0).sqrt())
}

/// One DDIM step from `t` to `t − 1`.
///
/// The `rng` is consulted only when σ_t > 0, so `eta = 0` is a pure function
/// of its other arguments.
pub fn denoise_step<R: Rng + ?Sized>(
    z_t: &Latent,
    t: usize,
    eps_pred: &Latent,
    sched: &DiffusionSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Latent> {
    Ok(denoise_step_state(&SamplingState::from_latent(z_t), t, eps_pred, sched, eta, rng)?.to_latent())
}

/// [`denoise_step`] on a full-precision state.
pub fn denoise_step_state<R: Rng + ?Sized>(
    z_t: &SamplingState,
    t: usize,
    eps_pred: &Latent,
    sched: &DiffusionSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<SamplingState> {
    z_t.check(eps_pred.shape(), "denoise_step eps_pred")?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    let sigma = ddim_sigma(t, sched, eta)?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let (sqrt_ab_t, sqrt_one_minus_ab_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sqrt_ab_prev = ab_prev.sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let noise = (sigma > 0.0).then(|| sample_standard_normal(z_t.shape, rng));
    let data = z_t
        .data
        .iter()
        .zip(eps_pred.data())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let e = f64::from(e);
            let x0 = (z - sqrt_one_minus_ab_t * e) / sqrt_ab_t;
            let mut out = sqrt_ab_prev * x0 + dir * e;
            if let Some(xi) = &noise {
                out += sigma * f64::from(xi.data()[i]);
            }
            out
        })
        .collect();
    Ok(SamplingState { shape: z_t.shape, data })
}

fn blend_planes<T: Copy>(bg: &[T], fg: &[T], mask: &LatentMask) -> Vec<T> {
    let plane = mask.height * mask.width;
    bg.iter()
        .zip(fg)
        .enumerate()
        .map(|(i, (&b, &f))| if mask.data[i % plane] == 1 { f } else { b })
        .collect()
}

fn check_mask(shape: (usize, usize, usize), mask: &LatentMask) -> Result<()> {
    let (_, h, w) = shape;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::shape(format!(
            "blend mask is {}x{} but latent is {h}x{w}",
            mask.height, mask.width
        )));
    }
    Ok(())
}

/// `z_background ⊙ (1 − M) + z_denoised ⊙ M`, with `M` broadcast over channels.
pub fn blend(z_background: &Latent, z_denoised: &Latent, mask: &LatentMask) -> Result<Latent> {
    z_background.ensure_same_shape(z_denoised, "blend")?;
    check_mask(z_background.shape(), mask)?;
    Ok(Latent::from_raw(z_background.shape(), blend_planes(z_background.data(), z_denoised.data(), mask)))
}

/// [`blend`] on full-precision states.
pub fn blend_state(z_background: &SamplingState, z_denoised: &SamplingState, mask: &LatentMask) -> Result<SamplingState> {
    z_background.check(z_denoised.shape, "blend")?;
    check_mask(z_background.shape, mask)?;
    Ok(SamplingState { shape: z_background.shape, data: blend_planes(&z_background.data, &z_denoised.data, mask) })
}

/// Max-pool a pixel mask to latent resolution: a cell is set if any pixel it covers is.
pub fn downsample_mask(mask: &BinaryMask, latent_h: usize, latent_w: usize) -> Result<LatentMask> {
    let (w, h) = mask.dims();
    if latent_h == 0 || latent_w == 0 || h % latent_h != 0 || w % latent_w != 0 {
        return Err(Error::shape(format!(
            "mask {w}x{h} is not an integer multiple of latent {latent_w}x{latent_h}"
        )));
    }
    let (sy, sx) = (h / latent_h, w / latent_w);
    if sy != sx {
        return Err(Error::shape(format!("non-uniform stride {sx}x{sy}")));
    }
    let mut data = vec![0u8; latent_h * latent_w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                data[(y / sy) * latent_w + x / sx] = 1;
            }
        }
    }
    Ok(LatentMask { height: latent_h, width: latent_w, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f32) -> Latent {
        Latent::new(1, 1, 1, vec![v]).unwrap()
    }

    fn random_latent(shape: (usize, usize, usize), seed: u64) -> Latent {
        sample_standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn forward_noise_boundaries() {
        let sched = DiffusionSchedule::default();
        let z0 = random_latent((3, 4, 4), 1);
        let eps = random_latent((3, 4, 4), 2);
        assert_eq!(forward_noise(&z0, 0, &eps, &sched).unwrap(), z0);

        let zero = Latent::zeros(3, 4, 4);
        let zt = forward_noise(&zero, 50, &eps, &sched).unwrap();
        let s = (1.0 - sched.alpha_bar(50).unwrap()).sqrt();
        for (a, e) in zt.data().iter().zip(eps.data()) {
            assert_eq!(*a, (s * f64::from(*e)) as f32);
        }
        assert!(forward_noise(&z0, 1, &zero.clone(), &sched).is_ok());
        assert!(forward_noise(&z0, 1, &Latent::zeros(1, 4, 4), &sched).is_err());
    }

    #[test]
    fn forward_noise_scalar_formula() {
        let sched = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let zt = forward_noise(&scalar(1.0), 2, &scalar(0.5), &sched).unwrap();
        let oracle = 0.72f64.sqrt() + 0.5 * 0.28f64.sqrt();
        assert!((f64::from(zt.data()[0]) - oracle).abs() < 1e-6);
    }

    #[test]
    fn exact_eps_step_lands_on_previous_marginal() {
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = random_latent((2, 3, 3), 10);
        let eps = random_latent((2, 3, 3), 11);
        for t in [1, 2, 57, 200] {
            let zt = forward_noise(&z0, t, &eps, &sched).unwrap();
            let prev = denoise_step(&zt, t, &eps, &sched, 0.0, &mut rng).unwrap();
            let oracle = forward_noise(&z0, t - 1, &eps, &sched).unwrap();
            for (a, b) in prev.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn eta_zero_ignores_rng() {
        let sched = DiffusionSchedule::default();
        let zt = random_latent((3, 2, 2), 3);
        let eps = random_latent((3, 2, 2), 4);
        let a = denoise_step(&zt, 100, &eps, &sched, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = denoise_step(&zt, 100, &eps, &sched, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let c = denoise_step(&zt, 100, &eps, &sched, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = denoise_step(&zt, 100, &eps, &sched, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn sigma_vanishes_at_last_step() {
        let sched = DiffusionSchedule::default();
        assert_eq!(ddim_sigma(1, &sched, 1.0).unwrap(), 0.0);
        assert!(ddim_sigma(0, &sched, 1.0).is_err());
        assert!(ddim_sigma(201, &sched, 1.0).is_err());
    }

    #[test]
    fn step_rejects_out_of_range_t() {
        let sched = DiffusionSchedule::default();
        let z = Latent::zeros(1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(denoise_step(&z, 0, &z, &sched, 0.0, &mut rng).is_err());
        assert!(denoise_step(&z, 201, &z, &sched, 0.0, &mut rng).is_err());
    }

    #[test]
    fn composed_exact_steps_recover_z0() {
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = random_latent((3, 8, 8), 20);
        let eps = random_latent((3, 8, 8), 21);
        let mut z = forward_noise_state(&z0, 200, &eps, &sched).unwrap();
        for t in (1..=200).rev() {
            z = denoise_step_state(&z, t, &eps, &sched, 0.0, &mut rng).unwrap();
        }
        let err = z
            .data()
            .iter()
            .zip(z0.data())
            .map(|(a, &b)| (a - f64::from(b)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max abs error {err}");
        assert_eq!(z.to_latent(), z0);
    }

    #[test]
    fn blend_selects_per_cell() {
        let bg = random_latent((2, 3, 3), 5);
        let fg = random_latent((2, 3, 3), 6);
        let ones = LatentMask::new(3, 3, vec![1; 9]).unwrap();
        let zeros = LatentMask::new(3, 3, vec![0; 9]).unwrap();
        assert_eq!(blend(&bg, &fg, &ones).unwrap(), fg);
        assert_eq!(blend(&bg, &fg, &zeros).unwrap(), bg);

        let m = LatentMask::new(3, 3, vec![1, 0, 0, 0, 1, 0, 1, 1, 0]).unwrap();
        let out = blend(&bg, &fg, &m).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let i = c * 9 + y * 3 + x;
                    let want = if m.get(y, x) { fg.data()[i] } else { bg.data()[i] };
                    assert_eq!(out.data()[i], want);
                }
            }
        }
        assert!(blend(&bg, &Latent::zeros(2, 3, 2), &m).is_err());
        assert!(blend(&bg, &fg, &LatentMask::new(2, 2, vec![0; 4]).unwrap()).is_err());
    }

    #[test]
    fn downsample_cases() {
        let all = BinaryMask::ones(16, 16);
        assert!(downsample_mask(&all, 2, 2).unwrap().data().iter().all(|&v| v == 1));

        let mut one = BinaryMask::zeros(16, 16);
        one.set(9, 3, true);
        let d = downsample_mask(&one, 2, 2).unwrap();
        assert_eq!(d.data(), &[0, 1, 0, 0]);

        let checker = BinaryMask::from_fn(8, 6, |x, y| (x + y) % 2 == 0);
        let d = downsample_mask(&checker, 3, 4).unwrap();
        // max-pool oracle
        for ly in 0..3 {
            for lx in 0..4 {
                let any = (0..2).any(|dy| (0..2).any(|dx| checker.get(lx * 2 + dx, ly * 2 + dy)));
                assert_eq!(d.get(ly, lx), any);
            }
        }
        assert!(d.data().iter().all(|&v| v == 1));

        assert!(downsample_mask(&all, 3, 3).is_err());
        assert!(downsample_mask(&all, 8, 4).is_err());
    }
}
