//! Full-reference image quality: MSE, PSNR, and SSIM.

mod eval;

pub use eval::{
    evaluate_manifest, load_manifest, ManifestEntry, MetricReport, MetricRow, VariantSpec, REFERENCE_NOTE,
};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("images are {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over every channel value.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB for unit-range images. Identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter over fully contained windows only.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity, Gaussian-weighted, averaged over windows and
/// channels. Both sides must be at least 11×11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(3).map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(3).map(|&v| f64::from(v)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        let n = mu_a.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = aa[i] - ma * ma;
                let vb = bb[i] - mb * mb;
                let cov = ab[i] - ma * mb;
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}
