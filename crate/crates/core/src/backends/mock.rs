use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{normalize, Denoiser, ImageEmbedder, Segmenter, TextEmbedder};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::tensor::Latent;

fn seeded_stream(seed: u64, domain: &[u8], payload: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"retouch-mock");
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain);
    h.update(payload);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Embeds text and images by hashing their bytes into a seeded stream of
/// normals projected onto the unit sphere.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 1, "embedding dim must be positive");
        Self { seed, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn project(&self, domain: &[u8], payload: &[u8]) -> Vec<f32> {
        let mut rng = seeded_stream(self.seed, domain, payload);
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        // a normal draw of all zeros has probability zero
        normalize(&v).expect("gaussian vector has positive norm")
    }
}

impl TextEmbedder for HashEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.project(b"text", text.as_bytes()))
    }
}

impl ImageEmbedder for HashEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.project(b"image", image.content_hash().as_bytes()))
    }
}

/// Connected components of a coarsely quantized colour image.
///
/// Each channel is quantized to `levels` buckets; 4-connected runs of the
/// same bucket triple become entities. Components smaller than
/// `min_fraction` of the image are dropped. Masks come out in raster order
/// of their first pixel.
#[derive(Debug, Clone)]
pub struct ColorSegmenter {
    pub levels: u32,
    pub min_fraction: f64,
}

impl Default for ColorSegmenter {
    fn default() -> Self {
        Self { levels: 4, min_fraction: 0.01 }
    }
}

impl Segmenter for ColorSegmenter {
    fn segment(&self, image: &Image) -> Result<Vec<BinaryMask>> {
        let (w, h) = image.dims();
        let levels = self.levels.max(1);
        let bucket = |v: f32| ((v * levels as f32) as u32).min(levels - 1);
        let labels: Vec<u32> = image
            .data()
            .chunks_exact(3)
            .map(|p| (bucket(p[0]) * levels + bucket(p[1])) * levels + bucket(p[2]))
            .collect();
        let min_pixels = ((self.min_fraction * (w * h) as f64).ceil() as usize).max(1);

        let mut seen = vec![false; w * h];
        let mut masks = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut members = Vec::new();
            while let Some(i) = queue.pop_front() {
                members.push(i);
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if !seen[j] && labels[j] == labels[start] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if members.len() >= min_pixels {
                let mut m = BinaryMask::zeros(w, h);
                for i in members {
                    m.set(i % w, i / w, true);
                }
                masks.push(m);
            }
        }
        Ok(masks)
    }
}

/// Deterministic stand-in for a text-conditioned denoiser.
///
/// Its implied clean-latent estimate is a text-derived colour per channel
/// plus a high-frequency function of `z_t`, so the result depends on the
/// sampling trajectory (distinct seeds give distinct proposals) while
/// staying bounded.
#[derive(Debug, Clone)]
pub struct MockDenoiser {
    seed: u64,
    sched: DiffusionSchedule,
}

impl MockDenoiser {
    const TEXTURE_AMPLITUDE: f64 = 0.25;
    const TEXTURE_FREQUENCY: f64 = 40.0;

    pub fn new(seed: u64, sched: DiffusionSchedule) -> Self {
        Self { seed, sched }
    }

    fn palette(&self, text: &str, channels: usize) -> Vec<(f64, f64)> {
        let mut rng = seeded_stream(self.seed, b"denoiser", text.as_bytes());
        (0..channels)
            .map(|_| (rng.random_range(0.15..0.85), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect()
    }
}

impl Denoiser for MockDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, text: &str) -> Result<Latent> {
        if t == 0 {
            return Err(Error::invalid("denoiser called at t = 0"));
        }
        let ab = self.sched.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (c, h, w) = z_t.shape();
        let palette = self.palette(text, c);
        let plane = h * w;
        let data = z_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let (colour, phase) = palette[i / plane];
                let z = f64::from(z);
                let x0 = colour
                    + Self::TEXTURE_AMPLITUDE * (Self::TEXTURE_FREQUENCY * z + phase).sin();
                ((z - a * x0) / s) as f32
            })
            .collect();
        Latent::new(c, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit() {
        let e = HashEmbedder::new(3, 64);
        let a = e.embed_text("dog").unwrap();
        assert_eq!(a, e.embed_text("dog").unwrap());
        assert_eq!(a.len(), 64);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        assert_ne!(a, e.embed_text("cat").unwrap());
        assert_ne!(a, HashEmbedder::new(4, 64).embed_text("dog").unwrap());

        let img = Image::filled(3, 2, [0.1, 0.2, 0.3]).unwrap();
        let v = e.embed_image(&img).unwrap();
        assert_eq!(v, e.embed_image(&img.clone()).unwrap());
        assert!((norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn color_segmenter_finds_blocks() {
        // left half red, right half blue, a green 2x2 square inside the blue
        let (w, h) = (8, 4);
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let px = if x < 4 {
                    [0.9, 0.1, 0.1]
                } else if (5..7).contains(&x) && (1..3).contains(&y) {
                    [0.1, 0.9, 0.1]
                } else {
                    [0.1, 0.1, 0.9]
                };
                data.extend(px);
            }
        }
        let img = Image::new(w, h, data).unwrap();
        let masks = ColorSegmenter::default().segment(&img).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks.iter().map(BinaryMask::count).collect::<Vec<_>>(), vec![16, 12, 4]);
        let total: usize = masks.iter().map(BinaryMask::count).sum();
        assert_eq!(total, w * h);
    }

    #[test]
    fn mock_denoiser_is_pure_and_finite() {
        let d = MockDenoiser::new(0, DiffusionSchedule::default());
        let z = Latent::new(3, 2, 2, (0..12).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap();
        let a = d.predict_noise(&z, 37, "a red hat").unwrap();
        assert_eq!(a, d.predict_noise(&z, 37, "a red hat").unwrap());
        assert_ne!(a, d.predict_noise(&z, 37, "a blue hat").unwrap());
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert!(d.predict_noise(&z, 0, "x").is_err());
    }
}
