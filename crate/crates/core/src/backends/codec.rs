use super::LatentCodec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Latent;

/// Stride-1 codec: the image reinterpreted as a 3-channel latent.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn stride(&self) -> usize {
        1
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        let (w, h) = image.dims();
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in image.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        Ok(Latent::from_raw((3, h, w), data))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (c, h, w) = latent.shape();
        if c != 3 {
            return Err(Error::shape(format!("identity codec needs 3 channels, got {c}")));
        }
        let plane = h * w;
        let z = latent.data();
        let data = (0..plane)
            .flat_map(|i| (0..3).map(move |ch| z[ch * plane + i].clamp(0.0, 1.0)))
            .collect();
        Image::new(w, h, data)
    }
}

/// Average-pool encoder with nearest-neighbour decoder at a fixed stride.
#[derive(Debug, Clone, Copy)]
pub struct PoolCodec {
    stride: usize,
}

impl PoolCodec {
    pub fn new(stride: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        Self { stride }
    }
}

impl LatentCodec for PoolCodec {
    fn stride(&self) -> usize {
        self.stride
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        let s = self.stride;
        let (w, h) = image.dims();
        if w % s != 0 || h % s != 0 {
            return Err(Error::shape(format!("image {w}x{h} not divisible by stride {s}")));
        }
        let (lw, lh) = (w / s, h / s);
        let plane = lw * lh;
        let mut acc = vec![0.0f64; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let px = image.pixel(x, y);
                let cell = (y / s) * lw + x / s;
                for c in 0..3 {
                    acc[c * plane + cell] += f64::from(px[c]);
                }
            }
        }
        let n = (s * s) as f64;
        Ok(Latent::from_raw((3, lh, lw), acc.into_iter().map(|v| (v / n) as f32).collect()))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (c, lh, lw) = latent.shape();
        if c != 3 {
            return Err(Error::shape(format!("pool codec needs 3 channels, got {c}")));
        }
        let s = self.stride;
        let (w, h) = (lw * s, lh * s);
        let plane = lw * lh;
        let z = latent.data();
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let cell = (y / s) * lw + x / s;
                for ch in 0..3 {
                    data.push(z[ch * plane + cell].clamp(0.0, 1.0));
                }
            }
        }
        Image::new(w, h, data)
    }
}
