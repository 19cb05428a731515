use crate::error::{Error, Result};

/// Dense row-major `f32` tensor. Carrier for embeddings and latents on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor holds a non-finite value"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }
}

/// Latent grid `z` with shape `(channels, height, width)`, channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "latent shape ({channels}, {height}, {width}) has a zero extent"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "latent ({channels}, {height}, {width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent holds a non-finite value"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Unchecked constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(shape: (usize, usize, usize), data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2);
        Self { channels: shape.0, height: shape.1, width: shape.2, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn ensure_same_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl From<Latent> for Tensor {
    fn from(z: Latent) -> Self {
        Tensor { shape: vec![z.channels, z.height, z.width], data: z.data }
    }
}

impl TryFrom<Tensor> for Latent {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Latent::new(c, h, w, t.data),
            ref other => Err(Error::shape(format!("latent must be rank 3, got {other:?}"))),
        }
    }
}
