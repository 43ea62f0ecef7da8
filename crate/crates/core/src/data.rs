//! Image batches and the flip/shift augmentation used by the trainers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of same-shaped images stored contiguously, `n x c x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    shape: ImageShape,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Input("image shape has a zero dimension".into()));
        }
        if !data.len().is_multiple_of(shape.len()) {
            return Err(Error::Input(format!(
                "{} values is not a whole number of {}x{}x{} images",
                data.len(),
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.shape.len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, image: &[f64]) -> Result<()> {
        if image.len() != self.shape.len() {
            return Err(Error::Input(format!(
                "image of {} values pushed into batch of {}-value images",
                image.len(),
                self.shape.len()
            )));
        }
        self.data.extend_from_slice(image);
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            data,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.shape.len())
    }
}

/// Label-preserving augmentation: random horizontal flip and a random
/// translation of up to `max_shift` pixels with zero fill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub max_shift: usize,
}

impl Augment {
    pub const NONE: Augment = Augment {
        flip: false,
        max_shift: 0,
    };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.max_shift == 0
    }

    pub fn apply<R: Rng>(&self, batch: &ImageBatch, rng: &mut R) -> ImageBatch {
        if self.is_identity() {
            return batch.clone();
        }
        let shape = batch.shape();
        let (h, w) = (shape.height as isize, shape.width as isize);
        let mut out = Vec::with_capacity(batch.data.len());
        for img in batch.iter() {
            let flip = self.flip && rng.gen_bool(0.5);
            let s = self.max_shift as isize;
            let (dy, dx) = if s > 0 {
                (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
            } else {
                (0, 0)
            };
            for c in 0..shape.channels {
                let plane = &img[c * shape.height * shape.width..][..shape.height * shape.width];
                for y in 0..h {
                    for x in 0..w {
                        let sy = y - dy;
                        let mut sx = x - dx;
                        if flip {
                            sx = w - 1 - sx;
                        }
                        let v = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                            plane[(sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                        out.push(v);
                    }
                }
            }
        }
        ImageBatch { shape, data: out }
    }
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip: true,
            max_shift: 1,
        }
    }
}
