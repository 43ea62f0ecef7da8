//! Desk-scale stand-in for the medical datasets: grayscale shape images.
//!
//! Class 0 is a ring, class 1 a plus sign, class 2 a filled disk. A
//! [`Domain`] fixes how images are rendered (noise, contrast, class mix,
//! blur, and the share of distractor shapes that belong to no class). The
//! victim trains on one domain; the attacker's proxy pool comes from another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Error, Result};

pub const NUM_SHAPE_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub image_size: usize,
    pub noise_std: f64,
    pub contrast: [f64; 2],
    /// Relative class frequencies for the three shape classes.
    pub class_mix: [f64; NUM_SHAPE_CLASSES],
    /// Share of images that show a distractor (line/triangle) instead of a class shape.
    pub distractor_fraction: f64,
    /// Apply a 3x3 box blur after rendering.
    pub blur: bool,
    pub background_gradient: f64,
}

impl Domain {
    /// Distribution the victim is trained and tested on.
    pub fn victim() -> Self {
        Self {
            name: "shapes-clean".into(),
            image_size: 16,
            noise_std: 0.35,
            contrast: [0.4, 1.0],
            class_mix: [1.0, 1.0, 1.0],
            distractor_fraction: 0.0,
            blur: false,
            background_gradient: 0.0,
        }
    }

    /// Shifted attacker proxy: blurred, noisier, lower contrast, skewed class
    /// mix, and a share of off-task shapes.
    pub fn proxy() -> Self {
        Self {
            name: "shapes-shifted".into(),
            image_size: 16,
            noise_std: 0.45,
            contrast: [0.3, 0.8],
            class_mix: [0.5, 0.3, 0.2],
            distractor_fraction: 0.2,
            blur: true,
            background_gradient: 0.3,
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(1, self.image_size, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config("image size must be a multiple of 4, at least 8".into()));
        }
        if !(self.noise_std >= 0.0) || self.contrast[0] > self.contrast[1] {
            return Err(Error::Config(format!("invalid rendering parameters for {}", self.name)));
        }
        if self.class_mix.iter().any(|&w| !(w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class mix must be nonnegative with positive total".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return Err(Error::Config("distractor fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws `n` images; the label is `None` for distractors.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(ImageBatch, Vec<Option<usize>>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_std.max(1e-12)).expect("valid std");
        let total: f64 = self.class_mix.iter().sum();
        let mut batch = ImageBatch::empty(self.shape());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = if rng.gen_bool(self.distractor_fraction) {
                None
            } else {
                let mut u = rng.gen_range(0.0..total);
                let mut c = NUM_SHAPE_CLASSES - 1;
                for (k, &w) in self.class_mix.iter().enumerate() {
                    if u < w {
                        c = k;
                        break;
                    }
                    u -= w;
                }
                Some(c)
            };
            let mut img = render(label, self.image_size, &mut rng);
            if self.blur {
                img = box_blur(&img, self.image_size);
            }
            let gain = rng.gen_range(self.contrast[0]..=self.contrast[1]);
            let (gx, gy) = (
                rng.gen_range(-1.0..=1.0) * self.background_gradient,
                rng.gen_range(-1.0..=1.0) * self.background_gradient,
            );
            let s = self.image_size as f64;
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = ((i / self.image_size) as f64 / s - 0.5, (i % self.image_size) as f64 / s - 0.5);
                *v = gain * *v + gx * x + gy * y;
                if self.noise_std > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            batch.push(&img)?;
            labels.push(label);
        }
        Ok((batch, labels))
    }

    /// Like [`Domain::sample`] but only keeps class-bearing images.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Result<(ImageBatch, Vec<usize>)> {
        let mut domain = self.clone();
        domain.distractor_fraction = 0.0;
        let (batch, labels) = domain.sample(n, seed)?;
        Ok((batch, labels.into_iter().map(|l| l.expect("no distractors")).collect()))
    }
}

fn smooth_band(d: f64, half_width: f64) -> f64 {
    // Logistic edge, about one pixel wide.
    1.0 / (1.0 + (-(half_width - d) * 4.0).exp())
}

fn render<R: Rng>(label: Option<usize>, size: usize, rng: &mut R) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let jitter = size as f64 / 8.0;
    let cy = c + rng.gen_range(-jitter..=jitter);
    let cx = c + rng.gen_range(-jitter..=jitter);
    let scale = size as f64 / 16.0;
    let mut img = vec![0.0; size * size];
    match label {
        Some(0) => {
            let r = rng.gen_range(3.0..5.5) * scale;
            let hw = rng.gen_range(0.6..1.0) * scale;
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                *v = smooth_band((d - r).abs(), hw);
            }
        }
        Some(1) => {
            let arm = rng.gen_range(3.0..6.0) * scale;
            let hw = rng.gen_range(0.6..1.2) * scale;
            for (i, v) in img.iter_mut().enumerate() {
                let (dy, dx) = (((i / size) as f64 - cy).abs(), ((i % size) as f64 - cx).abs());
                // Distance to the nearer of the two bars.
                let hbar = dy.hypot((dx - arm).max(0.0));
                let vbar = dx.hypot((dy - arm).max(0.0));
                *v = smooth_band(hbar.min(vbar), hw);
            }
        }
        Some(_) => {
            let r = rng.gen_range(2.5..5.0) * scale;
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                *v = smooth_band(d, r);
            }
        }
        None => {
            // Distractor: a random line segment or a filled triangle.
            if rng.gen_bool(0.5) {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let len = rng.gen_range(3.0..7.0) * scale;
                let hw = rng.gen_range(0.5..1.0) * scale;
                let (ux, uy) = (theta.cos(), theta.sin());
                for (i, v) in img.iter_mut().enumerate() {
                    let (py, px) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
                    let along = (px * ux + py * uy).clamp(-len, len);
                    let d = ((px - along * ux).powi(2) + (py - along * uy).powi(2)).sqrt();
                    *v = smooth_band(d, hw);
                }
            } else {
                let r = rng.gen_range(3.0..5.5) * scale;
                for (i, v) in img.iter_mut().enumerate() {
                    let (py, px) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
                    let inside = py < r / 2.0 && py > -r && px.abs() < (py + r) * 0.6;
                    *v = if inside { 1.0 } else { 0.0 };
                }
            }
        }
    }
    img
}

fn box_blur(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    acc += img[yy * size + xx];
                    n += 1.0;
                }
            }
            out[y * size + x] = acc / n;
        }
    }
    out
}
