//! Classifier abstraction and the desk-scale architectures.
//!
//! A [`Classifier`] maps an [`ImageBatch`] to an `n x K` logits matrix and
//! exposes its weights as one flat `f64` vector. The flattening order is fixed
//! per architecture (see [`Architecture::layout`]) so EMA updates and
//! checkpoints line up across runs.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, params_digest, save_checkpoint, CheckpointMeta};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::{Logits, Matrix};

/// Trainable K-class image classifier.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> ImageShape;

    fn params(&self) -> &[f64];

    /// Overwrites every weight; the slice must have exactly [`Self::params`]'s length.
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn train_mode(&self) -> bool;

    fn set_train_mode(&mut self, on: bool);

    fn forward(&self, images: &ImageBatch) -> Result<Logits>;

    /// Gradient of `sum_ij dlogits_ij * logits_ij` with respect to the flat
    /// parameter vector, i.e. the backward pass for an upstream gradient.
    fn backward(&self, images: &ImageBatch, dlogits: &Matrix) -> Result<Vec<f64>>;

    fn architecture_id(&self) -> String;

    fn boxed_clone(&self) -> Box<dyn Classifier>;
}

impl Clone for Box<dyn Classifier> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Network topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// One hidden ReLU layer.
    Mlp {
        input: ImageShape,
        hidden: usize,
        num_classes: usize,
    },
    /// Two `conv3x3 -> ReLU -> maxpool2` blocks and a linear head.
    ConvNet {
        input: ImageShape,
        channels: [usize; 2],
        num_classes: usize,
    },
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
}

impl Architecture {
    /// The default thief/victim topology: 8 and 16 channels.
    pub fn conv_small(input: ImageShape, num_classes: usize) -> Self {
        Architecture::ConvNet {
            input,
            channels: [8, 16],
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp { num_classes, .. } | Architecture::ConvNet { num_classes, .. } => {
                *num_classes
            }
        }
    }

    pub fn input(&self) -> ImageShape {
        match self {
            Architecture::Mlp { input, .. } | Architecture::ConvNet { input, .. } => *input,
        }
    }

    pub fn id(&self) -> String {
        match self {
            Architecture::Mlp {
                input, hidden, num_classes,
            } => format!(
                "mlp-{}x{}x{}-h{hidden}-k{num_classes}",
                input.channels, input.height, input.width
            ),
            Architecture::ConvNet {
                input,
                channels,
                num_classes,
            } => format!(
                "conv-{}x{}x{}-c{}-{}-k{num_classes}",
                input.channels, input.height, input.width, channels[0], channels[1]
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if self.input().is_empty() {
            return Err(Error::Config("input shape has a zero dimension".into()));
        }
        match self {
            Architecture::Mlp { hidden, .. } if *hidden == 0 => {
                Err(Error::Config("MLP hidden width must be positive".into()))
            }
            Architecture::ConvNet {
                input, channels, ..
            } => {
                if input.height % 4 != 0 || input.width % 4 != 0 {
                    return Err(Error::Config(
                        "conv input height and width must be multiples of 4".into(),
                    ));
                }
                if channels.contains(&0) {
                    return Err(Error::Config("conv channel counts must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Flattening order of the parameter vector. Weights are row-major:
    /// conv kernels as `[out][in][ky][kx]`, dense layers as `[out][in]`,
    /// each followed by its bias.
    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name, len, fan_in| {
            blocks.push(ParamBlock {
                name,
                offset,
                len,
                fan_in,
            });
            offset += len;
        };
        match self {
            Architecture::Mlp {
                input,
                hidden,
                num_classes,
            } => {
                push("fc1.weight", hidden * input.len(), input.len());
                push("fc1.bias", *hidden, input.len());
                push("fc2.weight", num_classes * hidden, *hidden);
                push("fc2.bias", *num_classes, *hidden);
            }
            Architecture::ConvNet {
                input,
                channels: [c1, c2],
                num_classes,
            } => {
                let flat = c2 * (input.height / 4) * (input.width / 4);
                push("conv1.weight", c1 * input.channels * 9, input.channels * 9);
                push("conv1.bias", *c1, input.channels * 9);
                push("conv2.weight", c2 * c1 * 9, c1 * 9);
                push("conv2.bias", *c2, c1 * 9);
                push("fc.weight", num_classes * flat, flat);
                push("fc.bias", *num_classes, flat);
            }
        }
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|b| b.len).sum()
    }
}

/// Plain CPU implementation of an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<f64>,
    train_mode: bool,
}

impl Network {
    /// He-normal weights, zero biases, from a seeded ChaCha8 stream.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in arch.layout() {
            if block.name.ends_with(".bias") {
                continue;
            }
            let std = (2.0 / block.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[block.offset..block.offset + block.len] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            arch,
            params,
            train_mode: false,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for architecture {} expecting {}",
                params.len(),
                arch.id(),
                arch.param_count()
            )));
        }
        Ok(Self {
            arch,
            params,
            train_mode: false,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_batch(&self, images: &ImageBatch) -> Result<()> {
        if images.shape() != self.arch.input() {
            return Err(Error::Input(format!(
                "images of shape {:?} fed to {}",
                images.shape(),
                self.arch.id()
            )));
        }
        Ok(())
    }

    fn block(&self, name: &str) -> &[f64] {
        let b = self
            .arch
            .layout()
            .into_iter()
            .find(|b| b.name == name)
            .expect("known block");
        &self.params[b.offset..b.offset + b.len]
    }

    fn sample_forward(&self, x: &[f64]) -> Vec<f64> {
        match &self.arch {
            Architecture::Mlp { .. } => {
                let mut h = layers::dense_forward(x, self.block("fc1.weight"), self.block("fc1.bias"));
                layers::relu_in_place(&mut h);
                layers::dense_forward(&h, self.block("fc2.weight"), self.block("fc2.bias"))
            }
            Architecture::ConvNet {
                input,
                channels: [c1, c2],
                ..
            } => {
                let (h, w) = (input.height, input.width);
                let mut a1 = layers::conv3x3_forward(
                    x,
                    input.channels,
                    h,
                    w,
                    self.block("conv1.weight"),
                    self.block("conv1.bias"),
                    *c1,
                );
                layers::relu_in_place(&mut a1);
                let (p1, _) = layers::maxpool2_forward(&a1, *c1, h, w);
                let mut a2 = layers::conv3x3_forward(
                    &p1,
                    *c1,
                    h / 2,
                    w / 2,
                    self.block("conv2.weight"),
                    self.block("conv2.bias"),
                    *c2,
                );
                layers::relu_in_place(&mut a2);
                let (p2, _) = layers::maxpool2_forward(&a2, *c2, h / 2, w / 2);
                layers::dense_forward(&p2, self.block("fc.weight"), self.block("fc.bias"))
            }
        }
    }

    fn sample_backward(&self, x: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let layout = self.arch.layout();
        let lens: Vec<usize> = layout.iter().map(|b| b.len).collect();
        let mut grad = vec![0.0; self.params.len()];
        match &self.arch {
            Architecture::Mlp { .. } => {
                let mut h = layers::dense_forward(x, self.block("fc1.weight"), self.block("fc1.bias"));
                layers::relu_in_place(&mut h);
                let (g_w1, rest) = grad.split_at_mut(lens[0]);
                let (g_b1, rest) = rest.split_at_mut(lens[1]);
                let (g_w2, g_b2) = rest.split_at_mut(lens[2]);
                let mut dh = layers::dense_backward(&h, self.block("fc2.weight"), dlogits, g_w2, g_b2);
                for (d, &hv) in dh.iter_mut().zip(&h) {
                    if hv <= 0.0 {
                        *d = 0.0;
                    }
                }
                layers::dense_backward(x, self.block("fc1.weight"), &dh, g_w1, g_b1);
            }
            Architecture::ConvNet {
                input,
                channels: [c1, c2],
                ..
            } => {
                let (h, w) = (input.height, input.width);
                let mut a1 = layers::conv3x3_forward(
                    x,
                    input.channels,
                    h,
                    w,
                    self.block("conv1.weight"),
                    self.block("conv1.bias"),
                    *c1,
                );
                layers::relu_in_place(&mut a1);
                let (p1, i1) = layers::maxpool2_forward(&a1, *c1, h, w);
                let mut a2 = layers::conv3x3_forward(
                    &p1,
                    *c1,
                    h / 2,
                    w / 2,
                    self.block("conv2.weight"),
                    self.block("conv2.bias"),
                    *c2,
                );
                layers::relu_in_place(&mut a2);
                let (p2, i2) = layers::maxpool2_forward(&a2, *c2, h / 2, w / 2);

                // Layout order: conv1.w, conv1.b, conv2.w, conv2.b, fc.w, fc.b.
                let (g_c1w, rest) = grad.split_at_mut(lens[0]);
                let (g_c1b, rest) = rest.split_at_mut(lens[1]);
                let (g_c2w, rest) = rest.split_at_mut(lens[2]);
                let (g_c2b, rest) = rest.split_at_mut(lens[3]);
                let (g_fcw, g_fcb) = rest.split_at_mut(lens[4]);

                let dp2 = layers::dense_backward(&p2, self.block("fc.weight"), dlogits, g_fcw, g_fcb);
                let mut da2 = vec![0.0; a2.len()];
                for (k, &src) in i2.iter().enumerate() {
                    if a2[src] > 0.0 {
                        da2[src] += dp2[k];
                    }
                }
                let dp1 = layers::conv3x3_backward(
                    &p1,
                    *c1,
                    h / 2,
                    w / 2,
                    self.block("conv2.weight"),
                    *c2,
                    &da2,
                    g_c2w,
                    g_c2b,
                    true,
                );
                let mut da1 = vec![0.0; a1.len()];
                for (k, &src) in i1.iter().enumerate() {
                    if a1[src] > 0.0 {
                        da1[src] += dp1[k];
                    }
                }
                layers::conv3x3_backward(
                    x,
                    input.channels,
                    h,
                    w,
                    self.block("conv1.weight"),
                    *c1,
                    &da1,
                    g_c1w,
                    g_c1b,
                    false,
                );
            }
        }
        grad
    }
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn input_shape(&self) -> ImageShape {
        self.arch.input()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn train_mode(&self) -> bool {
        self.train_mode
    }

    // Neither topology has stochastic or batch-statistics layers, so the flag
    // is tracked but does not alter the forward pass.
    fn set_train_mode(&mut self, on: bool) {
        self.train_mode = on;
    }

    fn forward(&self, images: &ImageBatch) -> Result<Logits> {
        self.check_batch(images)?;
        let k = self.num_classes();
        let rows: Vec<Vec<f64>> = (0..images.len())
            .into_par_iter()
            .map(|i| self.sample_forward(images.image(i)))
            .collect();
        let mut out = Matrix::zeros(images.len(), k);
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r);
        }
        Ok(out)
    }

    fn backward(&self, images: &ImageBatch, dlogits: &Matrix) -> Result<Vec<f64>> {
        self.check_batch(images)?;
        if dlogits.rows() != images.len() || dlogits.cols() != self.num_classes() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} for {} images and {} classes",
                dlogits.rows(),
                dlogits.cols(),
                images.len(),
                self.num_classes()
            )));
        }
        let per_sample: Vec<Option<Vec<f64>>> = (0..images.len())
            .into_par_iter()
            .map(|i| {
                let d = dlogits.row(i);
                if d.iter().all(|&v| v == 0.0) {
                    None
                } else {
                    Some(self.sample_backward(images.image(i), d))
                }
            })
            .collect();
        // Fixed-order reduction keeps the result independent of thread count.
        let mut grad = vec![0.0; self.params.len()];
        for g in per_sample.into_iter().flatten() {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(grad)
    }

    fn architecture_id(&self) -> String {
        self.arch.id()
    }

    fn boxed_clone(&self) -> Box<dyn Classifier> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(shape: ImageShape, n: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..n * shape.len()).map(|_| normal.sample(&mut rng)).collect();
        ImageBatch::new(shape, data).unwrap()
    }

    /// Central differences of `sum(dlogits * forward)` in parameter space.
    fn check_param_grad(net: &Network, images: &ImageBatch, probes: &[usize]) {
        let logits = net.forward(images).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d = Matrix::from_vec(
            logits.rows(),
            logits.cols(),
            (0..logits.rows() * logits.cols()).map(|_| normal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let grad = net.backward(images, &d).unwrap();
        let objective = |n: &Network| -> f64 {
            let l = n.forward(images).unwrap();
            l.as_slice().iter().zip(d.as_slice()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for &p in probes {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params[p] += h;
            minus.params[p] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (numeric - grad[p]).abs() / numeric.abs().max(grad[p].abs()).max(1e-6);
            assert!(err < 1e-5, "param {p}: analytic {} numeric {numeric}", grad[p]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let shape = ImageShape::new(2, 8, 8);
        let arch = Architecture::ConvNet {
            input: shape,
            channels: [3, 4],
            num_classes: 3,
        };
        let net = Network::new(arch.clone(), 7).unwrap();
        let images = random_batch(shape, 3, 1);
        let probes: Vec<usize> = (0..arch.param_count()).step_by(7).collect();
        check_param_grad(&net, &images, &probes);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let shape = ImageShape::new(1, 3, 3);
        let arch = Architecture::Mlp {
            input: shape,
            hidden: 5,
            num_classes: 3,
        };
        let net = Network::new(arch.clone(), 3).unwrap();
        let images = random_batch(shape, 4, 2);
        let probes: Vec<usize> = (0..arch.param_count()).collect();
        check_param_grad(&net, &images, &probes);
    }

    #[test]
    fn param_write_read_is_bit_exact() {
        let arch = Architecture::conv_small(ImageShape::new(1, 16, 16), 3);
        let mut net = Network::new(arch, 0).unwrap();
        let other = Network::new(net.arch.clone(), 1).unwrap();
        net.set_params(other.params()).unwrap();
        assert_eq!(net.params(), other.params());
        assert!(net.set_params(&[0.0; 3]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let shape = ImageShape::new(1, 16, 16);
        let net = Network::new(Architecture::conv_small(shape, 3), 5).unwrap();
        let images = random_batch(shape, 6, 4);
        let a = net.forward(&images).unwrap();
        let b = net.forward(&images).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.rows(), a.cols()), (6, 3));
        assert!(a.is_finite());
    }

    #[test]
    fn default_architecture_stays_small() {
        let arch = Architecture::conv_small(ImageShape::new(1, 16, 16), 3);
        assert!(arch.param_count() <= 200_000);
        let blocks = arch.layout();
        assert_eq!(blocks[0].name, "conv1.weight");
        assert_eq!(blocks.last().unwrap().name, "fc.bias");
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::new(Architecture::conv_small(ImageShape::new(1, 16, 16), 3), 0).unwrap();
        let images = random_batch(ImageShape::new(1, 8, 8), 1, 0);
        assert!(matches!(net.forward(&images), Err(Error::Input(_))));
    }
}
