//! Plain supervised minibatch training shared by the victim factory and the
//! anchor stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Augment, ImageBatch};
use crate::error::{Error, Result};
use crate::model::{Classifier, Network};
use crate::numerics::cross_entropy_with_grad;
use crate::optim::{OptimizerSpec, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerSpec::default(),
            augment: Augment::default(),
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Top-1 predictions of `model` on `images`.
pub fn predict(model: &dyn Classifier, images: &ImageBatch) -> Result<Vec<usize>> {
    Ok(model.forward(images)?.argmax_rows())
}

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Cross-entropy training. `on_epoch(epoch, model, mean_train_loss)` runs after
/// every epoch (1-based); a non-finite loss aborts with the epoch index.
pub fn fit(
    model: &mut Network,
    images: &ImageBatch,
    labels: &[usize],
    schedule: &Schedule,
    mut on_epoch: impl FnMut(usize, &Network, f64) -> Result<()>,
) -> Result<()> {
    schedule.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let n = images.len();
    let steps_per_epoch = n.div_ceil(schedule.batch_size);
    let mut opt = Sgd::new(
        schedule.optimizer.clone(),
        model.params().len(),
        steps_per_epoch * schedule.epochs,
    )?;
    let mut order_rng = rng_stream(schedule.seed, 1);
    let mut aug_rng = rng_stream(schedule.seed, 2);
    let mut order: Vec<usize> = (0..n).collect();
    model.set_train_mode(true);
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let batch = schedule.augment.apply(&images.select(chunk), &mut aug_rng);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(&batch)?;
            if !logits.is_finite() {
                return Err(Error::Training {
                    unit: "epoch",
                    index: epoch,
                    reason: "logits became non-finite".into(),
                });
            }
            let (loss, dlogits) = cross_entropy_with_grad(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    unit: "epoch",
                    index: epoch,
                    reason: format!("loss became {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let grad = model.backward(&batch, &dlogits)?;
            opt.step(model.params_mut(), &grad)?;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                unit: "epoch",
                index: epoch,
                reason: "parameters became non-finite".into(),
            });
        }
        model.set_train_mode(false);
        on_epoch(epoch, model, loss_sum / n as f64)?;
        model.set_train_mode(true);
    }
    model.set_train_mode(false);
    Ok(())
}
