use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{labeled_loss, unlabeled_loss, LossConfig};
use crate::data::Augment;
use crate::datapool::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::model::{Classifier, Network};
use crate::numerics::ema_update_in_place;
use crate::optim::{OptimizerSpec, Sgd};
use crate::train::{predict, rng_stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub labeled_batch: usize,
    /// Zero disables the unlabeled branch entirely.
    pub unlabeled_batch: usize,
    pub epochs: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            labeled_batch: 32,
            unlabeled_batch: 32,
            epochs: 100,
        }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_batch == 0 || self.epochs == 0 {
            return Err(Error::Config("labeled batch size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Random,
    FromAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSchedule {
    pub optimizer: OptimizerSpec,
    pub augment: Augment,
    pub init: StudentInit,
    pub seed: u64,
}

impl Default for StudentSchedule {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSpec::default(),
            augment: Augment::default(),
            init: StudentInit::Random,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentEpoch {
    pub epoch: usize,
    #[serde(rename = "L_l")]
    pub labeled_loss: f64,
    #[serde(rename = "L_u")]
    pub unlabeled_loss: f64,
    pub mask_pass_rate: f64,
    pub val_accuracy: Option<f64>,
}

/// Parameters visible after each optimizer step, for inspection in tests.
pub struct StepView<'a> {
    pub step: usize,
    pub epoch: usize,
    pub student: &'a [f64],
    pub teacher_before: &'a [f64],
    pub teacher: &'a [f64],
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
}

#[derive(Debug, Clone)]
pub struct StudentOutcome {
    pub student: Network,
    pub teacher: Network,
    pub trace: Vec<StudentEpoch>,
    pub steps: usize,
}

/// Endless walk over a seeded shuffle of the unlabeled pool. The position
/// survives epoch boundaries; a fresh shuffle starts only once every sample
/// has been drawn.
struct SpilloverCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl SpilloverCursor {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn accuracy(model: &dyn Classifier, set: &LabeledSet) -> Result<f64> {
    let preds = predict(model, &set.images)?;
    let hits = preds.iter().zip(&set.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / set.len() as f64)
}

fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Training {
            unit: "step",
            index: step,
            reason: format!("{what} became {value}"),
        });
    }
    Ok(())
}

/// Stage two. Each step draws a labeled and an unlabeled batch, takes one SGD
/// step on `L_l + lambda * L_u` for the student, then moves the teacher toward
/// the student by EMA. The anchor is never written. Returns the last-epoch
/// student.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    val: Option<&LabeledSet>,
    anchor: &Network,
    cfg: &LossConfig,
    plan: &BatchPlan,
    schedule: &StudentSchedule,
) -> Result<StudentOutcome> {
    train_student_observed(labeled, unlabeled, val, anchor, cfg, plan, schedule, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn train_student_observed(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    val: Option<&LabeledSet>,
    anchor: &Network,
    cfg: &LossConfig,
    plan: &BatchPlan,
    schedule: &StudentSchedule,
    mut observe: impl FnMut(&StepView<'_>),
) -> Result<StudentOutcome> {
    cfg.validate()?;
    plan.validate()?;
    if labeled.is_empty() {
        return Err(Error::Data("student needs a nonempty labeled set".into()));
    }
    if labeled.images.shape() != anchor.input_shape()
        || (!unlabeled.is_empty() && unlabeled.images.shape() != anchor.input_shape())
    {
        return Err(Error::Input("data shape does not match the anchor input".into()));
    }
    let mut cfg = cfg.clone();
    if cfg.la_enabled && cfg.la_priors.is_empty() {
        cfg = cfg.with_priors_from_counts(&labeled.class_counts());
    }

    let arch = anchor.architecture().clone();
    let mut student = match schedule.init {
        StudentInit::Random => Network::new(arch, schedule.seed)?,
        StudentInit::FromAnchor => anchor.clone(),
    };
    let mut teacher = anchor.clone();

    let n = labeled.len();
    let steps_per_epoch = n.div_ceil(plan.labeled_batch);
    let mut opt = Sgd::new(
        schedule.optimizer.clone(),
        student.params().len(),
        steps_per_epoch * plan.epochs,
    )?;
    // Independent streams so that the unlabeled branch never perturbs the
    // labeled trajectory.
    let mut order_rng = rng_stream(schedule.seed, 11);
    let mut aug_l_rng = rng_stream(schedule.seed, 12);
    let mut aug_u_rng = rng_stream(schedule.seed, 13);
    let use_unlabeled = plan.unlabeled_batch > 0 && !unlabeled.is_empty();
    let mut cursor = SpilloverCursor::new(unlabeled.len(), rng_stream(schedule.seed, 14));

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(plan.epochs);
    let mut teacher_before = teacher.params().to_vec();
    let mut step = 0;
    student.set_train_mode(true);
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum_l, mut sum_u, mut passed, mut seen_u) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(plan.labeled_batch) {
            step += 1;
            let xl = schedule.augment.apply(&labeled.images.select(chunk), &mut aug_l_rng);
            let yl: Vec<usize> = chunk.iter().map(|&i| labeled.labels[i]).collect();
            let s_l = student.forward(&xl)?;
            if !s_l.is_finite() {
                return Err(Error::Training {
                    unit: "step",
                    index: step,
                    reason: "student logits became non-finite".into(),
                });
            }
            let a_l = anchor.forward(&xl)?;
            let ll = labeled_loss(&s_l, &a_l, &yl, &cfg)?;
            check_finite(ll.value, step, "labeled loss")?;
            let mut grad = student.backward(&xl, &ll.grad)?;
            sum_l += ll.value;

            let mut lu_value = 0.0;
            if use_unlabeled {
                let idx = cursor.next_batch(plan.unlabeled_batch);
                let xu = schedule.augment.apply(&unlabeled.images.select(&idx), &mut aug_u_rng);
                let s_u = student.forward(&xu)?;
                let t_u = teacher.forward(&xu)?;
                let a_u = anchor.forward(&xu)?;
                let lu = unlabeled_loss(&s_u, &t_u, &a_u, &cfg)?;
                check_finite(lu.value, step, "unlabeled loss")?;
                lu_value = lu.value;
                passed += lu.pass_count();
                seen_u += idx.len();
                sum_u += lu.value;
                if lu.pass_count() > 0 {
                    let mut gu = lu.grad;
                    gu.scale(cfg.lambda);
                    let gu = student.backward(&xu, &gu)?;
                    grad.iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
                }
            }
            check_finite(ll.value + cfg.lambda * lu_value, step, "total loss")?;
            opt.step(student.params_mut(), &grad)?;
            if student.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    unit: "step",
                    index: step,
                    reason: "student parameters became non-finite".into(),
                });
            }

            teacher_before.copy_from_slice(teacher.params());
            ema_update_in_place(teacher.params_mut(), student.params(), cfg.m)?;
            observe(&StepView {
                step,
                epoch,
                student: student.params(),
                teacher_before: &teacher_before,
                teacher: teacher.params(),
                labeled_loss: ll.value,
                unlabeled_loss: lu_value,
            });
        }
        student.set_train_mode(false);
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&student, v)?),
            _ => None,
        };
        student.set_train_mode(true);
        let steps = steps_per_epoch as f64;
        trace.push(StudentEpoch {
            epoch,
            labeled_loss: sum_l / steps,
            unlabeled_loss: sum_u / steps,
            mask_pass_rate: if seen_u > 0 { passed as f64 / seen_u as f64 } else { 0.0 },
            val_accuracy,
        });
        log::debug!("student epoch {epoch}: {:?}", trace.last());
    }
    student.set_train_mode(false);
    Ok(StudentOutcome {
        student,
        teacher,
        trace,
        steps: step,
    })
}

/// JSON-lines `{epoch, L_l, L_u, mask_pass_rate, val_accuracy}`.
pub fn write_student_trace(path: &Path, trace: &[StudentEpoch]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in trace {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
