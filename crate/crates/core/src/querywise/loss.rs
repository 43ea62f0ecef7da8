//! Composite student objective `L = L_l + lambda * L_u`.
//!
//! Labeled part: `(1 - alpha) * CE(adjusted student, victim label)
//! + alpha * tau^2 * KL(anchor || student)` at temperature `tau`.
//!
//! Unlabeled part: `(1 - beta) * KD(teacher) + beta * KD(anchor)`, both
//! restricted to samples where the anchor's plain softmax confidence exceeds
//! `rho`, and both averaged over the samples that pass.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the student logits; nothing flows into anchor or teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy_with_grad, ensure_same_shape, log_softmax_with_temperature, softmax_with_temperature, Logits,
    Matrix, PROB_EPS,
};

/// Argument order of the distillation KL.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdOrder {
    /// `KL(target || student)`, the usual distillation direction.
    #[default]
    TargetFirst,
    /// `KL(student || target)`.
    StudentFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub rho: f64,
    /// EMA momentum of the teacher.
    pub m: f64,
    #[serde(default)]
    pub kd_order: KdOrder,
    pub la_enabled: bool,
    /// Class priors for logit adjustment; filled from labeled-set counts when empty.
    #[serde(default)]
    pub la_priors: Vec<f64>,
    pub la_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.5,
            tau: 1.5,
            lambda: 1.0,
            rho: 0.95,
            m: 0.999,
            kd_order: KdOrder::TargetFirst,
            la_enabled: true,
            la_priors: Vec::new(),
            la_scale: 1.0,
        }
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        in_unit("alpha", self.alpha)?;
        in_unit("beta", self.beta)?;
        in_unit("rho", self.rho)?;
        in_unit("m", self.m)?;
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must exceed 1, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.la_scale >= 0.0) {
            return Err(Error::Config("logit adjustment scale must be nonnegative".into()));
        }
        if self.la_enabled && !self.la_priors.is_empty() {
            check_priors(&self.la_priors)?;
        }
        Ok(())
    }

    /// Priors from class counts with one pseudo-count per class.
    pub fn with_priors_from_counts(mut self, counts: &[usize]) -> Self {
        let total = counts.iter().sum::<usize>() as f64 + counts.len() as f64;
        self.la_priors = counts.iter().map(|&c| (c as f64 + 1.0) / total).collect();
        self
    }
}

fn check_priors(priors: &[f64]) -> Result<()> {
    if priors.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Config(format!(
            "logit adjustment priors must be positive (smooth zero counts first): {priors:?}"
        )));
    }
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("logit adjustment priors sum to {sum}, not 1")));
    }
    Ok(())
}

/// Loss value and gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledLoss {
    pub value: f64,
    pub grad: Matrix,
    pub mask: Vec<bool>,
}

impl UnlabeledLoss {
    pub fn pass_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Adds `scale * ln(prior_k)` to column `k`.
pub fn apply_logit_adjustment(logits: &Logits, priors: &[f64], scale: f64) -> Result<Logits> {
    if priors.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "{} priors for {} classes",
            priors.len(),
            logits.cols()
        )));
    }
    check_priors(priors)?;
    let offsets: Vec<f64> = priors.iter().map(|p| scale * p.ln()).collect();
    let mut out = logits.clone();
    for i in 0..out.rows() {
        for (v, o) in out.row_mut(i).iter_mut().zip(&offsets) {
            *v += o;
        }
    }
    Ok(out)
}

/// True where the anchor's `tau = 1` max softmax probability exceeds `rho`.
pub fn confidence_mask(anchor_logits: &Logits, rho: f64) -> Result<Vec<bool>> {
    let probs = softmax_with_temperature(anchor_logits, 1.0)?;
    Ok(probs
        .iter_rows()
        .map(|r| r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) > rho)
        .collect())
}

/// `tau^2`-scaled distillation KL averaged over rows where `mask` holds
/// (all rows when `mask` is `None`). Zero with zero gradient when no row counts.
pub fn distillation_loss(
    student: &Logits,
    target: &Logits,
    tau: f64,
    order: KdOrder,
    mask: Option<&[bool]>,
) -> Result<LossGrad> {
    ensure_same_shape(student, target)?;
    let (n, k) = (student.rows(), student.cols());
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape(format!("mask of {} for {n} rows", m.len())));
        }
    }
    let count = (0..n).filter(|&i| active(i)).count();
    let mut grad = Matrix::zeros(n, k);
    if count == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let p = softmax_with_temperature(target, tau)?;
    let log_q = log_softmax_with_temperature(student, tau)?;
    let log_eps = PROB_EPS.ln();
    let scale = tau * tau / count as f64;
    let mut total = 0.0;
    for i in (0..n).filter(|&i| active(i)) {
        let (pi, lqi) = (p.row(i), log_q.row(i));
        let g = grad.row_mut(i);
        match order {
            KdOrder::TargetFirst => {
                // sum_k p_k (ln p_k - ln max(q_k, eps))
                let mut kl = 0.0;
                let mut mass = 0.0;
                for c in 0..k {
                    if pi[c] > 0.0 {
                        let lq = lqi[c].max(log_eps);
                        kl += pi[c] * (pi[c].max(PROB_EPS).ln() - lq);
                        if lqi[c] >= log_eps {
                            mass += pi[c];
                        }
                    }
                }
                total += kl;
                for c in 0..k {
                    let unclamped = if lqi[c] >= log_eps { pi[c] } else { 0.0 };
                    g[c] = scale / tau * (lqi[c].exp() * mass - unclamped);
                }
            }
            KdOrder::StudentFirst => {
                // sum_k q_k (ln q_k - ln max(p_k, eps))
                let diff: Vec<f64> = (0..k).map(|c| lqi[c] - pi[c].max(PROB_EPS).ln()).collect();
                let q: Vec<f64> = lqi.iter().map(|l| l.exp()).collect();
                let kl: f64 = q.iter().zip(&diff).map(|(a, b)| a * b).sum();
                total += kl;
                for c in 0..k {
                    g[c] = scale / tau * q[c] * (diff[c] - kl);
                }
            }
        }
    }
    Ok(LossGrad {
        value: total * tau * tau / count as f64,
        grad,
    })
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    Ok(())
}

/// `(1 - alpha) * CE + alpha * KD(anchor)` on a labeled batch. Logit
/// adjustment, when enabled, shifts the student logits inside the CE term only.
pub fn labeled_loss(
    student_logits: &Logits,
    anchor_logits: &Logits,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    ensure_same_shape(student_logits, anchor_logits)?;
    check_labels(labels, student_logits.rows())?;
    let adjusted;
    let ce_input = if cfg.la_enabled && !cfg.la_priors.is_empty() {
        adjusted = apply_logit_adjustment(student_logits, &cfg.la_priors, cfg.la_scale)?;
        &adjusted
    } else {
        student_logits
    };
    let (ce, mut grad) = cross_entropy_with_grad(ce_input, labels)?;
    let kd = distillation_loss(student_logits, anchor_logits, cfg.tau, cfg.kd_order, None)?;
    grad.scale(1.0 - cfg.alpha);
    let mut kd_grad = kd.grad;
    kd_grad.scale(cfg.alpha);
    grad.add_assign(&kd_grad)?;
    Ok(LossGrad {
        value: (1.0 - cfg.alpha) * ce + cfg.alpha * kd.value,
        grad,
    })
}

/// `(1 - beta) * KD(teacher) + beta * KD(anchor)` over confidence-masked samples.
pub fn unlabeled_loss(
    student_logits: &Logits,
    teacher_logits: &Logits,
    anchor_logits: &Logits,
    cfg: &LossConfig,
) -> Result<UnlabeledLoss> {
    cfg.validate()?;
    ensure_same_shape(student_logits, teacher_logits)?;
    ensure_same_shape(student_logits, anchor_logits)?;
    let mask = confidence_mask(anchor_logits, cfg.rho)?;
    let t = distillation_loss(student_logits, teacher_logits, cfg.tau, cfg.kd_order, Some(&mask))?;
    let a = distillation_loss(student_logits, anchor_logits, cfg.tau, cfg.kd_order, Some(&mask))?;
    let mut grad = t.grad;
    grad.scale(1.0 - cfg.beta);
    let mut ga = a.grad;
    ga.scale(cfg.beta);
    grad.add_assign(&ga)?;
    Ok(UnlabeledLoss {
        value: (1.0 - cfg.beta) * t.value + cfg.beta * a.value,
        grad,
        mask,
    })
}

/// Joint objective over one labeled and one unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub labeled: LossGrad,
    pub unlabeled: UnlabeledLoss,
}

impl TotalLoss {
    /// Gradient of the total with respect to the unlabeled student logits.
    pub fn unlabeled_grad(&self, lambda: f64) -> Matrix {
        let mut g = self.unlabeled.grad.clone();
        g.scale(lambda);
        g
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    student_labeled: &Logits,
    anchor_labeled: &Logits,
    labels: &[usize],
    student_unlabeled: &Logits,
    teacher_unlabeled: &Logits,
    anchor_unlabeled: &Logits,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let labeled = labeled_loss(student_labeled, anchor_labeled, labels, cfg)?;
    let unlabeled = unlabeled_loss(student_unlabeled, teacher_unlabeled, anchor_unlabeled, cfg)?;
    Ok(TotalLoss {
        value: labeled.value + cfg.lambda * unlabeled.value,
        labeled,
        unlabeled,
    })
}
