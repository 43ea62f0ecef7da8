//! Dense row-major matrices and the numerical primitives every trainer shares:
//! temperature softmax, KL divergence, cross-entropy and the parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_EPS: f64 = 1e-8;

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Unnormalized class scores, one row per sample.
pub type Logits = Matrix;
/// Probability rows, one per sample.
pub type Probs = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks the selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        ensure_same_shape(self, other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Index of the largest entry of every row, ties resolved to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }
}

pub(crate) fn ensure_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Lowest index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_finite(logits: &Matrix) -> Result<()> {
    if !logits.is_finite() {
        return Err(Error::NumericInput("logits contain NaN or infinity".into()));
    }
    Ok(())
}

fn softmax_row_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_softmax_row_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / tau - lse;
    }
}

/// Row-wise `softmax(logits / tau)`, computed with max subtraction.
pub fn softmax_with_temperature(logits: &Logits, tau: f64) -> Result<Probs> {
    check_tau(tau)?;
    check_finite(logits)?;
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        softmax_row_into(logits.row(i), tau, out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise `log softmax(logits / tau)`.
pub fn log_softmax_with_temperature(logits: &Logits, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    check_finite(logits)?;
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        log_softmax_row_into(logits.row(i), tau, out.row_mut(i));
    }
    Ok(out)
}

/// `sum_k p_k ln(p_k / q_k)` with `0 ln(0/q) = 0` and `q` clamped to [`PROB_EPS`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "probability rows of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk.max(PROB_EPS).ln() - qk.max(PROB_EPS).ln()))
        .sum::<f64>();
    // Clamping can push an exact-zero divergence a hair negative.
    Ok(kl.max(0.0))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label { label, num_classes });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(v, _)| v)
}

/// Mean cross-entropy and its gradient with respect to `logits`.
pub fn cross_entropy_with_grad(logits: &Logits, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    check_labels(labels, logits.cols)?;
    check_finite(logits)?;
    let n = logits.rows;
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, logits.cols)));
    }
    let mut grad = Matrix::zeros(n, logits.cols);
    let mut logp = vec![0.0; logits.cols];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        log_softmax_row_into(logits.row(i), 1.0, &mut logp);
        total -= logp[y];
        let g = grad.row_mut(i);
        for (gk, lk) in g.iter_mut().zip(&logp) {
            *gk = lk.exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Pure EMA: `m * theta_t + (1 - m) * theta_s`.
pub fn ema_update(theta_t: &[f64], theta_s: &[f64], m: f64) -> Result<Vec<f64>> {
    let mut out = theta_t.to_vec();
    ema_update_in_place(&mut out, theta_s, m)?;
    Ok(out)
}

/// In-place form of [`ema_update`]. `m = 1` leaves `theta_t` untouched and
/// `m = 0` copies `theta_s`, both bit for bit; every result stays within the
/// closed interval spanned by the old teacher value and the student value.
pub fn ema_update_in_place(theta_t: &mut [f64], theta_s: &[f64], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    if theta_t.len() != theta_s.len() {
        return Err(Error::Shape(format!(
            "parameter vectors of length {} and {}",
            theta_t.len(),
            theta_s.len()
        )));
    }
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        theta_t.copy_from_slice(theta_s);
        return Ok(());
    }
    for (t, &s) in theta_t.iter_mut().zip(theta_s) {
        let (lo, hi) = if *t <= s { (*t, s) } else { (s, *t) };
        // Rounding can land one ulp outside the segment between the two values.
        *t = (m * *t + (1.0 - m) * s).clamp(lo, hi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        for tau in [0.5, 1.0, 7.0] {
            let p = softmax_with_temperature(&m(&[vec![0.0, 0.0, 0.0]]), tau).unwrap();
            for &v in p.row(0) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_temperature_two() {
        let p = softmax_with_temperature(&m(&[vec![2.0, 0.0]]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_with_temperature(&m(&[vec![1000.0, 0.0]]), 1.0).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let l = m(&[vec![1.0, 2.0]]);
        assert!(matches!(softmax_with_temperature(&l, 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_with_temperature(&l, -1.0), Err(Error::Config(_))));
        let bad = m(&[vec![f64::NAN, 0.0]]);
        assert!(matches!(
            softmax_with_temperature(&bad, 1.0),
            Err(Error::NumericInput(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3), summed by hand.
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.14384).abs() < 1e-5);
        let got = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(kl_divergence(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_with_zero_target_mass_is_finite() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 5.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy(&m(&[vec![0.0, 0.0]]), &[0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&m(&[vec![40.0, -40.0]]), &[0]).unwrap();
        assert!(v < 1e-30);
        let v = cross_entropy(&m(&[vec![40.0, -40.0]]), &[1]).unwrap();
        assert!((v - 80.0).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&m(&[vec![0.0, 0.0]]), &[2]),
            Err(Error::Label { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn ema_examples() {
        let t = [1.0, -2.0, 3.5];
        let s = [0.0, 4.0, -1.0];
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t.to_vec());
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s.to_vec());
        assert!((ema_update(&[1.0], &[0.0], 0.999).unwrap()[0] - 0.999).abs() < 1e-15);
        assert!(matches!(ema_update(&t, &s, 1.5), Err(Error::Config(_))));
        assert!(matches!(ema_update(&t, &s[..2], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
    }
}
