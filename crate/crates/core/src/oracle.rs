//! The black-box victim. Callers submit images and get back top-1 labels only;
//! every answered image is charged against a fixed budget and logged.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{Architecture, CheckpointMeta, Classifier, Network};
use crate::numerics::{softmax_with_temperature, Probs};
use crate::train::{fit, predict, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    limit: usize,
    used: usize,
}

impl QueryBudget {
    pub fn new(limit: usize) -> Self {
        Self { limit, used: 0 }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.used
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub sample_id: String,
    pub hard_label: usize,
    pub budget_remaining: usize,
    pub timestamp: DateTime<Utc>,
}

/// Output-perturbation defense applied to the victim's probabilities before
/// the argmax. Implementations must return valid probability rows.
pub trait DefenseHook: Send + Sync {
    fn perturb(&self, probs: Probs) -> Probs;
}

/// Leaves the victim's output untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityDefense;

impl DefenseHook for IdentityDefense {
    fn perturb(&self, probs: Probs) -> Probs {
        probs
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: starts at the Unix epoch and advances one millisecond
/// per reading, so replayed runs produce identical logs.
#[derive(Debug, Default)]
pub struct LogicalClock {
    ticks: AtomicI64,
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_millis_opt(t).single().expect("in range")
    }
}

struct Ledger {
    budget: QueryBudget,
    log: Vec<QueryRecord>,
}

pub struct VictimOracle {
    victim: Box<dyn Classifier>,
    defense: Box<dyn DefenseHook>,
    clock: Box<dyn Clock>,
    ledger: Mutex<Ledger>,
}

impl std::fmt::Debug for VictimOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VictimOracle")
            .field("budget", &self.budget())
            .finish_non_exhaustive()
    }
}

impl VictimOracle {
    pub fn new(victim: Box<dyn Classifier>, limit: usize) -> Self {
        Self {
            victim,
            defense: Box::new(IdentityDefense),
            clock: Box::new(SystemClock),
            ledger: Mutex::new(Ledger {
                budget: QueryBudget::new(limit),
                log: Vec::new(),
            }),
        }
    }

    pub fn with_defense(mut self, defense: Box<dyn DefenseHook>) -> Self {
        self.defense = defense;
        self
    }

    pub fn with_clock(mut self, clock: Box<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.victim.num_classes()
    }

    /// Hard labels for `images`, one per `sample_ids` entry. The batch is
    /// answered in full or rejected in full.
    pub fn query(&self, sample_ids: &[String], images: &ImageBatch) -> Result<Vec<usize>> {
        if sample_ids.len() != images.len() {
            return Err(Error::Input(format!(
                "{} sample ids for {} images",
                sample_ids.len(),
                images.len()
            )));
        }
        if images.shape() != self.victim.input_shape() {
            return Err(Error::Input(format!(
                "image shape {:?} does not match the victim input {:?}",
                images.shape(),
                self.victim.input_shape()
            )));
        }
        let mut ledger = self.ledger.lock().expect("oracle ledger poisoned");
        let n = images.len();
        if n > ledger.budget.remaining() {
            return Err(Error::BudgetExhausted {
                requested: n,
                remaining: ledger.budget.remaining(),
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let logits = self.victim.forward(images)?;
        let probs = self.defense.perturb(softmax_with_temperature(&logits, 1.0)?);
        if probs.rows() != n || probs.cols() != self.num_classes() {
            return Err(Error::Shape("defense changed the probability matrix shape".into()));
        }
        let labels = probs.argmax_rows();
        for (id, &label) in sample_ids.iter().zip(&labels) {
            ledger.budget.used += 1;
            let record = QueryRecord {
                sample_id: id.clone(),
                hard_label: label,
                budget_remaining: ledger.budget.remaining(),
                timestamp: self.clock.now(),
            };
            ledger.log.push(record);
        }
        Ok(labels)
    }

    pub fn remaining_budget(&self) -> usize {
        self.ledger.lock().expect("oracle ledger poisoned").budget.remaining()
    }

    pub fn budget(&self) -> QueryBudget {
        self.ledger.lock().expect("oracle ledger poisoned").budget
    }

    pub fn log(&self) -> Vec<QueryRecord> {
        self.ledger.lock().expect("oracle ledger poisoned").log.clone()
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_query_log(path, &self.log())
    }
}

/// JSON-lines, one record per line.
pub fn write_query_log(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_query_log(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Re-asks a fresh oracle (same victim) every logged query and checks the
/// answers match. `lookup` maps a sample id back to its image batch of one.
pub fn replay_log(
    oracle: &VictimOracle,
    log: &[QueryRecord],
    mut lookup: impl FnMut(&str) -> Option<ImageBatch>,
) -> Result<()> {
    for (i, r) in log.iter().enumerate() {
        let img = lookup(&r.sample_id)
            .ok_or_else(|| Error::Consistency(format!("unknown sample id {}", r.sample_id)))?;
        let got = oracle.query(std::slice::from_ref(&r.sample_id), &img)?;
        if got[0] != r.hard_label {
            return Err(Error::Consistency(format!(
                "log line {}: {} answered {} on replay, logged {}",
                i + 1,
                r.sample_id,
                got[0],
                r.hard_label
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSchedule {
    #[serde(flatten)]
    pub train: Schedule,
    /// Share of the training set held out to measure the victim's accuracy.
    pub holdout_fraction: f64,
}

impl Default for VictimSchedule {
    fn default() -> Self {
        Self {
            train: Schedule {
                epochs: 20,
                ..Schedule::default()
            },
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub model: Network,
    pub meta: CheckpointMeta,
}

impl TrainedVictim {
    pub fn held_out_accuracy(&self) -> f64 {
        self.meta.validation_metric
    }
}

/// Desk-scale victim factory: trains `arch` on a labeled image set, keeps the
/// epoch with the best held-out accuracy and records it in the metadata.
pub fn train_victim(
    images: &ImageBatch,
    labels: &[usize],
    arch: &Architecture,
    schedule: &VictimSchedule,
) -> Result<TrainedVictim> {
    if images.is_empty() || labels.is_empty() {
        return Err(Error::Data("victim training set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
    }
    let k = arch.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, num_classes: k });
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Data("victim training set has a single class".into()));
    }
    if !(schedule.holdout_fraction > 0.0 && schedule.holdout_fraction < 1.0) {
        return Err(Error::Config("holdout fraction must lie in (0, 1)".into()));
    }

    let n = labels.len();
    let n_hold = ((n as f64 * schedule.holdout_fraction).round() as usize).clamp(1, n - 1);
    let order = crate::datapool::seeded_permutation(n, schedule.train.seed ^ 0x5eed);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train_images = images.select(train_idx);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let hold_images = images.select(hold_idx);
    let hold_labels: Vec<usize> = hold_idx.iter().map(|&i| labels[i]).collect();

    let mut model = Network::new(arch.clone(), schedule.train.seed)?;
    let mut best = (f64::NEG_INFINITY, 0usize, model.params().to_vec());
    fit(&mut model, &train_images, &train_labels, &schedule.train, |epoch, net, _| {
        let preds = predict(net, &hold_images)?;
        let acc = preds.iter().zip(&hold_labels).filter(|(p, t)| p == t).count() as f64
            / hold_labels.len() as f64;
        if acc > best.0 {
            best = (acc, epoch, net.params().to_vec());
        }
        Ok(())
    })?;
    model.set_params(&best.2)?;
    let meta = CheckpointMeta::new(&model, best.1, "held_out_accuracy", best.0, "");
    Ok(TrainedVictim { model, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::numerics::Matrix;

    /// Returns `ln p` rows looked up by the first pixel of each image.
    #[derive(Clone)]
    pub(crate) struct FixedProbs {
        pub rows: Vec<Vec<f64>>,
    }

    impl Classifier for FixedProbs {
        fn num_classes(&self) -> usize {
            self.rows[0].len()
        }
        fn input_shape(&self) -> ImageShape {
            ImageShape::new(1, 1, 1)
        }
        fn params(&self) -> &[f64] {
            &[]
        }
        fn set_params(&mut self, _: &[f64]) -> Result<()> {
            Ok(())
        }
        fn train_mode(&self) -> bool {
            false
        }
        fn set_train_mode(&mut self, _: bool) {}
        fn forward(&self, images: &ImageBatch) -> Result<Matrix> {
            let rows: Vec<Vec<f64>> = images
                .iter()
                .map(|img| self.rows[img[0] as usize].iter().map(|p| p.max(1e-300).ln()).collect())
                .collect();
            Matrix::from_rows(&rows)
        }
        fn backward(&self, _: &ImageBatch, _: &Matrix) -> Result<Vec<f64>> {
            Ok(Vec::new())
        }
        fn architecture_id(&self) -> String {
            "fixed".into()
        }
        fn boxed_clone(&self) -> Box<dyn Classifier> {
            Box::new(self.clone())
        }
    }

    fn oracle(rows: Vec<Vec<f64>>, limit: usize) -> VictimOracle {
        VictimOracle::new(Box::new(FixedProbs { rows }), limit).with_clock(Box::new(LogicalClock::default()))
    }

    fn batch(which: &[usize]) -> (Vec<String>, ImageBatch) {
        let ids = which.iter().enumerate().map(|(i, w)| format!("s{i}-{w}")).collect();
        let data = which.iter().map(|&w| w as f64).collect();
        (ids, ImageBatch::new(ImageShape::new(1, 1, 1), data).unwrap())
    }

    #[test]
    fn answers_argmax_with_low_index_ties() {
        let o = oracle(vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.5, 0.0]], 10);
        let (ids, imgs) = batch(&[0, 1]);
        assert_eq!(o.query(&ids, &imgs).unwrap(), vec![1, 0]);
    }

    #[test]
    fn exhausted_budget_rejects_atomically() {
        let o = oracle(vec![vec![0.9, 0.1]], 3);
        let (ids, imgs) = batch(&[0, 0]);
        o.query(&ids, &imgs).unwrap();
        assert_eq!(o.remaining_budget(), 1);
        let err = o.query(&ids, &imgs).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { requested: 2, remaining: 1 }));
        assert_eq!(o.remaining_budget(), 1);
        assert_eq!(o.log().len(), 2);
    }

    #[test]
    fn full_budget_rejects_everything() {
        let o = oracle(vec![vec![0.9, 0.1]], 5000);
        let (ids, imgs) = batch(&[0; 10]);
        for _ in 0..500 {
            o.query(&ids, &imgs).unwrap();
        }
        assert_eq!(o.remaining_budget(), 0);
        let (ids, imgs) = batch(&[0]);
        assert!(matches!(o.query(&ids, &imgs), Err(Error::BudgetExhausted { .. })));
    }

    #[test]
    fn remaining_budget_arithmetic() {
        let o = oracle(vec![vec![0.9, 0.1]], 5000);
        assert_eq!(o.remaining_budget(), 5000);
        let (ids, imgs) = batch(&vec![0; 4500]);
        o.query(&ids, &imgs).unwrap();
        assert_eq!(o.remaining_budget(), 500);
    }

    #[test]
    fn log_remaining_strictly_decreases() {
        let o = oracle(vec![vec![0.9, 0.1]], 10);
        for _ in 0..3 {
            let (ids, imgs) = batch(&[0, 0, 0]);
            o.query(&ids, &imgs).unwrap();
        }
        let log = o.log();
        assert_eq!(log.len(), 9);
        assert!(log.windows(2).all(|w| w[0].budget_remaining > w[1].budget_remaining));
        assert_eq!(log.last().unwrap().budget_remaining, 1);
    }

    struct Swap;
    impl DefenseHook for Swap {
        fn perturb(&self, mut probs: Probs) -> Probs {
            for i in 0..probs.rows() {
                probs.row_mut(i).reverse();
            }
            probs
        }
    }

    #[test]
    fn defense_acts_before_argmax() {
        let o = oracle(vec![vec![0.2, 0.8]], 10).with_defense(Box::new(Swap));
        let (ids, imgs) = batch(&[0]);
        assert_eq!(o.query(&ids, &imgs).unwrap(), vec![0]);
    }

    #[test]
    fn wrong_shape_is_an_input_error() {
        let o = oracle(vec![vec![0.2, 0.8]], 10);
        let imgs = ImageBatch::new(ImageShape::new(1, 2, 2), vec![0.0; 4]).unwrap();
        assert!(matches!(o.query(&["a".into()], &imgs), Err(Error::Input(_))));
        assert_eq!(o.remaining_budget(), 10);
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let o = oracle(vec![vec![0.2, 0.8], vec![0.7, 0.3]], 10);
        let (ids, imgs) = batch(&[0, 1, 1]);
        o.query(&ids, &imgs).unwrap();
        let path = dir.path().join("q.jsonl");
        o.write_log(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with("{\"sample_id\":"));
        let back = read_query_log(&path).unwrap();
        assert_eq!(back, o.log());

        let fresh = oracle(vec![vec![0.2, 0.8], vec![0.7, 0.3]], 10);
        replay_log(&fresh, &back, |id| {
            let w: usize = id.rsplit('-').next().unwrap().parse().unwrap();
            Some(batch(&[w]).1)
        })
        .unwrap();
    }

    #[test]
    fn victim_factory_rejects_degenerate_sets() {
        let arch = Architecture::Mlp {
            input: ImageShape::new(1, 1, 1),
            hidden: 2,
            num_classes: 2,
        };
        let empty = ImageBatch::empty(ImageShape::new(1, 1, 1));
        assert!(matches!(
            train_victim(&empty, &[], &arch, &VictimSchedule::default()),
            Err(Error::Data(_))
        ));
        let (_, imgs) = batch(&[0, 0, 0]);
        assert!(matches!(
            train_victim(&imgs, &[1, 1, 1], &arch, &VictimSchedule::default()),
            Err(Error::Data(_))
        ));
    }
}
