//! Stage one: supervised anchor training on the queried labels only, keeping
//! the epoch with the best validation macro-F1.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapool::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics::macro_f1;
use crate::model::{Architecture, Classifier, Network};
use crate::train::{fit, predict, Schedule};

pub type AnchorSchedule = Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct AnchorOutcome {
    pub model: Network,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub trace: Vec<AnchorEpoch>,
    pub warnings: Vec<String>,
}

/// Macro-F1 of `model` on `val` against the victim's labels.
pub fn evaluate_f1(model: &dyn Classifier, val: &LabeledSet) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let preds = predict(model, &val.images)?;
    macro_f1(&val.labels, &preds, model.num_classes())
}

/// Trains a fresh `arch` network on `train` and returns the checkpoint with the
/// highest validation macro-F1 (earliest epoch on ties).
pub fn train_anchor(
    train: &LabeledSet,
    val: &LabeledSet,
    arch: &Architecture,
    schedule: &AnchorSchedule,
) -> Result<AnchorOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "anchor needs nonempty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let k = arch.num_classes();
    for set in [train, val] {
        if let Some(&label) = set.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, num_classes: k });
        }
    }
    let mut warnings = Vec::new();
    let observed = train.class_counts().iter().filter(|&&c| c > 0).count();
    if observed < 2 {
        let w = format!("anchor training labels cover a single class ({:?})", train.class_counts());
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut model = Network::new(arch.clone(), schedule.seed)?;
    let mut trace = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    fit(&mut model, &train.images, &train.labels, schedule, |epoch, net, train_loss| {
        let val_f1 = evaluate_f1(net, val)?;
        trace.push(AnchorEpoch {
            epoch,
            train_loss,
            val_f1,
        });
        if best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f) {
            best = Some((val_f1, epoch, net.params().to_vec()));
        }
        Ok(())
    })?;
    let (best_val_f1, best_epoch, params) = best.expect("at least one epoch");
    model.set_params(&params)?;
    Ok(AnchorOutcome {
        model,
        best_epoch,
        best_val_f1,
        trace,
        warnings,
    })
}

/// JSON-lines trace, one `{epoch, train_loss, val_f1}` per line.
pub fn write_anchor_trace(path: &Path, trace: &[AnchorEpoch]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in trace {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
