//! Which proxy samples to spend budget on: uniform random selection, and
//! greedy k-Center over the current anchor's softmax outputs, run in cycles.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datapool::{build_labeled_set, LabeledSet, ProxyPool};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::{softmax_with_temperature, Matrix};
use crate::oracle::VictimOracle;
use crate::train::rng_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    KCenter,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::KCenter => "k-center",
        })
    }
}

/// `n` pool positions outside `excluded`, drawn uniformly from a ChaCha8
/// stream seeded with `seed`.
pub fn select_random(pool_size: usize, excluded: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    let excluded: HashSet<usize> = excluded.iter().copied().collect();
    let mut candidates: Vec<usize> = (0..pool_size).filter(|i| !excluded.contains(i)).collect();
    if n > candidates.len() {
        return Err(Error::Selection(format!(
            "asked for {n} samples, only {} unselected remain",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng_stream(seed, 0));
    candidates.truncate(n);
    Ok(candidates)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy farthest-point selection. Each pick maximizes the distance to the
/// nearest already-selected point; ties go to the lowest index. Returns the
/// `k` new indices in pick order.
pub fn select_kcenter(embeddings: &Matrix, selected: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if k == 0 {
        return Ok(Vec::new());
    }
    if selected.is_empty() {
        return Err(Error::Precondition("k-Center needs at least one selected point".into()));
    }
    if let Some(&i) = selected.iter().find(|&&i| i >= n) {
        return Err(Error::Selection(format!("selected index {i} outside {n} points")));
    }
    let mut taken = vec![false; n];
    for &i in selected {
        taken[i] = true;
    }
    let free = taken.iter().filter(|t| !**t).count();
    if k > free {
        return Err(Error::Selection(format!("asked for {k} centers, only {free} unselected points")));
    }

    let mut min_dist = vec![f64::INFINITY; n];
    let relax = |min_dist: &mut [f64], center: usize| {
        let c = embeddings.row(center);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let di = euclidean(embeddings.row(i), c);
            if di < *d {
                *d = di;
            }
        }
    };
    for &s in selected {
        relax(&mut min_dist, s);
    }
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("free points remain");
        taken[b] = true;
        picks.push(b);
        relax(&mut min_dist, b);
    }
    Ok(picks)
}

/// Per-cycle sizes; the first `total % cycles` cycles get one extra sample.
pub fn cycle_sizes(total: usize, cycles: usize) -> Result<Vec<usize>> {
    if cycles == 0 {
        return Err(Error::Config("at least one selection cycle is required".into()));
    }
    let (base, extra) = (total / cycles, total % cycles);
    Ok((0..cycles).map(|c| base + usize::from(c < extra)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub strategy: Strategy,
    pub total_budget: usize,
    pub num_cycles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionState {
    pub selected: Vec<usize>,
    pub cycle_index: usize,
    pub per_cycle_budget: Vec<usize>,
}

/// Replayable record of which samples each cycle queried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub strategy: Strategy,
    pub seed: u64,
    pub num_cycles: usize,
    pub total_budget: usize,
    pub generator: String,
    pub cycles: Vec<Vec<String>>,
}

impl SelectionManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct CycleOutcome<C> {
    pub labeled: LabeledSet,
    pub anchor: C,
    pub state: SelectionState,
    pub manifest: SelectionManifest,
}

/// Runs `num_cycles` rounds of select, query, retrain. `train(labeled, cycle)`
/// fits a fresh anchor on everything queried so far; its softmax outputs over
/// the pool drive the next k-Center round.
pub fn run_cycles<C: Classifier>(
    cfg: &CycleConfig,
    pool: &ProxyPool,
    oracle: &VictimOracle,
    mut train: impl FnMut(&LabeledSet, usize) -> Result<C>,
) -> Result<CycleOutcome<C>> {
    let sizes = cycle_sizes(cfg.total_budget, cfg.num_cycles)?;
    let remaining = oracle.remaining_budget();
    if cfg.total_budget == 0 || cfg.total_budget > remaining {
        return Err(Error::BudgetExhausted {
            requested: cfg.total_budget,
            remaining,
        });
    }
    if cfg.total_budget > pool.len() {
        return Err(Error::Selection(format!(
            "budget {} exceeds pool of {}",
            cfg.total_budget,
            pool.len()
        )));
    }

    let mut state = SelectionState {
        selected: Vec::new(),
        cycle_index: 0,
        per_cycle_budget: sizes.clone(),
    };
    let mut labeled = LabeledSet::empty(pool.image_shape(), oracle.num_classes());
    let mut anchor: Option<C> = None;
    let mut cycles = Vec::with_capacity(sizes.len());
    for (cycle, &size) in sizes.iter().enumerate() {
        state.cycle_index = cycle;
        let picks = match (cfg.strategy, &anchor) {
            (Strategy::KCenter, Some(model)) if size > 0 => {
                let probs = softmax_with_temperature(&model.forward(pool.images())?, 1.0)?;
                select_kcenter(&probs, &state.selected, size)?
            }
            _ => select_random(pool.len(), &state.selected, size, cfg.seed.wrapping_add(cycle as u64))?,
        };
        let fresh = build_labeled_set(pool, &picks, oracle)?;
        labeled.extend(&fresh)?;
        cycles.push(fresh.ids.clone());
        state.selected.extend(&picks);
        log::info!(
            "{} cycle {}/{}: {} new, {} labeled",
            cfg.strategy,
            cycle + 1,
            sizes.len(),
            picks.len(),
            labeled.len()
        );
        anchor = Some(train(&labeled, cycle)?);
    }
    let manifest = SelectionManifest {
        strategy: cfg.strategy,
        seed: cfg.seed,
        num_cycles: cfg.num_cycles,
        total_budget: cfg.total_budget,
        generator: "rand_chacha::ChaCha8Rng stream 0, seed + cycle".into(),
        cycles,
    };
    Ok(CycleOutcome {
        labeled,
        anchor: anchor.expect("at least one cycle"),
        state,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kcenter_examples() {
        let e = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [10.0, 10.0]]);
        assert_eq!(select_kcenter(&e, &[0], 1).unwrap(), vec![3]);
        // (1,0) and (0,1) tie at distance 1; the lower index wins.
        assert_eq!(select_kcenter(&e, &[0], 2).unwrap(), vec![3, 1]);
        assert!(select_kcenter(&e, &[0], 0).unwrap().is_empty());
        assert!(matches!(select_kcenter(&e, &[], 1), Err(Error::Precondition(_))));
        assert!(matches!(select_kcenter(&e, &[0], 4), Err(Error::Selection(_))));
    }

    #[test]
    fn random_selection_properties() {
        let a = select_random(10, &[], 3, 5).unwrap();
        let set: HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 3);
        assert_eq!(a, select_random(10, &[], 3, 5).unwrap());
        let mut all = select_random(10, &[], 10, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let rest = select_random(10, &[0, 1, 2], 7, 2).unwrap();
        assert!(rest.iter().all(|&i| i > 2));
        assert!(matches!(select_random(10, &[0], 10, 0), Err(Error::Selection(_))));
    }

    #[test]
    fn cycle_budget_split() {
        assert_eq!(cycle_sizes(5000, 5).unwrap(), vec![1000; 5]);
        assert_eq!(cycle_sizes(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(cycle_sizes(10, 3).unwrap().iter().sum::<usize>(), 10);
        assert!(cycle_sizes(10, 0).is_err());
    }
}
