//! The attacker's proxy pool and the sets carved out of it: the queried
//! labeled set, its train/validation split, and the unlabeled remainder.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::oracle::{QueryRecord, VictimOracle};

/// Seeded permutation of `0..n` (ChaCha8 Fisher-Yates).
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[derive(Debug, Clone)]
pub struct ProxyPool {
    provenance: String,
    ids: Vec<String>,
    images: ImageBatch,
    index: HashMap<String, usize>,
}

impl ProxyPool {
    pub fn new(provenance: impl Into<String>, ids: Vec<String>, images: ImageBatch) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::Shape(format!("{} ids for {} images", ids.len(), images.len())));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate sample id {id}")));
            }
        }
        Ok(Self {
            provenance: provenance.into(),
            ids,
            images,
            index,
        })
    }

    /// Pool with ids `<provenance>-000000`, `<provenance>-000001`, ...
    pub fn with_sequential_ids(provenance: impl Into<String>, images: ImageBatch) -> Result<Self> {
        let provenance = provenance.into();
        let ids = (0..images.len()).map(|i| format!("{provenance}-{i:06}")).collect();
        Self::new(provenance, ids, images)
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn image_shape(&self) -> ImageShape {
        self.images.shape()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Images paired with the victim's hard labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenation, preserving order.
    pub fn extend(&mut self, other: &LabeledSet) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Consistency("class count mismatch".into()));
        }
        for i in 0..other.len() {
            self.images.push(other.images.image(i))?;
        }
        self.ids.extend(other.ids.iter().cloned());
        self.labels.extend(&other.labels);
        Ok(())
    }

    pub fn empty(shape: ImageShape, num_classes: usize) -> Self {
        Self {
            ids: Vec::new(),
            images: ImageBatch::empty(shape),
            labels: Vec::new(),
            num_classes,
        }
    }

    /// Rebuilds a labeled set from pool ids and their recorded labels.
    pub fn from_pool(pool: &ProxyPool, ids: &[String], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Shape(format!("{} ids, {} labels", ids.len(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        let idx = ids
            .iter()
            .map(|id| {
                pool.position(id)
                    .ok_or_else(|| Error::Consistency(format!("{id} is not in pool {}", pool.provenance())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: ids.to_vec(),
            images: pool.images().select(&idx),
            labels,
            num_classes,
        })
    }

    /// Checks every label against the oracle's query log.
    pub fn verify_provenance(&self, log: &[QueryRecord]) -> Result<()> {
        let logged: HashMap<&str, usize> = log.iter().map(|r| (r.sample_id.as_str(), r.hard_label)).collect();
        for (id, &label) in self.ids.iter().zip(&self.labels) {
            match logged.get(id.as_str()) {
                Some(&l) if l == label => {}
                Some(&l) => {
                    return Err(Error::Consistency(format!("{id} labeled {label}, log says {l}")))
                }
                None => return Err(Error::Consistency(format!("{id} never appears in the query log"))),
            }
        }
        Ok(())
    }
}

/// Pool samples that were never queried.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    pub ids: Vec<String>,
    pub images: ImageBatch,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Queries the victim on the selected pool positions.
pub fn build_labeled_set(pool: &ProxyPool, indices: &[usize], oracle: &VictimOracle) -> Result<LabeledSet> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= pool.len() {
            return Err(Error::Selection(format!("index {i} outside pool of {}", pool.len())));
        }
        if !seen.insert(i) {
            return Err(Error::Selection(format!("index {i} selected twice")));
        }
    }
    let ids: Vec<String> = indices.iter().map(|&i| pool.ids[i].clone()).collect();
    let images = pool.images.select(indices);
    let labels = oracle.query(&ids, &images)?;
    let set = LabeledSet {
        ids,
        images,
        labels,
        num_classes: oracle.num_classes(),
    };
    log::info!(
        "queried {} samples; per-class counts {:?}",
        set.len(),
        set.class_counts()
    );
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn val_size(&self, n: usize) -> usize {
        ((self.val_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }
}

/// Seeded, unstratified split. Both halves keep the labeled set's order.
pub fn split_train_val(labeled: &LabeledSet, spec: &SplitSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let n = labeled.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split a labeled set of {n}")));
    }
    let n_val = spec.val_size(n);
    let mut is_val = vec![false; n];
    for &i in &seeded_permutation(n, spec.seed)[..n_val] {
        is_val[i] = true;
    }
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_val[i]);
    Ok((labeled.subset(&train_idx), labeled.subset(&val_idx)))
}

/// `pool \ labeled` by sample id, in pool order.
pub fn unlabeled_remainder(pool: &ProxyPool, labeled: &LabeledSet) -> Result<UnlabeledSet> {
    let mut taken = vec![false; pool.len()];
    for id in &labeled.ids {
        let pos = pool
            .position(id)
            .ok_or_else(|| Error::Consistency(format!("{id} is not in pool {}", pool.provenance())))?;
        taken[pos] = true;
    }
    let idx: Vec<usize> = (0..pool.len()).filter(|&i| !taken[i]).collect();
    Ok(UnlabeledSet {
        ids: idx.iter().map(|&i| pool.ids[i].clone()).collect(),
        images: pool.images.select(&idx),
    })
}

/// Persisted train/validation split. Images are referenced by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub pool_provenance: String,
    pub seed: u64,
    pub val_fraction: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl SplitManifest {
    pub fn new(pool: &ProxyPool, spec: &SplitSpec, train: &LabeledSet, val: &LabeledSet) -> Self {
        Self {
            pool_provenance: pool.provenance().to_string(),
            seed: spec.seed,
            val_fraction: spec.val_fraction,
            train_ids: train.ids.clone(),
            val_ids: val.ids.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Network};

    fn pool(n: usize) -> ProxyPool {
        let shape = ImageShape::new(1, 4, 4);
        let data = (0..n * 16).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        ProxyPool::with_sequential_ids("toy", ImageBatch::new(shape, data).unwrap()).unwrap()
    }

    fn oracle(limit: usize) -> VictimOracle {
        let arch = Architecture::Mlp {
            input: ImageShape::new(1, 4, 4),
            hidden: 4,
            num_classes: 3,
        };
        VictimOracle::new(Box::new(Network::new(arch, 1).unwrap()), limit)
    }

    #[test]
    fn builds_labeled_set_and_charges_budget() {
        let p = pool(100);
        let o = oracle(5000);
        let idx: Vec<usize> = (0..10).map(|i| i * 7).collect();
        let set = build_labeled_set(&p, &idx, &o).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(o.budget().used(), 10);
        set.verify_provenance(&o.log()).unwrap();
    }

    #[test]
    fn duplicate_indices_rejected() {
        let p = pool(10);
        let o = oracle(10);
        assert!(matches!(build_labeled_set(&p, &[3, 3], &o), Err(Error::Selection(_))));
        assert_eq!(o.budget().used(), 0);
    }

    #[test]
    fn over_budget_selection_is_rejected_whole() {
        let p = pool(5001);
        let o = oracle(5000);
        let idx: Vec<usize> = (0..5001).collect();
        assert!(matches!(build_labeled_set(&p, &idx, &o), Err(Error::BudgetExhausted { .. })));
        assert_eq!(o.budget().used(), 0);
        assert!(o.log().is_empty());
    }

    fn fake_labeled(n: usize) -> LabeledSet {
        let p = pool(n);
        LabeledSet::from_pool(&p, p.ids(), (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_train_val(&fake_labeled(5000), &SplitSpec::default()).unwrap();
        assert_eq!((t.len(), v.len()), (4500, 500));
        let (t, v) = split_train_val(&fake_labeled(10), &SplitSpec::default()).unwrap();
        assert_eq!((t.len(), v.len()), (9, 1));
        assert!(matches!(split_train_val(&fake_labeled(1), &SplitSpec::default()), Err(Error::Data(_))));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let l = fake_labeled(200);
        let spec = SplitSpec { val_fraction: 0.25, seed: 9 };
        let (t1, v1) = split_train_val(&l, &spec).unwrap();
        let (t2, v2) = split_train_val(&l, &spec).unwrap();
        assert_eq!((t1.ids.clone(), v1.ids.clone()), (t2.ids, v2.ids));
        let all: HashSet<_> = t1.ids.iter().chain(&v1.ids).collect();
        assert_eq!(all.len(), 200);
        let (_, v3) = split_train_val(&l, &SplitSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(v1.ids, v3.ids);
    }

    #[test]
    fn remainder_is_the_complement() {
        let p = pool(50);
        let l = LabeledSet::from_pool(&p, &p.ids()[..20], vec![0; 20], 3).unwrap();
        assert_eq!(unlabeled_remainder(&p, &l).unwrap().len(), 30);
        let all = LabeledSet::from_pool(&p, p.ids(), vec![0; 50], 3).unwrap();
        assert!(unlabeled_remainder(&p, &all).unwrap().is_empty());
        let none = LabeledSet::empty(p.image_shape(), 3);
        assert_eq!(unlabeled_remainder(&p, &none).unwrap().len(), 50);
    }

    #[test]
    fn foreign_ids_are_inconsistent() {
        let p = pool(5);
        let mut l = LabeledSet::from_pool(&p, &p.ids()[..1], vec![0], 3).unwrap();
        l.ids[0] = "elsewhere-1".into();
        assert!(matches!(unlabeled_remainder(&p, &l), Err(Error::Consistency(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(30);
        let l = LabeledSet::from_pool(&p, p.ids(), vec![1; 30], 3).unwrap();
        let spec = SplitSpec { val_fraction: 0.1, seed: 4 };
        let (t, v) = split_train_val(&l, &spec).unwrap();
        let m = SplitManifest::new(&p, &spec, &t, &v);
        let path = dir.path().join("split.json");
        m.save(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), m);
    }
}
