use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DerivedSeeds, ExperimentConfig};
use crate::anchor::{train_anchor, write_anchor_trace, AnchorOutcome};
use crate::datapool::{split_train_val, unlabeled_remainder, LabeledSet, ProxyPool, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, render_table, report_victim_baseline, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Classifier, Network};
use crate::oracle::{read_query_log, train_victim, LogicalClock, SystemClock, VictimOracle};
use crate::querywise::{train_student, write_student_trace, BatchPlan, LossConfig, StudentSchedule};
use crate::selection::{run_cycles, CycleConfig, SelectionManifest};
use crate::synth::NUM_SHAPE_CLASSES;
use crate::train::predict;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Victim,
    Steal,
    Distill,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Victim, Stage::Steal, Stage::Distill, Stage::Eval];

    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Victim => 3,
            Stage::Steal => 4,
            Stage::Distill => 5,
            Stage::Eval => 6,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Victim => "victim",
            Stage::Steal => "steal",
            Stage::Distill => "distill",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{}: {source}", stage.map_or_else(|| "setup".to_string(), |s| format!("stage {s}")))]
pub struct StageFailure {
    /// `None` when the run failed before any stage started.
    pub stage: Option<Stage>,
    #[source]
    pub source: Error,
}

impl StageFailure {
    fn setup(source: Error) -> Self {
        Self { stage: None, source }
    }

    pub fn exit_code(&self) -> i32 {
        match (&self.source, self.stage) {
            (Error::Config(_), _) => 2,
            (Error::Resume(_), _) => 8,
            (_, Some(stage)) => stage.exit_code(),
            (_, None) => 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Reuse stages already completed in `out_dir` under the same config hash.
    pub resume: bool,
    /// Single worker thread and a logical query clock.
    pub deterministic: bool,
}

/// `manifest.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub name: String,
    pub method: String,
    pub config_hash: String,
    pub seeds: DerivedSeeds,
    pub positive_class: usize,
    pub deterministic: bool,
    pub stages_completed: Vec<Stage>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn fresh(cfg: &ExperimentConfig, deterministic: bool) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            name: cfg.name.clone(),
            method: cfg.method(),
            config_hash: cfg.hash()?,
            seeds: cfg.seeds(),
            positive_class: cfg.eval.positive_class,
            deterministic,
            stages_completed: Vec::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages_completed.contains(&stage)
    }

    fn complete(&mut self, stage: Stage, artifacts: &[(&str, &str)]) {
        if !self.is_complete(stage) {
            self.stages_completed.push(stage);
        }
        for (k, v) in artifacts {
            self.artifacts.insert((*k).to_string(), (*v).to_string());
        }
    }
}

/// Metrics written by the eval stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReports {
    pub victim: MetricsReport,
    pub anchor: MetricsReport,
    /// The final thief: the student, or the anchor when distillation is off.
    pub thief: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub reports: Option<EvalReports>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs every stage up to and including `until`. Stages already recorded in
/// the run manifest are skipped when resuming; a manifest written under a
/// different config hash refuses to resume.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    until: Stage,
) -> std::result::Result<RunSummary, StageFailure> {
    cfg.validate().map_err(StageFailure::setup)?;
    if opts.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| StageFailure::setup(Error::Config(e.to_string())))?;
        pool.install(|| run_inner(cfg, opts, until))
    } else {
        run_inner(cfg, opts, until)
    }
}

fn run_inner(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    until: Stage,
) -> std::result::Result<RunSummary, StageFailure> {
    let dir = opts.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| StageFailure::setup(Error::io(dir, e)))?;
    let mut manifest = prepare_manifest(cfg, opts).map_err(StageFailure::setup)?;
    manifest.save(dir).map_err(StageFailure::setup)?;

    let mut reports = None;
    for stage in Stage::ALL.into_iter().filter(|&s| s <= until) {
        if stage == Stage::Distill && !cfg.student.enabled {
            continue;
        }
        if manifest.is_complete(stage) {
            log::info!("stage {stage}: already complete, skipping");
            if stage == Stage::Eval {
                reports = load_reports(dir).ok();
            }
            continue;
        }
        log::info!("stage {stage}: starting");
        let fail = |source| StageFailure {
            stage: Some(stage),
            source,
        };
        match stage {
            Stage::Victim => stage_victim(cfg, dir, &mut manifest).map_err(fail)?,
            Stage::Steal => stage_steal(cfg, opts, dir, &mut manifest).map_err(fail)?,
            Stage::Distill => stage_distill(cfg, dir, &mut manifest).map_err(fail)?,
            Stage::Eval => reports = Some(stage_eval(cfg, dir, &mut manifest).map_err(fail)?),
        }
        manifest.save(dir).map_err(fail)?;
        log::info!("stage {stage}: done");
    }
    Ok(RunSummary {
        out_dir: dir.to_path_buf(),
        manifest,
        reports,
    })
}

fn prepare_manifest(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let fresh = RunManifest::fresh(cfg, opts.deterministic)?;
    let path = opts.out_dir.join(MANIFEST_FILE);
    if !opts.resume || !path.exists() {
        return Ok(fresh);
    }
    let existing = RunManifest::load(&opts.out_dir)?;
    if existing.schema_version != SCHEMA_VERSION {
        return Err(Error::Resume(format!(
            "manifest schema {} is not {SCHEMA_VERSION}",
            existing.schema_version
        )));
    }
    if existing.config_hash != fresh.config_hash {
        return Err(Error::Resume(format!(
            "config hash {} differs from the run directory's {}",
            fresh.config_hash, existing.config_hash
        )));
    }
    Ok(existing)
}

fn victim_stem(dir: &Path) -> PathBuf {
    dir.join("victim").join("victim")
}

fn anchor_stem(dir: &Path) -> PathBuf {
    dir.join("anchor").join("anchor")
}

fn student_stem(dir: &Path) -> PathBuf {
    dir.join("student").join("student")
}

fn teacher_stem(dir: &Path) -> PathBuf {
    dir.join("student").join("teacher")
}

fn stage_victim(cfg: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let hash = manifest.config_hash.clone();
    let (model, meta) = match &cfg.victim.checkpoint {
        Some(stem) => {
            let (net, meta) = load_checkpoint(stem)?;
            if net.architecture() != &cfg.victim_arch() {
                return Err(Error::Config(format!(
                    "victim checkpoint {} is {}, config expects {}",
                    stem.display(),
                    net.architecture_id(),
                    cfg.victim_arch().id()
                )));
            }
            (net, meta)
        }
        None => {
            let (images, labels) = cfg.victim.domain.sample_labeled(cfg.victim.train_size, cfg.victim.seed)?;
            let mut schedule = cfg.victim.schedule.clone();
            schedule.train.seed = schedule.train.seed.wrapping_add(cfg.victim.seed);
            let trained = train_victim(&images, &labels, &cfg.victim_arch(), &schedule)?;
            (trained.model, trained.meta)
        }
    };
    log::info!(
        "victim {}: held-out {} = {:.4}",
        meta.architecture_id,
        meta.validation_metric_name,
        meta.validation_metric
    );
    let meta = CheckpointMeta {
        config_hash: hash,
        ..meta
    };
    save_checkpoint(&victim_stem(dir), &model, meta)?;
    manifest.complete(
        Stage::Victim,
        &[("victim_checkpoint", "victim/victim.bin"), ("victim_meta", "victim/victim.json")],
    );
    Ok(())
}

fn load_victim(dir: &Path) -> Result<Network> {
    load_checkpoint(&victim_stem(dir)).map(|(net, _)| net)
}

/// The attacker's pool, regenerated from the config on every stage.
fn proxy_pool(cfg: &ExperimentConfig) -> Result<ProxyPool> {
    let seed = cfg.seeds().proxy_pool;
    let (images, _) = cfg.proxy.domain.sample(cfg.proxy.pool_size, seed)?;
    ProxyPool::with_sequential_ids(format!("{}-{seed}", cfg.proxy.domain.name), images)
}

fn stage_steal(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let seeds = cfg.seeds();
    let victim = load_victim(dir)?;
    let pool = proxy_pool(cfg)?;
    let mut oracle = VictimOracle::new(Box::new(victim), cfg.budget);
    oracle = if opts.deterministic {
        oracle.with_clock(Box::new(LogicalClock::default()))
    } else {
        oracle.with_clock(Box::new(SystemClock))
    };

    let cycle_cfg = CycleConfig {
        strategy: cfg.selection.strategy,
        total_budget: cfg.budget,
        num_cycles: cfg.selection.num_cycles,
        seed: seeds.selection,
    };
    let split = crate::datapool::SplitSpec {
        seed: cfg.split.seed.wrapping_add(seeds.split),
        ..cfg.split
    };
    let mut schedule = cfg.anchor.schedule.clone();
    schedule.seed = schedule.seed.wrapping_add(seeds.anchor);
    let arch = cfg.anchor_arch();
    let mut last: Option<(AnchorOutcome, SplitManifest)> = None;
    let outcome = run_cycles(&cycle_cfg, &pool, &oracle, |labeled, cycle| {
        let (train, val) = split_train_val(labeled, &split)?;
        let out = train_anchor(&train, &val, &arch, &schedule)?;
        log::info!(
            "anchor after cycle {}: best epoch {}, val macro-F1 {:.4}",
            cycle + 1,
            out.best_epoch,
            out.best_val_f1
        );
        let model = out.model.clone();
        last = Some((out, SplitManifest::new(&pool, &split, &train, &val)));
        Ok(model)
    })?;
    let (anchor, split_manifest) = last.expect("at least one cycle");

    oracle.write_log(&dir.join("query_log.jsonl"))?;
    outcome.manifest.save(&dir.join("selection.json"))?;
    split_manifest.save(&dir.join("split.json"))?;
    write_anchor_trace(&dir.join("anchor_trace.jsonl"), &anchor.trace)?;
    let meta = CheckpointMeta::new(
        &anchor.model,
        anchor.best_epoch,
        "val_macro_f1",
        anchor.best_val_f1,
        &manifest.config_hash,
    );
    save_checkpoint(&anchor_stem(dir), &anchor.model, meta)?;
    manifest.complete(
        Stage::Steal,
        &[
            ("query_log", "query_log.jsonl"),
            ("selection", "selection.json"),
            ("split", "split.json"),
            ("anchor_trace", "anchor_trace.jsonl"),
            ("anchor_checkpoint", "anchor/anchor.bin"),
            ("anchor_meta", "anchor/anchor.json"),
        ],
    );
    Ok(())
}

/// Rebuilds the labeled train and validation sets from the persisted query
/// log and split.
fn load_labeled(dir: &Path, pool: &ProxyPool) -> Result<(LabeledSet, LabeledSet, LabeledSet)> {
    let log = read_query_log(&dir.join("query_log.jsonl"))?;
    let selection = SelectionManifest::load(&dir.join("selection.json"))?;
    let split = SplitManifest::load(&dir.join("split.json"))?;
    if split.pool_provenance != pool.provenance() {
        return Err(Error::Consistency(format!(
            "split was drawn from pool {}, current pool is {}",
            split.pool_provenance,
            pool.provenance()
        )));
    }
    let labels: HashMap<&str, usize> = log.iter().map(|r| (r.sample_id.as_str(), r.hard_label)).collect();
    let build = |ids: &[String]| -> Result<LabeledSet> {
        let ys = ids
            .iter()
            .map(|id| {
                labels
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Consistency(format!("{id} never appears in the query log")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::from_pool(pool, ids, ys, NUM_SHAPE_CLASSES)
    };
    let all_ids: Vec<String> = selection.cycles.concat();
    let all = build(&all_ids)?;
    all.verify_provenance(&log)?;
    Ok((all, build(&split.train_ids)?, build(&split.val_ids)?))
}

/// Record of what the student was trained on and with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub loss: LossConfig,
    pub batch: BatchPlan,
    pub schedule: StudentSchedule,
    pub labeled_train: usize,
    pub labeled_val: usize,
    pub unlabeled: usize,
    pub steps: usize,
    pub anchor_sha256: String,
    pub final_val_accuracy: Option<f64>,
}

fn stage_distill(cfg: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let pool = proxy_pool(cfg)?;
    let (all, train, val) = load_labeled(dir, &pool)?;
    let unlabeled = unlabeled_remainder(&pool, &all)?;
    let (anchor, anchor_meta) = load_checkpoint(&anchor_stem(dir))?;
    let mut schedule = cfg.student.schedule.clone();
    schedule.seed = schedule.seed.wrapping_add(cfg.seeds().student);
    let out = train_student(
        &train,
        &unlabeled,
        Some(&val),
        &anchor,
        &cfg.student.loss,
        &cfg.student.batch,
        &schedule,
    )?;
    let final_val = out.trace.last().and_then(|e| e.val_accuracy);
    write_student_trace(&dir.join("student_trace.jsonl"), &out.trace)?;
    let epochs = cfg.student.batch.epochs;
    let hash = manifest.config_hash.clone();
    let metric = final_val.unwrap_or(0.0);
    save_checkpoint(
        &student_stem(dir),
        &out.student,
        CheckpointMeta::new(&out.student, epochs, "val_accuracy", metric, &hash),
    )?;
    save_checkpoint(
        &teacher_stem(dir),
        &out.teacher,
        CheckpointMeta::new(&out.teacher, epochs, "none", 0.0, &hash),
    )?;
    let tm = TrainingManifest {
        loss: cfg.student.loss.clone(),
        batch: cfg.student.batch,
        schedule,
        labeled_train: train.len(),
        labeled_val: val.len(),
        unlabeled: unlabeled.len(),
        steps: out.steps,
        anchor_sha256: anchor_meta.params_sha256,
        final_val_accuracy: final_val,
    };
    write_json(&dir.join("training_manifest.json"), &tm)?;
    manifest.complete(
        Stage::Distill,
        &[
            ("student_trace", "student_trace.jsonl"),
            ("student_checkpoint", "student/student.bin"),
            ("student_meta", "student/student.json"),
            ("teacher_checkpoint", "student/teacher.bin"),
            ("training_manifest", "training_manifest.json"),
        ],
    );
    Ok(())
}

fn stage_eval(cfg: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<EvalReports> {
    let pos = cfg.eval.positive_class;
    let k = NUM_SHAPE_CLASSES;
    let (images, truth) = cfg.victim.domain.sample_labeled(cfg.victim.test_size, cfg.seeds().test_set)?;
    let victim = load_victim(dir)?;
    let (anchor, _) = load_checkpoint(&anchor_stem(dir))?;
    let victim_preds = predict(&victim, &images)?;
    let anchor_preds = predict(&anchor, &images)?;
    let victim_report = report_victim_baseline(&victim_preds, &truth, pos, k)?;
    let anchor_report = compute_metrics(&anchor_preds, &victim_preds, &truth, pos, k)?;
    let thief_report = if cfg.student.enabled {
        let (student, _) = load_checkpoint(&student_stem(dir))?;
        compute_metrics(&predict(&student, &images)?, &victim_preds, &truth, pos, k)?
    } else {
        anchor_report.clone()
    };

    write_json(&dir.join("victim_metrics.json"), &victim_report)?;
    write_json(&dir.join("anchor_metrics.json"), &anchor_report)?;
    write_json(&dir.join(METRICS_FILE), &thief_report)?;
    let anchor_label = format!("{} (anchor)", cfg.method().trim_end_matches("+QW"));
    let mut rows = vec![("Victim".to_string(), &victim_report), (anchor_label, &anchor_report)];
    if cfg.student.enabled {
        rows.push((cfg.method(), &thief_report));
    }
    let table = render_table(&rows);
    fs::write(dir.join("report.txt"), &table).map_err(|e| Error::io(dir.join("report.txt"), e))?;
    log::info!("results:\n{table}");
    manifest.complete(
        Stage::Eval,
        &[
            ("metrics", METRICS_FILE),
            ("anchor_metrics", "anchor_metrics.json"),
            ("victim_metrics", "victim_metrics.json"),
            ("report", "report.txt"),
        ],
    );
    Ok(EvalReports {
        victim: victim_report,
        anchor: anchor_report,
        thief: thief_report,
    })
}

fn load_reports(dir: &Path) -> Result<EvalReports> {
    Ok(EvalReports {
        victim: read_json(&dir.join("victim_metrics.json"))?,
        anchor: read_json(&dir.join("anchor_metrics.json"))?,
        thief: read_json(&dir.join(METRICS_FILE))?,
    })
}
