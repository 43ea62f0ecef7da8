use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::AnchorSchedule;
use crate::data::Augment;
use crate::datapool::SplitSpec;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::optim::OptimizerSpec;
use crate::oracle::VictimSchedule;
use crate::querywise::{BatchPlan, LossConfig, StudentSchedule};
use crate::selection::Strategy;
use crate::synth::{Domain, NUM_SHAPE_CLASSES};
use crate::train::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    pub channels: [usize; 2],
    pub domain: Domain,
    pub train_size: usize,
    pub test_size: usize,
    /// Seeds the victim's data, initialization and the shared test set.
    pub seed: u64,
    pub schedule: VictimSchedule,
    /// Load this checkpoint stem instead of training a victim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySpec {
    /// Shift recipe of the attacker's pool relative to the victim domain.
    pub domain: Domain,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub strategy: Strategy,
    pub num_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub channels: [usize; 2],
    pub schedule: AnchorSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    /// When false the run stops after the anchor, which then is the thief.
    pub enabled: bool,
    pub loss: LossConfig,
    pub batch: BatchPlan,
    pub schedule: StudentSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub positive_class: usize,
}

/// Every knob of one extraction experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Attack seed: drives the proxy pool, selection, split, anchor and student.
    pub seed: u64,
    pub budget: usize,
    pub victim: VictimSpec,
    pub proxy: ProxySpec,
    pub selection: SelectionSpec,
    pub split: SplitSpec,
    pub anchor: AnchorSpec,
    pub student: StudentSpec,
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Seeds derived from the attack seed, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub attack: u64,
    pub victim: u64,
    pub proxy_pool: u64,
    pub selection: u64,
    pub split: u64,
    pub anchor: u64,
    pub student: u64,
    pub test_set: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let augment = Augment::default();
        Self {
            name: "desk".into(),
            seed: 0,
            budget: 1000,
            victim: VictimSpec {
                channels: [8, 16],
                domain: Domain::victim(),
                train_size: 3000,
                test_size: 600,
                seed: 1234,
                schedule: VictimSchedule {
                    train: Schedule {
                        epochs: 20,
                        batch_size: 32,
                        optimizer: OptimizerSpec::default(),
                        augment,
                        seed: 0,
                    },
                    holdout_fraction: 0.2,
                },
                checkpoint: None,
            },
            proxy: ProxySpec {
                domain: Domain::proxy(),
                pool_size: 4000,
            },
            selection: SelectionSpec {
                strategy: Strategy::Random,
                num_cycles: 1,
            },
            split: SplitSpec::default(),
            anchor: AnchorSpec {
                channels: [8, 16],
                schedule: Schedule::default(),
            },
            student: StudentSpec {
                enabled: true,
                loss: LossConfig::default(),
                batch: BatchPlan::default(),
                schedule: StudentSchedule::default(),
            },
            eval: EvalSpec { positive_class: 2 },
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.victim.domain.validate()?;
        self.proxy.domain.validate()?;
        if self.victim.domain.image_size != self.proxy.domain.image_size {
            return Err(Error::Config("victim and proxy image sizes differ".into()));
        }
        self.victim_arch().validate()?;
        self.anchor_arch().validate()?;
        self.victim.schedule.train.validate()?;
        self.anchor.schedule.validate()?;
        self.split.validate()?;
        self.student.loss.validate()?;
        self.student.batch.validate()?;
        self.student.schedule.optimizer.validate()?;
        if self.selection.num_cycles == 0 {
            return Err(Error::Config("at least one selection cycle is required".into()));
        }
        if self.victim.train_size < 2 || self.victim.test_size == 0 {
            return Err(Error::Config("victim train/test sets are too small".into()));
        }
        if self.eval.positive_class >= NUM_SHAPE_CLASSES {
            return Err(Error::Config(format!(
                "positive class {} outside {NUM_SHAPE_CLASSES} classes",
                self.eval.positive_class
            )));
        }
        Ok(())
    }

    pub fn victim_arch(&self) -> Architecture {
        Architecture::ConvNet {
            input: self.victim.domain.shape(),
            channels: self.victim.channels,
            num_classes: NUM_SHAPE_CLASSES,
        }
    }

    pub fn anchor_arch(&self) -> Architecture {
        Architecture::ConvNet {
            input: self.proxy.domain.shape(),
            channels: self.anchor.channels,
            num_classes: NUM_SHAPE_CLASSES,
        }
    }

    /// Canonical form used for hashing: the JSON serialization of the
    /// config without its output directory.
    pub fn canonical(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(serde_json::to_string(&c)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical()?.as_bytes())))
    }

    pub fn seeds(&self) -> DerivedSeeds {
        let s = self.seed;
        let mix = |tag: u64| s.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag);
        DerivedSeeds {
            attack: s,
            victim: self.victim.seed,
            proxy_pool: mix(1),
            selection: mix(2),
            split: mix(3),
            anchor: mix(4),
            student: mix(5),
            test_set: self.victim.seed.wrapping_add(7),
        }
    }

    /// Method label used in comparison tables.
    pub fn method(&self) -> String {
        let base = match self.selection.strategy {
            Strategy::Random => "Random",
            Strategy::KCenter => "k-Center",
        };
        if self.student.enabled {
            format!("{base}+QW")
        } else {
            base.to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let cfg = ExperimentConfig::default();
        let mut moved = cfg.clone();
        moved.output_dir = Some("/tmp/elsewhere".into());
        assert_eq!(cfg.hash().unwrap(), moved.hash().unwrap());
        let mut reseeded = cfg.clone();
        reseeded.seed = 1;
        assert_ne!(cfg.hash().unwrap(), reseeded.hash().unwrap());
    }

    #[test]
    fn paper_hyperparameters_are_the_defaults() {
        let l = ExperimentConfig::default().student.loss;
        assert_eq!((l.alpha, l.beta, l.tau, l.lambda, l.rho, l.m), (0.4, 0.5, 1.5, 1.0, 0.95, 0.999));
        assert_eq!(ExperimentConfig::default().split.val_fraction, 0.1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.positive_class = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.selection.num_cycles = 0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("budget = 'many'").is_err());
    }
}
