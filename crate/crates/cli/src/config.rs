use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segkit::dataset::{SuffixTable, DEFAULT_TRAIN_FRACTION};
use segkit::detect::DetectParams;
use segkit::unet::{ModelConfig, TrainPlan};

use crate::error::{Classify, CliError, CliResult};

/// Complete run configuration. Every field has a default, so a partial JSON
/// document is accepted and `config init` prints the full set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub suffixes: SuffixTable,
    pub detect: DetectParams,
    /// Voxels added around the detected tumor box on every face.
    pub crop_margin: usize,
    pub target_size: [usize; 3],
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// Drives the split, weight init and shuffling; overrides the nested seeds.
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            suffixes: SuffixTable::default(),
            detect: DetectParams::default(),
            crop_margin: 4,
            target_size: [128, 128, 128],
            train_fraction: DEFAULT_TRAIN_FRACTION,
            model: ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            plan: TrainPlan {
                seed,
                ..TrainPlan::default()
            },
            seed,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            fs::read_to_string(path).or_usage(format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).or_usage(format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.plan.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.detect.validate().or_usage("detect parameters")?;
        self.model.validate().or_usage("model parameters")?;
        self.plan.validate().or_usage("training plan")?;
        self.model
            .check_input_dims(self.target_size)
            .or_usage("target_size does not fit the model depth")?;
        if self.model.in_channels != segkit::volume::NUM_MODALITIES {
            return Err(CliError::usage(format!(
                "model.in_channels must be {}",
                segkit::volume::NUM_MODALITIES
            )));
        }
        if self.model.num_classes != segkit::volume::NUM_CLASSES {
            return Err(CliError::usage(format!(
                "model.num_classes must be {}",
                segkit::volume::NUM_CLASSES
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::usage(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if self.threads == 0 {
            return Err(CliError::usage("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.output_dir.join("preprocessed")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.output_dir.join("model.aunc")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "threads": 2}"#).unwrap();
        assert_eq!(cfg.threads, 2);
        assert_eq!(cfg.target_size, [128, 128, 128]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(5);
        assert_eq!((cfg.model.seed, cfg.plan.seed), (5, 5));
    }

    #[test]
    fn indivisible_target_is_rejected() {
        let cfg = RunConfig {
            target_size: [100, 128, 128],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
