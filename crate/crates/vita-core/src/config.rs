//! Experiment configuration: a strict JSON schema covering dataset source,
//! translator and robust-training settings, and output layout. Unknown keys
//! are rejected and every error names the offending path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_cifar_binary, Dataset, SyntheticSpec};
use crate::error::{Result, VitaError};
use crate::rng::derive_seed;
use crate::training::gan::GanConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DatasetConfig {
    /// CIFAR-style binary records: 1 label byte + 3072 pixel bytes.
    CifarBinary {
        path: PathBuf,
        test_path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Procedurally generated motifs with a separability certificate.
    Synthetic {
        classes: usize,
        n_train: usize,
        n_test: usize,
        extent: usize,
        noise: f32,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic { classes: 3, n_train: 600, n_test: 300, extent: 32, noise: 0.05 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::CifarBinary { limit, test_limit, .. } => {
                for (name, l) in [("dataset.limit", limit), ("dataset.test_limit", test_limit)] {
                    if let Some(0) = l {
                        return Err(VitaError::Config(format!("{name}: must be >= 1")));
                    }
                }
                Ok(())
            }
            DatasetConfig::Synthetic { classes, n_train, n_test, extent, noise } => {
                if !(2..=4).contains(classes) {
                    return Err(VitaError::Config(format!(
                        "dataset.classes: synthetic data supports 2-4 classes, got {classes}"
                    )));
                }
                if ![16, 32].contains(extent) {
                    return Err(VitaError::Config(format!(
                        "dataset.extent: must be 16 or 32, got {extent}"
                    )));
                }
                for (name, n) in [("dataset.n_train", *n_train), ("dataset.n_test", *n_test)] {
                    if n == 0 || n % classes != 0 {
                        return Err(VitaError::Config(format!(
                            "{name}: must be a positive multiple of classes ({classes}), got {n}"
                        )));
                    }
                }
                if !(0.0..=0.5).contains(noise) {
                    return Err(VitaError::Config(format!(
                        "dataset.noise: must be in [0, 0.5], got {noise}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Materialize the train and test splits. Synthetic splits draw from
    /// disjoint seed streams of the experiment seed.
    pub fn materialize(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match self {
            DatasetConfig::CifarBinary { path, test_path, limit, test_limit } => {
                let train = load_cifar_binary(path, *limit)?;
                let test = load_cifar_binary(test_path, *test_limit)?;
                Ok((train, test))
            }
            DatasetConfig::Synthetic { classes, n_train, n_test, extent, noise } => {
                let mk = |n: usize, label: &str| {
                    let spec = SyntheticSpec {
                        num_classes: *classes,
                        per_class: n / classes,
                        extent: *extent,
                        noise: *noise,
                    };
                    generate_synthetic(&spec, derive_seed(seed, label))
                };
                Ok((mk(*n_train, "data/train")?, mk(*n_test, "data/test")?))
            }
        }
    }

    pub fn num_classes_hint(&self) -> Option<usize> {
        match self {
            DatasetConfig::CifarBinary { .. } => None,
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    /// Translator GAN training epochs.
    pub gan_epochs: usize,
    /// Epochs of plain ERM pretraining for the attack-source model used
    /// while harvesting translator batches.
    pub pretrain_epochs: usize,
    /// Translator channels at full resolution; doubled per stage.
    pub translator_base: usize,
    /// Translator down/up stages. Spatial extents must divide by 2^depth.
    pub translator_depth: usize,
    pub classifier_width: usize,
    /// Severity table JSON; the built-in calibrated table when absent.
    pub severity_table: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            gan: GanConfig::default(),
            gan_epochs: 5,
            pretrain_epochs: 3,
            translator_base: 32,
            translator_depth: 3,
            classifier_width: 16,
            severity_table: None,
            out_dir: PathBuf::from("vita-out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate().map_err(prefix_path("train"))?;
        self.gan.validate().map_err(prefix_path("gan"))?;
        if self.translator_base == 0 {
            return Err(VitaError::Config("translator_base: must be >= 1".into()));
        }
        if !(1..=4).contains(&self.translator_depth) {
            return Err(VitaError::Config(format!(
                "translator_depth: must be in 1..=4, got {}",
                self.translator_depth
            )));
        }
        if let DatasetConfig::Synthetic { extent, .. } = self.dataset {
            let m = 1usize << self.translator_depth;
            if extent % m != 0 {
                return Err(VitaError::Config(format!(
                    "translator_depth: extent {extent} is not divisible by 2^depth = {m}"
                )));
            }
        }
        if self.classifier_width == 0 {
            return Err(VitaError::Config("classifier_width: must be >= 1".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(VitaError::Config("out_dir: must not be empty".into()));
        }
        Ok(())
    }
}

fn prefix_path(path: &'static str) -> impl Fn(VitaError) -> VitaError {
    move |e| match e {
        VitaError::Config(msg) => VitaError::Config(format!("{path}: {msg}")),
        other => other,
    }
}

/// Parse a config document. Empty input means all defaults. Unknown keys,
/// type mismatches, and constraint violations all fail with the JSON path
/// that caused them.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let trimmed = text.trim();
    let effective = if trimmed.is_empty() { "{}" } else { trimmed };
    let mut de = serde_json::Deserializer::from_str(effective);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            VitaError::Config(format!("config: {inner}"))
        } else {
            VitaError::Config(format!("config at {path}: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| VitaError::Config(format!("config file {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|err| match err {
        VitaError::Config(msg) => VitaError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Canonical JSON used for hashing and the manifest echo.
pub fn canonical_json(cfg: &ExperimentConfig) -> Result<String> {
    serde_json::to_string_pretty(cfg)
        .map_err(|e| VitaError::Config(format!("config serialization: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainMode;

    #[test]
    fn empty_document_yields_all_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        // The echo serializes every field, so no default stays silent.
        let echo = canonical_json(&cfg).unwrap();
        for key in ["lambda", "beta", "epsilon2", "fractions", "seed", "eps_train"] {
            assert!(echo.contains(key), "echo missing {key}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = parse_config_str(r#"{"train": {"betaa": 1.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train"), "message should name the path: {msg}");
        let err = parse_config_str(r#"{"frobnicate": 1}"#).unwrap_err();
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn type_mismatch_names_the_field() {
        let err = parse_config_str(r#"{"train": {"epochs": "ten"}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epochs"), "got: {msg}");
    }

    #[test]
    fn bad_fractions_rejected_by_constraint() {
        let err =
            parse_config_str(r#"{"train": {"fractions": [0.3, 0.3, 0.5]}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sum to 1"), "got: {msg}");
    }

    #[test]
    fn golden_config_parses_to_golden_struct() {
        let text = r#"{
            "dataset": {"source": "synthetic", "classes": 2, "n_train": 64,
                        "n_test": 32, "extent": 16, "noise": 0.05},
            "train": {"mode": "adversarial", "beta": 6.0, "epochs": 4,
                      "batch_size": 16, "lr": 0.01, "seed": 7},
            "gan_epochs": 2,
            "seed": 7,
            "out_dir": "scratch/run7"
        }"#;
        let cfg = parse_config_str(text).unwrap();
        let expected = ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                classes: 2,
                n_train: 64,
                n_test: 32,
                extent: 16,
                noise: 0.05,
            },
            train: TrainConfig {
                mode: TrainMode::Adversarial,
                beta: 6.0,
                epochs: 4,
                batch_size: 16,
                lr: 0.01,
                seed: 7,
                ..TrainConfig::default()
            },
            gan_epochs: 2,
            seed: 7,
            out_dir: PathBuf::from("scratch/run7"),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg, expected);
        assert_eq!(format!("{cfg:?}"), format!("{expected:?}"));
    }

    #[test]
    fn synthetic_constraints_enforced() {
        let bad = r#"{"dataset": {"source": "synthetic", "classes": 5, "n_train": 100,
                      "n_test": 50, "extent": 32, "noise": 0.05}}"#;
        assert!(parse_config_str(bad).unwrap_err().to_string().contains("classes"));
        let bad = r#"{"dataset": {"source": "synthetic", "classes": 3, "n_train": 100,
                      "n_test": 51, "extent": 32, "noise": 0.05}}"#;
        assert!(parse_config_str(bad).unwrap_err().to_string().contains("n_train"));
        let bad = r#"{"dataset": {"source": "synthetic", "classes": 3, "n_train": 99,
                      "n_test": 51, "extent": 24, "noise": 0.05}}"#;
        assert!(parse_config_str(bad).unwrap_err().to_string().contains("extent"));
    }

    #[test]
    fn synthetic_materialization_is_deterministic_and_balanced() {
        let ds = DatasetConfig::Synthetic {
            classes: 3,
            n_train: 36,
            n_test: 12,
            extent: 16,
            noise: 0.05,
        };
        let (tr1, te1) = ds.materialize(9).unwrap();
        let (tr2, _) = ds.materialize(9).unwrap();
        assert_eq!(tr1.images.to_vec(), tr2.images.to_vec());
        assert_eq!(tr1.len(), 36);
        assert_eq!(te1.len(), 12);
        let mut hist = [0usize; 3];
        for &y in &tr1.labels {
            hist[y] += 1;
        }
        assert!(hist.iter().all(|&c| c == 12), "balanced split: {hist:?}");
        // Train and test draws differ.
        assert_ne!(tr1.slice(0, 12).images.to_vec(), te1.images.to_vec());
    }
}
