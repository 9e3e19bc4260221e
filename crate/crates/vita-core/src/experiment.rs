//! End-to-end experiment orchestration: materialize data, generate the
//! corruption suite, pretrain an attack-source classifier, train the
//! translator GAN, robust-train, evaluate the 75-cell grid, and emit the
//! report. Every stage is digest-checked so reruns skip finished work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackSpec, NormKind};
use crate::config::{canonical_json, ExperimentConfig};
use crate::corruptions::severity::SeverityTable;
use crate::corruptions::suite;
use crate::data::Dataset;
use crate::error::{Result, VitaError};
use crate::metrics::{self, NormalizationConstants, ReportContext};
use crate::networks::{Classifier, PatchGan, UNet};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::training::{self, gan};

pub const MANIFEST_VERSION: u32 = 1;

/// Fixed policy identifiers echoed into the manifest so no default stays
/// implicit.
pub const ATTACK_POLICY: &str = "uniform-appendix-menu-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    GenSuite,
    Pretrain,
    TrainTranslator,
    TrainRobust,
    Evaluate,
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Data,
        Stage::GenSuite,
        Stage::Pretrain,
        Stage::TrainTranslator,
        Stage::TrainRobust,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::GenSuite => "gen-suite",
            Stage::Pretrain => "pretrain",
            Stage::TrainTranslator => "train-translator",
            Stage::TrainRobust => "train-robust",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub status: String,
    /// Artifact paths relative to the experiment root, with content digests.
    pub artifacts: BTreeMap<String, String>,
    /// Digest over the sorted artifact digests.
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub attack_policy: String,
    pub severity_table_version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Option<Manifest>> {
        let path = Manifest::path(root);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| VitaError::Data(format!("manifest at {}: {e}", path.display())))?;
        Ok(Some(m))
    }

    fn save(&self, root: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| VitaError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(Manifest::path(root), json)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        VitaError::Io(std::io::Error::other(format!("digest of {}: {e}", path.display())))
    })?;
    Ok(sha256_hex(&bytes))
}

/// Digest every file under `paths` (files directly, directories
/// recursively), keyed by root-relative path.
fn digest_artifacts(root: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = paths.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in std::fs::read_dir(&p)? {
                stack.push(entry?.path());
            }
        } else {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, digest_file(&p)?);
        }
    }
    Ok(out)
}

fn combined_digest(artifacts: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (path, digest) in artifacts {
        h.update(path.as_bytes());
        h.update(b"=");
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcomes: Vec<(Stage, StageOutcome)>,
    pub out_dir: PathBuf,
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn train_dir(&self) -> PathBuf {
        self.root.join("data/train")
    }
    fn test_dir(&self) -> PathBuf {
        self.root.join("data/test")
    }
    fn suite_dir(&self) -> PathBuf {
        self.root.join("suite")
    }
    fn pretrain_ckpt(&self) -> PathBuf {
        self.root.join("pretrain/model.ckpt")
    }
    fn gan_dir(&self) -> PathBuf {
        self.root.join("translator")
    }
    fn robust_dir(&self) -> PathBuf {
        self.root.join("robust")
    }
    fn table_path(&self) -> PathBuf {
        self.root.join("eval/error_table.json")
    }
    fn attack_report_path(&self) -> PathBuf {
        self.root.join("eval/attack_report.json")
    }
    fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// True when the recorded stage artifacts all exist with unchanged digests.
fn stage_is_current(manifest: &Manifest, stage: Stage, root: &Path) -> bool {
    let Some(rec) = manifest.stages.get(stage.name()) else {
        return false;
    };
    if rec.status != "complete" {
        return false;
    }
    rec.artifacts.iter().all(|(rel, digest)| {
        let path = root.join(rel);
        path.is_file() && digest_file(&path).map(|d| d == *digest).unwrap_or(false)
    })
}

fn severity_table_for(config: &ExperimentConfig) -> Result<SeverityTable> {
    match &config.severity_table {
        Some(path) => SeverityTable::load(path),
        None => Ok(SeverityTable::default()),
    }
}

/// Run the full pipeline. Stages whose recorded artifacts are intact under
/// an identical config are skipped; anything else reruns and overwrites.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    run_until(config, Stage::Report)
}

/// Run the pipeline prefix ending at `last` (inclusive). Later stages are
/// left untouched.
pub fn run_until(config: &ExperimentConfig, last: Stage) -> Result<RunSummary> {
    config.validate()?;
    let root = config.out_dir.clone();
    std::fs::create_dir_all(&root)?;
    let layout = Layout { root: root.clone() };
    let config_hash = sha256_hex(canonical_json(config)?.as_bytes());
    let table = severity_table_for(config)?;

    let mut manifest = match Manifest::load(&root)? {
        Some(m) if m.config_hash == config_hash => m,
        _ => Manifest {
            version: MANIFEST_VERSION,
            config_hash: config_hash.clone(),
            config: config.clone(),
            seed: config.seed,
            attack_policy: ATTACK_POLICY.into(),
            severity_table_version: table.version,
            stages: BTreeMap::new(),
        },
    };

    let mut outcomes = Vec::new();
    for stage in Stage::ORDER {
        if stage > last {
            break;
        }
        if stage_is_current(&manifest, stage, &root) {
            outcomes.push((stage, StageOutcome::Skipped));
            continue;
        }
        let produced = run_stage(stage, config, &layout, &table);
        match produced {
            Ok(paths) => {
                let artifacts = digest_artifacts(&root, &paths)?;
                let digest = combined_digest(&artifacts);
                manifest.stages.insert(
                    stage.name().to_string(),
                    StageRecord { status: "complete".into(), artifacts, digest },
                );
                manifest.save(&root)?;
                outcomes.push((stage, StageOutcome::Ran));
            }
            Err(e) => {
                manifest.stages.insert(
                    stage.name().to_string(),
                    StageRecord {
                        status: format!("failed: {e}"),
                        artifacts: BTreeMap::new(),
                        digest: String::new(),
                    },
                );
                manifest.save(&root)?;
                return Err(e);
            }
        }
    }
    Ok(RunSummary { outcomes, out_dir: root })
}

fn run_stage(
    stage: Stage,
    config: &ExperimentConfig,
    layout: &Layout,
    table: &SeverityTable,
) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Data => {
            let (train, test) = config.dataset.materialize(config.seed)?;
            train.save(&layout.train_dir())?;
            test.save(&layout.test_dir())?;
            Ok(vec![layout.train_dir(), layout.test_dir()])
        }
        Stage::GenSuite => {
            let test = Dataset::load(&layout.test_dir())?;
            suite::generate_suite(&test, table, derive_seed(config.seed, "suite"), &layout.suite_dir())?;
            Ok(vec![layout.suite_dir()])
        }
        Stage::Pretrain => {
            let train = Dataset::load(&layout.train_dir())?;
            let mut model = Classifier::new(
                config.classifier_width,
                train.num_classes,
                &mut rng_from_seed(derive_seed(config.seed, "pretrain/init")),
            );
            let cfg = training::TrainConfig {
                epochs: config.pretrain_epochs,
                batch_size: config.train.batch_size,
                lr: config.train.lr,
                momentum: config.train.momentum,
                seed: derive_seed(config.seed, "pretrain"),
                ..training::TrainConfig::default()
            };
            training::erm_train(&mut model, &train, &cfg)?;
            std::fs::create_dir_all(layout.pretrain_ckpt().parent().unwrap())?;
            model.save(&layout.pretrain_ckpt(), "")?;
            Ok(vec![layout.pretrain_ckpt()])
        }
        Stage::TrainTranslator => {
            let train = Dataset::load(&layout.train_dir())?;
            let attack_model = Classifier::load(&layout.pretrain_ckpt())?;
            let gan_seed = derive_seed(config.seed, "gan");
            let mut t = UNet::new(
                config.translator_base,
                config.translator_depth,
                &mut rng_from_seed(derive_seed(gan_seed, "translator/init")),
            );
            let mut d = PatchGan::new(
                config.translator_base,
                &mut rng_from_seed(derive_seed(gan_seed, "discriminator/init")),
            );
            let cfg = gan::GanConfig { seed: gan_seed, ..config.gan };
            let source = gan::HarvestSource { dataset: &train, attack_model: &attack_model };
            gan::train_translator(
                &mut t,
                &mut d,
                &source,
                &cfg,
                config.gan_epochs,
                Some(&layout.gan_dir()),
            )?;
            Ok(vec![layout.gan_dir()])
        }
        Stage::TrainRobust => {
            let train = Dataset::load(&layout.train_dir())?;
            let test = Dataset::load(&layout.test_dir())?;
            let translator = UNet::load(&layout.gan_dir().join("translator.ckpt"))?;
            let mut model = Classifier::new(
                config.classifier_width,
                train.num_classes,
                &mut rng_from_seed(derive_seed(config.seed, "robust/init")),
            );
            let cfg = training::TrainConfig {
                seed: derive_seed(config.seed, "robust"),
                ..config.train
            };
            training::robust_train(
                &mut model,
                &train,
                &test,
                Some(&translator),
                &cfg,
                Some(&layout.robust_dir()),
            )?;
            Ok(vec![layout.robust_dir()])
        }
        Stage::Evaluate => {
            let model = Classifier::load(&layout.robust_dir().join("model.ckpt"))?;
            let table = metrics::evaluate_error_table(&model, &layout.suite_dir())?;
            std::fs::create_dir_all(layout.table_path().parent().unwrap())?;
            let json = serde_json::to_string_pretty(&table)
                .map_err(|e| VitaError::Data(format!("error table serialization: {e}")))?;
            std::fs::write(layout.table_path(), json)?;
            Ok(vec![layout.table_path()])
        }
        Stage::Report => {
            let text = std::fs::read_to_string(layout.table_path())?;
            let error_table: metrics::ErrorTable = serde_json::from_str(&text)
                .map_err(|e| VitaError::Data(format!("error table parse: {e}")))?;
            let context = ReportContext {
                lambda: config.train.transfer.lambda,
                beta: config.train.beta,
                seed: config.seed,
                severity_table_version: table.version,
                normalization: "alexnet-severity-mean".into(),
            };
            let report =
                metrics::build_report(&error_table, &NormalizationConstants::default(), &context)?;
            metrics::emit_report(&report, &layout.report_dir())?;
            Ok(vec![layout.report_dir()])
        }
    }
}

pub const ATTACK_REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttackRow {
    pub attack: String,
    pub norm: String,
    pub eps: f32,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttackReport {
    pub version: u32,
    pub seed: u64,
    pub clean_error: f64,
    pub rows: Vec<AttackRow>,
}

/// Evaluate the robust checkpoint against the whole attack menu on the test
/// set. L-inf budgets are overridden by `train.eps_test`; L2 attacks keep
/// their own defaults since the radii are not comparable. Writes
/// `eval/attack_report.json` under the experiment root and returns the
/// report.
pub fn run_attack_eval(config: &ExperimentConfig) -> Result<AttackReport> {
    config.validate()?;
    let layout = Layout { root: config.out_dir.clone() };
    let model = Classifier::load(&layout.robust_dir().join("model.ckpt"))?;
    let test = Dataset::load(&layout.test_dir())?;
    let clean_error = metrics::error_rate(&model, &test)?;
    let eval_seed = derive_seed(config.seed, "attack-eval");

    let mut rows = Vec::new();
    for mut spec in AttackSpec::menu() {
        if spec.norm() == NormKind::Linf {
            spec.eps = config.train.eps_test;
        }
        let mut wrong = 0usize;
        let mut start = 0usize;
        let mut chunk_idx = 0u64;
        while start < test.len() {
            let len = (test.len() - start).min(64);
            let part = test.slice(start, len);
            let adv = run_attack(
                &model,
                &part.images,
                &part.labels,
                &spec,
                derive_seed_indexed(eval_seed, spec.method.name(), chunk_idx),
            )?;
            let preds = model.predict(&adv)?;
            wrong += preds.iter().zip(part.labels.iter()).filter(|(p, l)| p != l).count();
            start += len;
            chunk_idx += 1;
        }
        rows.push(AttackRow {
            attack: spec.method.name().into(),
            norm: match spec.norm() {
                NormKind::Linf => "linf".into(),
                NormKind::L2 => "l2".into(),
            },
            eps: spec.eps,
            error: wrong as f64 / test.len() as f64,
        });
    }

    let report = AttackReport {
        version: ATTACK_REPORT_VERSION,
        seed: config.seed,
        clean_error,
        rows,
    };
    let path = layout.attack_report_path();
    std::fs::create_dir_all(path.parent().unwrap())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| VitaError::Data(format!("attack report serialization: {e}")))?;
    std::fs::write(&path, json)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use crate::training::TrainConfig;

    fn tiny_config(root: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                classes: 2,
                n_train: 32,
                n_test: 16,
                extent: 16,
                noise: 0.05,
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                lr: 0.05,
                ..TrainConfig::default()
            },
            gan: gan::GanConfig { batch_size: 8, ..gan::GanConfig::default() },
            gan_epochs: 1,
            pretrain_epochs: 1,
            translator_base: 4,
            classifier_width: 8,
            severity_table: None,
            out_dir: root.to_path_buf(),
            seed: 3,
        }
    }

    #[test]
    fn pipeline_runs_then_skips_then_regenerates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        let first = run_experiment(&cfg).unwrap();
        assert!(first.outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
        let report_path = cfg.out_dir.join("report/report.json");
        let report_bytes = std::fs::read(&report_path).unwrap();

        // Identical rerun: every stage digest matches, all skipped.
        let second = run_experiment(&cfg).unwrap();
        assert!(
            second.outcomes.iter().all(|(_, o)| *o == StageOutcome::Skipped),
            "rerun outcomes: {:?}",
            second.outcomes
        );

        // Deleting the report forces just that stage to rerun, and the
        // regenerated bytes are identical.
        std::fs::remove_file(&report_path).unwrap();
        let third = run_experiment(&cfg).unwrap();
        let ran: Vec<_> = third
            .outcomes
            .iter()
            .filter(|(_, o)| *o == StageOutcome::Ran)
            .map(|(s, _)| *s)
            .collect();
        assert_eq!(ran, vec![Stage::Report]);
        assert_eq!(std::fs::read(&report_path).unwrap(), report_bytes);

        let manifest = Manifest::load(&cfg.out_dir).unwrap().unwrap();
        assert_eq!(manifest.stages.len(), 7);
        assert!(manifest.stages.values().all(|r| r.status == "complete"));
        assert_eq!(manifest.attack_policy, ATTACK_POLICY);
    }

    #[test]
    fn config_change_invalidates_downstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        run_experiment(&cfg).unwrap();
        let changed = ExperimentConfig { seed: 4, ..cfg.clone() };
        let rerun = run_experiment(&changed).unwrap();
        assert!(
            rerun.outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran),
            "new seed must rerun everything: {:?}",
            rerun.outcomes
        );
        let manifest = Manifest::load(&changed.out_dir).unwrap().unwrap();
        assert_eq!(manifest.seed, 4);
    }

    #[test]
    fn digest_helpers_are_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), "1".to_string());
        a.insert("y".to_string(), "2".to_string());
        let d1 = combined_digest(&a);
        let mut b = BTreeMap::new();
        b.insert("y".to_string(), "2".to_string());
        b.insert("x".to_string(), "1".to_string());
        assert_eq!(d1, combined_digest(&b), "order independence via BTreeMap");
    }
}
