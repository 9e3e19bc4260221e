//! Materializes the full corruption suite on disk: every kind at every
//! severity, stored as ordinary dataset containers next to the severity
//! table and a manifest describing what was generated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruptions::severity::SeverityTable;
use crate::corruptions::{corrupt_batch, CorruptionKind, SEVERITIES};
use crate::data::Dataset;
use crate::error::{Result, VitaError};

pub const SUITE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct SuiteManifest {
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub kinds: Vec<String>,
    pub severities: usize,
}

/// Directory holding one corrupted variant.
pub fn variant_dir(root: &Path, kind: CorruptionKind, severity: usize) -> PathBuf {
    root.join(kind.name()).join(format!("severity_{severity}"))
}

/// Generate all 15 kinds at severities 1..=5 plus a clean copy. Layout:
///
/// ```text
/// root/
///   manifest.json
///   severity_table.json
///   clean/                 dataset container
///   gaussian_noise/severity_1/ .. severity_5/
///   ...
/// ```
pub fn generate_suite(
    ds: &Dataset,
    table: &SeverityTable,
    seed: u64,
    root: &Path,
) -> Result<SuiteManifest> {
    table.validate()?;
    std::fs::create_dir_all(root)?;
    table.save(&root.join("severity_table.json"))?;
    ds.save(&root.join("clean"))?;
    for kind in CorruptionKind::ALL {
        for severity in SEVERITIES {
            let corrupted = corrupt_batch(&ds.images, kind, severity, table, seed)?;
            let variant = Dataset {
                images: corrupted,
                labels: ds.labels.clone(),
                num_classes: ds.num_classes,
            };
            variant.save(&variant_dir(root, kind, severity))?;
        }
    }
    let (h, w) = ds.extents();
    let manifest = SuiteManifest {
        version: SUITE_VERSION,
        seed,
        n: ds.len(),
        h,
        w,
        kinds: CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        severities: SEVERITIES.len(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<SuiteManifest> {
    let json = std::fs::read_to_string(root.join("manifest.json"))
        .map_err(|e| VitaError::Data(format!("suite manifest at {}: {e}", root.display())))?;
    let manifest: SuiteManifest = serde_json::from_str(&json)
        .map_err(|e| VitaError::Data(format!("suite manifest parse error: {e}")))?;
    if manifest.version != SUITE_VERSION {
        return Err(VitaError::Data(format!(
            "suite manifest version {} unsupported",
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_clean(root: &Path) -> Result<Dataset> {
    Dataset::load(&root.join("clean"))
}

pub fn load_variant(root: &Path, kind: CorruptionKind, severity: usize) -> Result<Dataset> {
    Dataset::load(&variant_dir(root, kind, severity))
}
