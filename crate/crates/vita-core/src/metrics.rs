//! Corruption-robustness metrics: the 15x5 error grid, unnormalized and
//! AlexNet-normalized mean corruption error, and report emission. All
//! aggregation runs in f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruptions::{suite, Category, CorruptionKind, SEVERITIES};
use crate::data::Dataset;
use crate::error::{Result, VitaError};
use crate::networks::Classifier;

pub const REPORT_VERSION: u32 = 1;

pub const NUM_KINDS: usize = 15;
pub const NUM_SEVERITIES: usize = 5;

/// Test error per corruption and severity, plus the clean reference.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorTable {
    /// errors[c][s] for CorruptionKind::ALL[c] at SEVERITIES[s].
    pub errors: Vec<Vec<f64>>,
    pub clean_error: f64,
    pub n_per_cell: Vec<Vec<usize>>,
}

impl ErrorTable {
    pub fn validate(&self) -> Result<()> {
        if self.errors.len() != NUM_KINDS || self.n_per_cell.len() != NUM_KINDS {
            return Err(VitaError::Data(format!(
                "error table needs {NUM_KINDS} corruption rows, got {} / {}",
                self.errors.len(),
                self.n_per_cell.len()
            )));
        }
        for (c, (row, counts)) in self.errors.iter().zip(&self.n_per_cell).enumerate() {
            if row.len() != NUM_SEVERITIES || counts.len() != NUM_SEVERITIES {
                return Err(VitaError::Data(format!(
                    "error table row {c} needs {NUM_SEVERITIES} severities"
                )));
            }
            for (s, &e) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&e) {
                    return Err(VitaError::Data(format!(
                        "error table cell ({c}, {s}) out of [0, 1]: {e}"
                    )));
                }
            }
            if counts.iter().any(|&n| n == 0) {
                return Err(VitaError::Data(format!("error table row {c} has an empty cell")));
            }
        }
        if !(0.0..=1.0).contains(&self.clean_error) {
            return Err(VitaError::Data(format!("clean error out of [0, 1]: {}", self.clean_error)));
        }
        Ok(())
    }

    /// Severity-mean error per corruption, canonical order.
    pub fn per_corruption_means(&self) -> Vec<f64> {
        self.errors
            .iter()
            .map(|row| row.iter().sum::<f64>() / NUM_SEVERITIES as f64)
            .collect()
    }
}

/// AlexNet reference errors per corruption (severity means), canonical
/// corruption order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormalizationConstants {
    pub values: Vec<f64>,
}

impl Default for NormalizationConstants {
    fn default() -> Self {
        NormalizationConstants {
            values: vec![
                0.886, 0.894, 0.923, 0.820, 0.826, 0.786, 0.798, 0.867, 0.827, 0.819, 0.565,
                0.853, 0.646, 0.718, 0.607,
            ],
        }
    }
}

impl NormalizationConstants {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != NUM_KINDS {
            return Err(VitaError::Data(format!(
                "normalization table needs {NUM_KINDS} constants, got {}",
                self.values.len()
            )));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(VitaError::Data(format!(
                    "normalization constant for {} out of (0, 1): {v}",
                    CorruptionKind::ALL[i].name()
                )));
            }
        }
        Ok(())
    }
}

/// Misclassification fraction of `preds` against `labels`.
pub fn error_from_predictions(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(VitaError::Data(format!(
            "prediction/label count mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// Clean classification error of the model on a dataset, in chunks of 256.
pub fn error_rate(model: &Classifier, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(VitaError::Data("error_rate: empty dataset".into()));
    }
    let n = ds.len();
    let mut wrong = 0usize;
    let mut at = 0usize;
    while at < n {
        let take = (n - at).min(256);
        let part = ds.slice(at, take);
        let pred = model.predict(&part.images)?;
        wrong += pred.iter().zip(&part.labels).filter(|(p, y)| p != y).count();
        at += take;
    }
    Ok(wrong as f64 / n as f64)
}

/// Walk a generated corruption suite and fill the 75-cell grid. Cells are
/// visited in canonical order; the batch-level convolutions underneath
/// already fan out across cores.
pub fn evaluate_error_table(model: &Classifier, suite_root: &Path) -> Result<ErrorTable> {
    let manifest = suite::load_manifest(suite_root)?;
    let clean = suite::load_clean(suite_root)?;
    let clean_error = error_rate(model, &clean)?;
    let mut errors = Vec::with_capacity(NUM_KINDS);
    let mut counts = Vec::with_capacity(NUM_KINDS);
    for kind in CorruptionKind::ALL {
        let mut row = Vec::with_capacity(NUM_SEVERITIES);
        let mut row_n = Vec::with_capacity(NUM_SEVERITIES);
        for severity in SEVERITIES {
            let ds = suite::load_variant(suite_root, kind, severity)?;
            if ds.len() != manifest.n {
                return Err(VitaError::Data(format!(
                    "suite variant {}/{severity} has {} images, manifest says {}",
                    kind.name(),
                    ds.len(),
                    manifest.n
                )));
            }
            row.push(error_rate(model, &ds)?);
            row_n.push(ds.len());
        }
        errors.push(row);
        counts.push(row_n);
    }
    let table = ErrorTable { errors, clean_error, n_per_cell: counts };
    table.validate()?;
    Ok(table)
}

/// Plain mean over all 75 cells.
pub fn mce_unnormalized(table: &ErrorTable) -> Result<f64> {
    table.validate()?;
    let sum: f64 = table.errors.iter().flatten().sum();
    Ok(sum / (NUM_KINDS * NUM_SEVERITIES) as f64)
}

/// Per-corruption normalized error CE_c = mean_s E_{c,s} / const_c and
/// their 15-way mean.
pub fn mce_normalized(
    table: &ErrorTable,
    consts: &NormalizationConstants,
) -> Result<(Vec<f64>, f64)> {
    table.validate()?;
    consts.validate()?;
    let ce: Vec<f64> = table
        .per_corruption_means()
        .iter()
        .zip(&consts.values)
        .map(|(&m, &a)| m / a)
        .collect();
    let mce = ce.iter().sum::<f64>() / NUM_KINDS as f64;
    Ok((ce, mce))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorruptionSummary {
    pub corruption: String,
    pub category: String,
    pub mean_error: f64,
    pub ce_normalized: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CategoryMean {
    pub category: String,
    pub ce_normalized: f64,
}

/// Experiment settings echoed into every report so no default stays silent.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportContext {
    pub lambda: f32,
    pub beta: f32,
    pub seed: u64,
    pub severity_table_version: u32,
    /// How the per-corruption constants are interpreted.
    pub normalization: String,
}

impl Default for ReportContext {
    fn default() -> Self {
        ReportContext {
            lambda: 1.0,
            beta: 1.0,
            seed: 0,
            severity_table_version: 0,
            normalization: "alexnet-severity-mean".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub version: u32,
    pub clean_error: f64,
    pub mce_unnormalized: f64,
    pub mce_normalized: f64,
    pub per_corruption: Vec<CorruptionSummary>,
    pub category_means: Vec<CategoryMean>,
    pub table: ErrorTable,
    pub context: ReportContext,
}

pub fn build_report(
    table: &ErrorTable,
    consts: &NormalizationConstants,
    context: &ReportContext,
) -> Result<MetricReport> {
    let mce_u = mce_unnormalized(table)?;
    let (ce, mce_n) = mce_normalized(table, consts)?;
    let means = table.per_corruption_means();
    let per_corruption: Vec<CorruptionSummary> = CorruptionKind::ALL
        .iter()
        .enumerate()
        .map(|(i, k)| CorruptionSummary {
            corruption: k.name().to_string(),
            category: k.category().name().to_string(),
            mean_error: means[i],
            ce_normalized: ce[i],
        })
        .collect();
    let category_means = [Category::Noise, Category::Blur, Category::Weather, Category::Digital]
        .iter()
        .map(|cat| {
            let members: Vec<f64> = CorruptionKind::ALL
                .iter()
                .enumerate()
                .filter(|(_, k)| k.category() == *cat)
                .map(|(i, _)| ce[i])
                .collect();
            CategoryMean {
                category: cat.name().to_string(),
                ce_normalized: members.iter().sum::<f64>() / members.len() as f64,
            }
        })
        .collect();
    Ok(MetricReport {
        version: REPORT_VERSION,
        clean_error: table.clean_error,
        mce_unnormalized: mce_u,
        mce_normalized: mce_n,
        per_corruption,
        category_means,
        table: table.clone(),
        context: context.clone(),
    })
}

/// Write `report.json` and `report.csv` under `dir`. JSON carries the
/// full-precision numbers; the CSV rounds to nine decimals for reading.
pub fn emit_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| VitaError::Data(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("report.csv"), render_csv(report))?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| VitaError::Data(format!("report at {}: {e}", path.display())))?;
    serde_json::from_str(&json).map_err(|e| VitaError::Data(format!("report parse: {e}")))
}

fn render_csv(report: &MetricReport) -> String {
    let mut out = String::from("corruption,severity,error\n");
    for (c, kind) in CorruptionKind::ALL.iter().enumerate() {
        for (s, &severity) in SEVERITIES.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.9}\n",
                kind.name(),
                severity,
                report.table.errors[c][s]
            ));
        }
    }
    for cm in &report.category_means {
        out.push_str(&format!("category_{},,{:.9}\n", cm.category, cm.ce_normalized));
    }
    out.push_str(&format!("clean,,{:.9}\n", report.clean_error));
    out.push_str(&format!("mce,,{:.9}\n", report.mce_unnormalized));
    out.push_str(&format!("mce_normalized,,{:.9}\n", report.mce_normalized));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_table(seed: u64) -> ErrorTable {
        let mut rng = rng_from_seed(seed);
        ErrorTable {
            errors: (0..NUM_KINDS)
                .map(|_| (0..NUM_SEVERITIES).map(|_| rng.random::<f64>()).collect())
                .collect(),
            clean_error: rng.random::<f64>() * 0.2,
            n_per_cell: vec![vec![64; NUM_SEVERITIES]; NUM_KINDS],
        }
    }

    #[test]
    fn error_from_predictions_counts() {
        assert_eq!(error_from_predictions(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(error_from_predictions(&[1, 0, 0], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(error_from_predictions(&[0, 1, 2, 0], &[0, 1, 2, 1]).unwrap(), 0.25);
        assert!(error_from_predictions(&[], &[]).is_err());
        assert!(error_from_predictions(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn mce_unnormalized_constant_and_counting_cases() {
        let mut t = random_table(1);
        for row in &mut t.errors {
            row.fill(0.10);
        }
        assert!((mce_unnormalized(&t).unwrap() - 0.10).abs() < 1e-12);
        let mut flat: Vec<f64> = vec![1.0; 37];
        flat.extend(vec![0.0; 38]);
        for (i, row) in t.errors.iter_mut().enumerate() {
            for (s, cell) in row.iter_mut().enumerate() {
                *cell = flat[i * NUM_SEVERITIES + s];
            }
        }
        assert!((mce_unnormalized(&t).unwrap() - 37.0 / 75.0).abs() < 1e-12);
    }

    #[test]
    fn mce_unnormalized_matches_flat_sum_oracle() {
        let t = random_table(2);
        // Oracle sums severity-major instead of corruption-major.
        let mut sum = 0.0f64;
        for s in 0..NUM_SEVERITIES {
            for c in 0..NUM_KINDS {
                sum += t.errors[c][s];
            }
        }
        let oracle = sum / 75.0;
        assert!((mce_unnormalized(&t).unwrap() - oracle).abs() < 1e-9);
        // Permutation invariance and bounds.
        let lo = t.errors.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.errors.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = mce_unnormalized(&t).unwrap();
        assert!(v >= lo && v <= hi);
    }

    #[test]
    fn normalized_ce_hits_one_at_the_reference_error() {
        let mut t = random_table(3);
        t.errors[0] = vec![0.886; NUM_SEVERITIES];
        let (ce, _) = mce_normalized(&t, &NormalizationConstants::default()).unwrap();
        assert!((ce[0] - 1.0).abs() < 1e-12, "gaussian CE at reference error: {}", ce[0]);
        // All-zero grid collapses to zero.
        for row in &mut t.errors {
            row.fill(0.0);
        }
        let (ce, mce) = mce_normalized(&t, &NormalizationConstants::default()).unwrap();
        assert!(ce.iter().all(|&v| v == 0.0) && mce == 0.0);
    }

    #[test]
    fn normalized_matches_ratio_oracle_and_unit_constants_degenerate() {
        let t = random_table(4);
        let consts = NormalizationConstants::default();
        let (ce, mce) = mce_normalized(&t, &consts).unwrap();
        for c in 0..NUM_KINDS {
            let mean = (0..NUM_SEVERITIES).map(|s| t.errors[c][s]).sum::<f64>() / 5.0;
            assert!((ce[c] - mean / consts.values[c]).abs() < 1e-9);
        }
        let oracle_mce = ce.iter().sum::<f64>() / 15.0;
        assert!((mce - oracle_mce).abs() < 1e-9);
        // Constants of 1 reduce to the mean of severity-means. They fail
        // validation's open-interval check, so compute directly.
        let means = t.per_corruption_means();
        let plain = means.iter().sum::<f64>() / 15.0;
        let near_one = NormalizationConstants { values: vec![1.0 - 1e-12; NUM_KINDS] };
        let (_, mce1) = mce_normalized(&t, &near_one).unwrap();
        assert!((mce1 - plain).abs() < 1e-9);
    }

    #[test]
    fn table_validation_rejects_bad_grids() {
        let mut t = random_table(5);
        t.errors[3][2] = 1.5;
        assert!(t.validate().is_err());
        let mut t = random_table(6);
        t.errors.pop();
        assert!(mce_unnormalized(&t).is_err());
        let mut t = random_table(7);
        t.n_per_cell[0][0] = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn report_roundtrips_bit_exactly_and_csv_matches() {
        let t = random_table(8);
        let consts = NormalizationConstants::default();
        let report = build_report(&t, &consts, &ReportContext::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let back = load_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(report, back, "JSON round-trip must preserve every field");

        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let mce_line = csv
            .lines()
            .find(|l| l.starts_with("mce,"))
            .expect("csv must carry an mce summary row");
        let printed: f64 = mce_line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((printed - mce_unnormalized(&t).unwrap()).abs() < 1e-9);
        assert_eq!(csv.lines().count(), 1 + 75 + 4 + 3);
    }

    #[test]
    fn category_means_recompute_from_member_columns() {
        let t = random_table(9);
        let report =
            build_report(&t, &NormalizationConstants::default(), &ReportContext::default())
                .unwrap();
        for cm in &report.category_means {
            let members: Vec<f64> = report
                .per_corruption
                .iter()
                .filter(|e| e.category == cm.category)
                .map(|e| e.ce_normalized)
                .collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((cm.ce_normalized - mean).abs() < 1e-12, "{}", cm.category);
        }
        assert_eq!(report.category_means.len(), 4);
        assert_eq!(report.per_corruption.len(), 15);
    }
}
