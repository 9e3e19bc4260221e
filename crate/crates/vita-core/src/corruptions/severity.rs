//! Severity parameter table.
//!
//! Every corruption kind has five parameter vectors, one per severity level.
//! The table ships with calibrated defaults, serializes to JSON so suites
//! can pin the exact values they were generated with, and validates arity
//! and ranges on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorruptionKind;
use crate::error::{Result, VitaError};

pub const TABLE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeverityTable {
    pub version: u32,
    /// kind name -> five parameter vectors, severity 1 through 5.
    pub rows: BTreeMap<String, Vec<Vec<f32>>>,
}

/// Parameter vector layout per kind: (arity, field names for diagnostics).
pub fn param_layout(kind: CorruptionKind) -> (usize, &'static [&'static str]) {
    use CorruptionKind::*;
    match kind {
        GaussianNoise => (1, &["sigma"]),
        ShotNoise => (1, &["photons"]),
        ImpulseNoise => (1, &["prob"]),
        DefocusBlur => (1, &["radius"]),
        GlassBlur => (3, &["sigma", "max_delta", "iters"]),
        MotionBlur => (1, &["length"]),
        ZoomBlur => (1, &["max_zoom"]),
        Snow => (5, &["loc", "scale", "threshold", "blur_len", "blend"]),
        Frost => (4, &["keep", "add", "threshold", "roughness"]),
        Fog => (2, &["alpha", "roughness"]),
        Brightness => (1, &["offset"]),
        Contrast => (1, &["factor"]),
        Elastic => (2, &["alpha_px", "sigma_px"]),
        Pixelate => (1, &["factor"]),
        Jpeg => (1, &["quality"]),
    }
}

impl Default for SeverityTable {
    fn default() -> Self {
        use CorruptionKind::*;
        let mut rows = BTreeMap::new();
        let mut put = |kind: CorruptionKind, vals: Vec<Vec<f32>>| {
            rows.insert(kind.name().to_string(), vals);
        };
        put(GaussianNoise, vec![vec![0.04], vec![0.08], vec![0.12], vec![0.18], vec![0.26]]);
        put(ShotNoise, vec![vec![400.0], vec![200.0], vec![100.0], vec![50.0], vec![25.0]]);
        put(ImpulseNoise, vec![vec![0.02], vec![0.04], vec![0.07], vec![0.11], vec![0.17]]);
        put(DefocusBlur, vec![vec![0.8], vec![1.2], vec![1.7], vec![2.3], vec![3.0]]);
        put(
            GlassBlur,
            vec![
                vec![0.4, 1.0, 1.0],
                vec![0.6, 1.0, 2.0],
                vec![0.8, 2.0, 2.0],
                vec![1.0, 2.0, 3.0],
                vec![1.3, 2.0, 4.0],
            ],
        );
        put(MotionBlur, vec![vec![3.0], vec![5.0], vec![7.0], vec![9.0], vec![12.0]]);
        put(ZoomBlur, vec![vec![1.06], vec![1.11], vec![1.17], vec![1.23], vec![1.30]]);
        put(
            Snow,
            vec![
                vec![0.10, 0.30, 0.70, 3.0, 0.95],
                vec![0.15, 0.30, 0.65, 4.0, 0.90],
                vec![0.20, 0.30, 0.60, 5.0, 0.85],
                vec![0.25, 0.30, 0.55, 6.0, 0.80],
                vec![0.30, 0.30, 0.50, 8.0, 0.70],
            ],
        );
        put(
            Frost,
            vec![
                vec![0.95, 0.15, 0.65, 0.65],
                vec![0.88, 0.30, 0.60, 0.65],
                vec![0.80, 0.45, 0.55, 0.65],
                vec![0.72, 0.60, 0.50, 0.65],
                vec![0.65, 0.75, 0.45, 0.65],
            ],
        );
        put(
            Fog,
            vec![
                vec![0.15, 0.60],
                vec![0.30, 0.60],
                vec![0.45, 0.60],
                vec![0.60, 0.60],
                vec![0.75, 0.60],
            ],
        );
        put(Brightness, vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4], vec![0.5]]);
        put(Contrast, vec![vec![0.75], vec![0.6], vec![0.45], vec![0.3], vec![0.15]]);
        put(
            Elastic,
            vec![
                vec![1.0, 4.0],
                vec![2.0, 4.0],
                vec![3.0, 4.0],
                vec![4.5, 4.0],
                vec![6.0, 4.0],
            ],
        );
        put(Pixelate, vec![vec![2.0], vec![3.0], vec![4.0], vec![6.0], vec![8.0]]);
        put(Jpeg, vec![vec![60.0], vec![40.0], vec![28.0], vec![18.0], vec![10.0]]);
        SeverityTable { version: TABLE_VERSION, rows }
    }
}

impl SeverityTable {
    /// Parameters for one (kind, severity) cell; severity runs 1..=5.
    pub fn params(&self, kind: CorruptionKind, severity: usize) -> Result<&[f32]> {
        if !(1..=5).contains(&severity) {
            return Err(VitaError::Config(format!(
                "severity {severity} out of range 1..=5"
            )));
        }
        let rows = self
            .rows
            .get(kind.name())
            .ok_or_else(|| VitaError::Config(format!("severity table has no rows for '{}'", kind.name())))?;
        rows.get(severity - 1)
            .map(Vec::as_slice)
            .ok_or_else(|| VitaError::Config(format!("severity table row missing for '{}'", kind.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TABLE_VERSION {
            return Err(VitaError::Config(format!(
                "severity table version {} unsupported, expected {TABLE_VERSION}",
                self.version
            )));
        }
        for kind in CorruptionKind::ALL {
            let (arity, names) = param_layout(kind);
            let rows = self.rows.get(kind.name()).ok_or_else(|| {
                VitaError::Config(format!("severity table lacks kind '{}'", kind.name()))
            })?;
            if rows.len() != 5 {
                return Err(VitaError::Config(format!(
                    "severity table kind '{}' has {} rows, needs 5",
                    kind.name(),
                    rows.len()
                )));
            }
            for (s, row) in rows.iter().enumerate() {
                if row.len() != arity {
                    return Err(VitaError::Config(format!(
                        "severity table '{}' severity {}: {} params, expected {} ({:?})",
                        kind.name(),
                        s + 1,
                        row.len(),
                        arity,
                        names
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(VitaError::Config(format!(
                        "severity table '{}' severity {}: non-finite parameter",
                        kind.name(),
                        s + 1
                    )));
                }
                validate_ranges(kind, s + 1, row)?;
            }
        }
        for key in self.rows.keys() {
            if CorruptionKind::from_name(key).is_none() {
                return Err(VitaError::Config(format!(
                    "severity table has unknown kind '{key}'"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("severity table serializes")
    }

    pub fn from_json(s: &str) -> Result<SeverityTable> {
        let table: SeverityTable = serde_json::from_str(s)
            .map_err(|e| VitaError::Config(format!("severity table parse error: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SeverityTable> {
        let s = std::fs::read_to_string(path)?;
        SeverityTable::from_json(&s)
    }
}

fn validate_ranges(kind: CorruptionKind, severity: usize, p: &[f32]) -> Result<()> {
    use CorruptionKind::*;
    let bad = |what: &str| {
        Err(VitaError::Config(format!(
            "severity table '{}' severity {severity}: {what}",
            kind.name()
        )))
    };
    match kind {
        GaussianNoise if p[0] <= 0.0 => bad("sigma must be positive"),
        ShotNoise if p[0] <= 0.0 => bad("photon count must be positive"),
        ImpulseNoise if !(0.0 < p[0] && p[0] < 1.0) => bad("prob must be in (0, 1)"),
        DefocusBlur if p[0] <= 0.0 => bad("radius must be positive"),
        GlassBlur if p[0] <= 0.0 || p[1] < 1.0 || p[2] < 1.0 => {
            bad("needs sigma > 0, max_delta >= 1, iters >= 1")
        }
        MotionBlur if p[0] < 1.0 => bad("length must be at least 1"),
        ZoomBlur if p[0] <= 1.0 => bad("max_zoom must exceed 1"),
        Snow if !(0.0..=1.0).contains(&p[0])
            || p[1] <= 0.0
            || !(0.0 < p[2] && p[2] < 1.0)
            || p[3] < 1.0
            || !(0.0 < p[4] && p[4] <= 1.0) =>
        {
            bad("needs loc in [0,1], scale > 0, threshold in (0,1), blur_len >= 1, blend in (0,1]")
        }
        Frost if !(0.0 < p[0] && p[0] <= 1.0)
            || p[1] <= 0.0
            || !(0.0 < p[2] && p[2] < 1.0)
            || !(0.0 < p[3] && p[3] < 1.0) =>
        {
            bad("needs keep in (0,1], add > 0, threshold in (0,1), roughness in (0,1)")
        }
        Fog if !(0.0 < p[0] && p[0] <= 1.0) || !(0.0 < p[1] && p[1] < 1.0) => {
            bad("needs alpha in (0,1], roughness in (0,1)")
        }
        Brightness if p[0] <= 0.0 => bad("offset must be positive"),
        Contrast if !(0.0 < p[0] && p[0] < 1.0) => bad("factor must be in (0, 1)"),
        Elastic if p[0] <= 0.0 || p[1] <= 0.0 => bad("alpha and sigma must be positive"),
        Pixelate if p[0] < 2.0 || p[0].fract() != 0.0 => bad("factor must be an integer >= 2"),
        Jpeg if p[0] < 1.0 || p[0] > 100.0 || p[0].fract() != 0.0 => {
            bad("quality must be an integer in 1..=100")
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_validates() {
        SeverityTable::default().validate().unwrap();
    }

    #[test]
    fn json_roundtrip() {
        let t = SeverityTable::default();
        let s = t.to_json();
        let t2 = SeverityTable::from_json(&s).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn rejects_missing_kind() {
        let mut t = SeverityTable::default();
        t.rows.remove("fog");
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("lacks kind 'fog'"), "{err}");
    }

    #[test]
    fn rejects_bad_arity_and_range() {
        let mut t = SeverityTable::default();
        t.rows.get_mut("fog").unwrap()[2] = vec![0.5];
        assert!(t.validate().is_err());

        let mut t = SeverityTable::default();
        t.rows.get_mut("jpeg").unwrap()[0] = vec![0.0];
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("quality"), "{err}");
    }

    #[test]
    fn rejects_unknown_kind() {
        let mut t = SeverityTable::default();
        t.rows.insert("vignette".into(), vec![vec![1.0]; 5]);
        let err = t.validate().unwrap_err().to_string();
        assert!(err.contains("unknown kind 'vignette'"), "{err}");
    }

    #[test]
    fn params_accessor_bounds() {
        let t = SeverityTable::default();
        assert!(t.params(CorruptionKind::Fog, 0).is_err());
        assert!(t.params(CorruptionKind::Fog, 6).is_err());
        assert_eq!(t.params(CorruptionKind::Fog, 3).unwrap().len(), 2);
    }
}
