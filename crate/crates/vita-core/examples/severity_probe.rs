//! Prints the mean distortion per (kind, severity) cell on the calibration
//! batch. Scratch tool used while tuning the default severity table.

use vita_core::corruptions::{corrupt_batch, CorruptionKind, SeverityTable, SEVERITIES};
use vita_core::data::{generate_synthetic, SyntheticSpec};

fn main() {
    let spec = SyntheticSpec { num_classes: 4, per_class: 8, extent: 32, noise: 0.05 };
    let ds = generate_synthetic(&spec, 2024).expect("calibration set");
    let table = SeverityTable::default();
    for kind in CorruptionKind::ALL {
        print!("{:16}", kind.name());
        let mut prev = -1.0f64;
        let mut ok = true;
        for severity in SEVERITIES {
            let out = corrupt_batch(&ds.images, kind, severity, &table, 7).unwrap();
            let a = ds.images.data();
            let b = out.data();
            let mad: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / a.len() as f64;
            print!(" {mad:9.5}");
            if mad <= prev {
                ok = false;
            }
            prev = mad;
        }
        println!("  {}", if ok { "monotone" } else { "VIOLATION" });
    }
}
