//! Architectural guard: the training-side modules must stay decoupled from
//! the evaluation corruption kinds, so a model can never train on the
//! distortions it is graded against.

use std::path::Path;

fn source(rel: &str) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    std::fs::read_to_string(root.join(rel))
        .unwrap_or_else(|e| panic!("reading {rel}: {e}"))
}

#[test]
fn training_pipeline_never_references_corruptions() {
    let files = [
        "augment.rs",
        "attacks.rs",
        "vicinal.rs",
        "training/mod.rs",
        "training/gan.rs",
    ];
    let banned = ["corruptions::", "use crate::corruptions", "apply_corruption", "CorruptionKind"];
    for rel in files {
        let text = source(rel);
        for needle in banned {
            assert!(
                !text.contains(needle),
                "{rel} references `{needle}`; training must not depend on evaluation corruptions"
            );
        }
    }
}
