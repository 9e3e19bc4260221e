#!/usr/bin/env python3
"""Smoke test for the vita_py bindings.

Build the extension first:

    cargo build -p vita-py

The script locates the compiled cdylib in target/, loads it without any
packaging step, and drives a miniature end-to-end run.
"""

import json
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("libvita_py.so", "libvita_py.dylib", "vita_py.dll")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("vita_py cdylib not found; run `cargo build -p vita-py` first")
    staging = pathlib.Path(tempfile.mkdtemp(prefix="vita-py-"))
    target = staging / ("vita_py" + (".pyd" if built.suffix == ".dll" else ".so"))
    shutil.copy2(built, target)
    sys.path.insert(0, str(staging))
    import vita_py

    return vita_py


def main():
    vita = load_module()
    checks = 0

    def ok(label):
        nonlocal checks
        checks += 1
        print(f"ok - {label}")

    data = vita.Dataset.synthetic(2, 16, 16, 0.05, 7)
    assert len(data) == 32 and data.num_classes == 2
    assert data.image_shape == (3, 16, 16)
    pixels = data.image(0)
    assert len(pixels) == 3 * 16 * 16
    assert all(0.0 <= v <= 1.0 for v in pixels)
    ok("synthetic dataset")

    again = vita.Dataset.synthetic(2, 16, 16, 0.05, 7)
    assert again.image(3) == data.image(3), "same seed must reproduce pixels"
    ok("dataset determinism")

    aug = data.augmented(11)
    assert len(aug) == len(data) and aug.labels() == data.labels()
    assert aug.image(0) != data.image(0), "augmentation should move pixels"
    ok("weak augmentation")

    corrupted = vita.corrupt_image(pixels, 16, 16, "gaussian_noise", 3, 5)
    assert len(corrupted) == len(pixels)
    assert all(0.0 <= v <= 1.0 for v in corrupted)
    assert corrupted != pixels
    assert set(vita.corruption_names()) >= {"gaussian_noise", "fog", "jpeg"}
    ok("corruption primitive")

    clf = vita.Classifier(8, 2, 3)
    losses = clf.train_erm(data, 3, 8, 0.05, 1)
    assert len(losses) == 3 and losses[-1] <= losses[0]
    err = clf.error_rate(data)
    assert 0.0 <= err <= 0.5, f"training should beat chance, got {err}"
    ok(f"classifier training (train error {err:.3f})")

    assert len(vita.attack_names()) == 7
    adv_err = clf.attacked_error(data, "fgsm", 13)
    assert 0.0 <= adv_err <= 1.0 and adv_err >= err - 1e-9
    ok(f"fgsm attack (error {err:.3f} -> {adv_err:.3f})")

    with tempfile.TemporaryDirectory(prefix="vita-exp-") as tmp:
        out_dir = pathlib.Path(tmp) / "exp"
        config_path = pathlib.Path(tmp) / "config.json"
        config_path.write_text(
            json.dumps(
                {
                    "dataset": {
                        "source": "synthetic",
                        "classes": 2,
                        "n_train": 32,
                        "n_test": 16,
                        "extent": 16,
                        "noise": 0.05,
                    },
                    "train": {"epochs": 1, "batch_size": 8, "lr": 0.05},
                    "gan": {"batch_size": 8},
                    "gan_epochs": 1,
                    "pretrain_epochs": 1,
                    "translator_base": 4,
                    "classifier_width": 8,
                    "seed": 19,
                    "out_dir": str(out_dir),
                }
            )
        )

        stages = vita.run_experiment(config_path)
        assert [s for s, _ in stages] == [
            "data",
            "gen-suite",
            "pretrain",
            "train-translator",
            "train-robust",
            "evaluate",
            "report",
        ]
        assert all(outcome == "ran" for _, outcome in stages)
        report = json.loads((out_dir / "report" / "report.json").read_text())
        assert report["mce_unnormalized"] >= 0.0
        ok("experiment pipeline")

        rerun = vita.run_experiment(config_path)
        assert all(outcome == "skipped" for _, outcome in rerun)
        ok("experiment resumability")

        attack_report = json.loads(vita.attack_eval(config_path))
        assert len(attack_report["rows"]) == 7
        ok("attack evaluation report")

        translator = vita.Translator.load(out_dir / "translator" / "translator.ckpt")
        translated = translator.translate(data)
        assert len(translated) == len(data)
        first = translated.image(0)
        assert all(0.0 <= v <= 1.0 for v in first)
        ok("translator inference")

        roundtrip_dir = pathlib.Path(tmp) / "ds"
        data.save(roundtrip_dir)
        reloaded = vita.Dataset.load(roundtrip_dir)
        assert reloaded.image(5) == data.image(5)
        assert reloaded.labels() == data.labels()
        ok("dataset save/load roundtrip")

    print(f"PASS ({checks} checks)")


if __name__ == "__main__":
    main()
