#!/usr/bin/env python3
"""Smoke test for the slu_py extension module.

Builds nothing itself: run `cargo build --release -p slu-py` first, then
`python3 python/smoke_test.py`. Exercises the toy corpus, a short training
run, evaluation, single-file classification and the decoding helpers.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_slu_py():
    candidates = [
        REPO / "target" / "release" / "libslu_py.so",
        REPO / "target" / "debug" / "libslu_py.so",
    ]
    lib = next((c for c in candidates if c.exists()), None)
    if lib is None:
        sys.exit(
            "libslu_py.so not found; build it first:\n  cargo build --release -p slu-py"
        )
    staging = Path(tempfile.mkdtemp(prefix="slu_py_"))
    shutil.copy2(lib, staging / "slu_py.so")
    sys.path.insert(0, str(staging))
    import slu_py

    return slu_py


def main():
    slu = import_slu_py()
    work = Path(tempfile.mkdtemp(prefix="slu_smoke_"))
    print(f"workdir: {work}")

    # schedules
    assert slu.lr_at_epoch(1, 0.001) == 0.001
    assert slu.lr_at_epoch(7, 0.001) == 0.0005
    assert slu.lr_at_epoch(9, 0.001) == 0.00025
    p0 = slu.teacher_forcing_prob(0)
    p_inf = slu.teacher_forcing_prob(10**6)
    assert p0 > 0.99 and abs(p_inf - 0.5) < 1e-6
    print(f"PASS schedules: lr(7)=0.0005, p(0)={p0:.4f}, p(inf)={p_inf:.4f}")

    # decoding helpers
    tuple_, logp = slu.greedy_intent([0.1, 0.9], [0.6, 0.4], [0.2, 0.3, 0.5])
    assert tuple_ == (1, 0, 2)
    assert abs(logp - (math.log(0.9) + math.log(0.6) + math.log(0.5))) < 1e-9
    masked, _ = slu.beam_intent(
        [0.1, 0.9], [0.6, 0.4], [0.2, 0.3, 0.5], width=12,
        valid_intents=[(0, 0, 0), (1, 1, 2)],
    )
    assert masked == (1, 1, 2), masked
    print("PASS decoding: greedy argmaxes, masked beam picks the best valid tuple")

    # toy corpus
    corpus = slu.generate_toy_corpus(
        str(work / "corpus"),
        seed=5,
        actions=["go", "stop"],
        objects=["lamp", "music"],
        locations=["here"],
        wordings_per_intent=2,
        train_utterances_per_wording=4,
        test_utterances_per_wording=2,
    )
    assert corpus["train_count"] == 2 * 2 * 1 * 2 * 4
    assert corpus["test_count"] == 2 * 2 * 1 * 2 * 2
    print(f"PASS toy corpus: {corpus['train_count']} train / {corpus['test_count']} test")

    # features
    import csv

    with open(corpus["train_manifest"]) as fh:
        first = next(csv.DictReader(fh))
    wav = Path(corpus["train_manifest"]).parent / first["path"]
    frames = slu.extract_features(str(wav))
    assert len(frames) > 10 and len(frames[0]) == 40
    col_mean = sum(row[0] for row in frames) / len(frames)
    assert abs(col_mean) < 1e-4, "CMN should zero the per-coefficient mean"
    print(f"PASS features: {len(frames)} frames x 40, CMN mean {col_mean:.2e}")

    # augmentation (tiny slice of the corpus)
    aug = slu.augment_manifest(corpus["train_manifest"], str(work / "aug"), seed=3)
    assert aug["output_count"] == 5 * aug["input_count"]
    print(f"PASS augmentation: {aug['input_count']} -> {aug['output_count']} records")

    # short training run on a small conditional model
    config = "\n".join(
        [
            "stack_layers = 1",
            "hidden = 24",
            "classifier = conditional",
            "epochs = 6",
            "batch_size = 16",
            "seed = 11",
        ]
    )
    result = slu.train(
        corpus["train_manifest"], corpus["test_manifest"], str(work / "run"), config
    )
    assert len(result["history"]) == 6
    assert result["history"][0]["lr"] == 0.001
    print(
        "PASS training: best validation intent error "
        f"{result['best_validation_error']:.2f}%"
    )

    report = slu.evaluate(result["best_checkpoint"], corpus["test_manifest"])
    assert 0.0 <= report["intent_error"] <= 100.0
    assert report["n_utterances"] == corpus["test_count"]
    for v in report["slot_errors"].values():
        assert v <= report["intent_error"] + 1e-9
    print(f"PASS evaluation: intent error {report['intent_error']:.2f}%")

    clf = slu.IntentClassifier.load(result["best_checkpoint"])
    labels = clf.labels()
    assert labels["action"] == ["go", "stop"]
    verdict = clf.classify(str(wav), constrained=True, beam_width=8)
    assert verdict["action"] in labels["action"]
    assert verdict["object"] in labels["object"]
    assert verdict["location"] in labels["location"]
    assert verdict["log_prob"] <= 0.0
    print(f"PASS classify: {wav.name} -> {verdict}")

    print("ALL SMOKE TESTS PASSED")


if __name__ == "__main__":
    main()
