#!/usr/bin/env python3
"""Smoke test for the csg Python extension module.

Builds nothing itself: it locates the compiled cdylib under target/, copies
it next to a temp directory as an importable module, and exercises the codec,
metrics, a tiny training run, and generation.

Usage:
    cargo build --release -p csg-py
    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_library():
    candidates = []
    for profile in ("release", "debug"):
        for name in ("libcsg.so", "libcsg.dylib", "csg.dll"):
            path = os.path.join(REPO, "target", profile, name)
            if os.path.exists(path):
                candidates.append(path)
    if not candidates:
        sys.exit(
            "csg extension not built; run `cargo build --release -p csg-py` first"
        )
    return max(candidates, key=os.path.getmtime)


def import_csg():
    lib = locate_library()
    tmp = tempfile.mkdtemp(prefix="csg-py-")
    suffix = ".pyd" if lib.endswith(".dll") else ".so"
    shutil.copy(lib, os.path.join(tmp, "csg" + suffix))
    sys.path.insert(0, tmp)
    import csg  # noqa: E402

    return csg


def main():
    csg = import_csg()

    # codec
    assert csg.parse_chord_label("C:maj") == 0
    assert csg.parse_chord_label("A:min") == 37
    assert csg.parse_chord_label("N") == csg.NO_CHORD == 48
    assert csg.chord_label(37) == "A:min"
    prog = csg.parse_progression(0, "major", "6451")
    assert [csg.chord_label(t) for t in prog] == ["A:min", "F:maj", "G:maj", "C:maj"]

    tokens = csg.quantize([(0.0, 0.1, "C:maj"), (0.1, 0.2, "A:min")], 50.0)
    assert tokens == [0] * 5 + [37] * 5, tokens
    up = csg.transpose(tokens, 2)
    assert up[:5] == [8] * 5

    # sim with a hand-checked shift
    score, shift, per_shift = csg.sim([0, 0, 37, 28], [8, 8, 45, 28])
    assert shift == 2 and abs(score - 0.75) < 1e-9, (score, shift)
    assert len(per_shift) == 12

    # frechet: identical corpora at distance ~0, shifted ones above it
    a = [[0, 1, 2, 3] * 4, [1, 2, 3, 0] * 4, [2, 2, 1, 0] * 4]
    b = [[3, 3, 3, 2] * 4, [2, 3, 3, 3] * 4, [3, 2, 3, 3] * 4]
    assert csg.frechet_distance(a, a, 4) < 1e-8
    assert csg.frechet_distance(a, b, 4) > 0.01
    d1 = csg.frechet_from_stats([0.0], [1.0], [1.0], [1.0])
    assert abs(d1 - 1.0) < 1e-8, d1

    assert csg.fusion_modes() == ["dws", "concat", "xattn", "none"]

    # tiny dataset
    train_ds, eval_ds = csg.synth_dataset(
        {"n_train": "2", "n_eval": "1", "frames_per_example": "48"}
    )
    assert len(train_ds) == 2 and len(eval_ds) == 1
    assert len(train_ds[0]["song"]) == 48

    # tiny training run plus generation round trip
    model, curve = csg.train_model(
        {
            "dim": "16",
            "heads": "2",
            "gpt_layers": "1",
            "chord_path_layers": "1",
            "audio_path_layers": "1",
            "max_frames": "64",
            "lyric_vocab": "8",
            "vocal_vocab": "8",
            "n_train": "8",
            "n_eval": "2",
            "frames_per_example": "48",
            "segment_min": "12",
            "segment_max": "20",
            "steps": "5",
            "batch_size": "2",
            "eval_every": "0",
            "eval_examples": "1",
            "warmup_steps": "2",
            "fusion_mode": "concat",
        }
    )
    assert len(curve) == 5
    assert all(math.isfinite(loss) for _, loss, _ in curve)
    print("model:", model.describe())

    chords = [0] * 24
    lyrics = [t % 8 for t in range(24)]
    vocal, song = model.generate(chords, lyrics, "greedy", 0)
    assert len(vocal) == len(song) == 24
    vocal2, song2 = model.generate(chords, lyrics, "greedy", 0)
    assert (vocal, song) == (vocal2, song2), "greedy generation must be deterministic"
    extracted = model.extract_chords(song)
    assert len(extracted) == 24

    # checkpoint round trip
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        loaded = csg.load_model(path)
        v3, s3 = loaded.generate(chords, lyrics, "greedy", 0)
        assert (v3, s3) == (vocal, song), "checkpoint round trip must be exact"

    print("smoke test passed")


if __name__ == "__main__":
    main()
