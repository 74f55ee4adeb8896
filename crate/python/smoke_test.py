#!/usr/bin/env python3
"""Smoke test for the detcal_py extension module.

Builds nothing itself: it expects `cargo build -p detcal-py` (or --release)
to have produced libdetcal_py.so, copies it next to a temp dir as
detcal_py.so, imports it, and exercises the main entry points against
hand-computed values.

Run from the repository root:

    cargo build -p detcal-py
    python3 python/smoke_test.py
"""

import math
import pathlib
import shutil
import sys
import tempfile


def load_module():
    root = pathlib.Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libdetcal_py.so", "detcal_py.so", "libdetcal_py.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p detcal-py")
    tmp = pathlib.Path(tempfile.mkdtemp(prefix="detcal-py-"))
    shutil.copy(built, tmp / "detcal_py.so")
    sys.path.insert(0, str(tmp))
    import detcal_py

    return detcal_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    d = load_module()

    # geometry: hand case with intersection 0.08 over union 0.24
    approx(d.iou((0.5, 0.5, 0.4, 0.4), (0.7, 0.5, 0.4, 0.4)), 1.0 / 3.0, 1e-12)
    approx(d.iou((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)), 1.0)

    # matching: duplicate detection of one object stays incorrect
    matched = d.match_detections(
        [
            (0, 0, 0.9, (0.5, 0.5, 0.4, 0.4)),
            (0, 0, 0.7, (0.52, 0.5, 0.4, 0.4)),
        ],
        [(0, 0, (0.5, 0.5, 0.4, 0.4))],
    )
    assert matched[0]["correct"] and not matched[1]["correct"]

    # ECE hand case: two detections at 0.8, one correct, single bin
    approx(d.compute_ece([0.8, 0.8], [True, False], 1), 0.3, 1e-12)

    # D-ECE hand case: 0.25 over two confidence bins
    report = d.compute_dece(
        [0.9, 0.8, 0.3, 0.4],
        [True, False, False, True],
        [[0.5, 0.5, 0.2, 0.2]] * 4,
        dims=["conf"],
        conf_bins=2,
    )
    approx(report["dece"], 0.25, 1e-12)
    assert report["n_detections"] == 4

    rows = d.reliability_table([0.95], [True], 10)
    assert rows[9][3] == 1 and rows[0][1] is None

    # MC aggregation: softmax of mean logits, certainty formulas
    probs = d.mean_confidence([[2.0, 0.0], [0.0, 0.0]])
    approx(probs[0], 1.0 / (1.0 + math.exp(-1.0)), 1e-12)
    cert = d.classwise_certainty([[0.0], [2.0]])
    approx(cert[0], 1.0 - math.tanh(1.0), 1e-12)
    row = [0.5, 0.5, 0.2, 0.3]
    approx(d.box_certainty([row, row]), 1.0 - math.tanh(0.016875), 1e-12)
    approx(d.box_mean([[0.0] * 4, [1.0] * 4])[0], 0.5)
    assert d.fuse([1.0, 0.0], [1.0, 1.0]) == [1.0, 0.5]

    # auxiliary loss on a tiny batch: forward values and gradient shapes
    batch = [
        (0, [[1.2, -0.3], [0.8, 0.1]], [[0.5, 0.5, 0.3, 0.3]] * 2, 0, (0.5, 0.5, 0.3, 0.3)),
        (1, [[-0.5, 0.9], [0.2, 1.1]], [[0.3, 0.6, 0.2, 0.25]] * 2, 1, (0.3, 0.6, 0.2, 0.25)),
    ]
    l_mcc, l_lc, total = d.mccl_aux(batch, beta=1.0)
    approx(total, l_mcc + l_lc, 1e-15)
    assert 0.0 <= l_mcc <= 1.0 and 0.0 <= l_lc <= 1.0
    logit_grads, box_grads = d.mccl_aux_grad(batch, beta=1.0)
    assert len(logit_grads) == 2 and len(logit_grads[0]) == 2 and len(logit_grads[0][0]) == 2
    assert len(box_grads[0][0]) == 4
    assert any(abs(g) > 0 for loc in logit_grads for row in loc for g in row)

    # temperature scaling: T = 1 identity, argmax preserved
    probs = d.apply_temperature([2.0, 0.3, 0.1], 1.0)
    approx(sum(probs), 1.0, 1e-12)
    assert probs.index(max(probs)) == 0
    flat = d.apply_temperature([2.0, 0.3, 0.1], 1e9)
    approx(flat[0], 1.0 / 3.0, 1e-6)

    # scale-2 recovery on a synthetic calibrated set
    import random

    rng = random.Random(7)
    logits, labels = [], []
    for _ in range(4000):
        z = [rng.gauss(0.0, 1.5) for _ in range(3)]
        m = max(z)
        exps = [math.exp(v - m) for v in z]
        s = sum(exps)
        u, acc, y = rng.random(), 0.0, 2
        for i, e in enumerate(exps):
            acc += e / s
            if u < acc:
                y = i
                break
        logits.append([2.0 * v for v in z])
        labels.append(y)
    t = d.fit_temperature(logits, labels)
    assert abs(t - 2.0) < 0.15, f"temperature {t}"

    # toy trainer end to end (tiny)
    out = d.train_toy(mode="mccl", epochs=2, seed=1, train_scenes=8, val_scenes=8)
    assert len(out["log"]) == 2
    assert out["log"][0]["l_mcc"] > 0.0
    assert out["in_domain"]["n_detections"] > 0

    print("smoke test passed")


if __name__ == "__main__":
    main()
