"""Smoke test for the Python bindings.

Build first with `cargo build -p gsbr-py --release` (or `maturin develop`).
Run from the repository root: `python3 python/smoke_test.py`.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        return importlib.import_module("gsbr")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libgsbr.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "gsbr.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("gsbr")
    sys.exit("gsbr extension not found; run `cargo build -p gsbr-py --release` first")


def main():
    gsbr = load()
    henon = gsbr.MapSpec.preset("henon")
    assert abs(henon.map_eval([0.5, -1.0]) - 0.35) < 1e-12
    assert henon.is_invertible()
    back = henon.inverse_step(henon.step([-1.0, 0.5]))
    assert max(abs(a - b) for a, b in zip(back, [-1.0, 0.5])) < 1e-12

    xs = gsbr.simulate(henon, [-1.0, 0.5], 200, seed=7)
    assert len(xs) == 200 and abs(xs[0] - 0.35) < 1e-12

    saddles = gsbr.find_saddle(henon, 0.0, 3.0)
    root = (-0.7 + math.sqrt(0.49 + 5.6)) / 2.8
    assert abs(saddles[0]["location"][0] - root) < 1e-8

    line = gsbr.trace_stable_manifold(henon, n_back=4)
    assert len(line["points"]) > 10

    noisy = gsbr.simulate(henon, [-1.0, 0.5], 120, seed=3, noise=[(1.0, 1e-8)])
    out = gsbr.run_chain(noisy, seed=1, iters=2000, burn_in=500, thin=10, T=2)
    theta = [sum(s["theta"][i] for s in out["samples"]) / len(out["samples"]) for i in range(6)]
    assert abs(theta[4] + 1.4) < 0.05, theta

    cloud = gsbr.manifold_sliding(noisy, 3, seed=1, iters=600, burn_in=100, thin=10)
    assert {p["source_id"] for p in cloud["points"]} == {1, 2, 3}
    pts = [[p["x"], p["y"]] for p in cloud["points"]]
    metrics = gsbr.cloud_metrics(pts, line["points"])
    assert 0.0 <= metrics["coverage"] <= 1.0
    _, angle = gsbr.principal_direction(pts)
    assert 0.0 <= angle < 180.0 and math.isfinite(angle)

    try:
        gsbr.gsbr_config(iters=-1)
    except (ValueError, OverflowError):
        pass
    else:
        raise AssertionError("negative iters accepted")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
