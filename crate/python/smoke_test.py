"""Smoke test for the uedqt_py extension module.

Build first:
    cargo build -p uedqt-py --release --features extension-module
then run from the repository root:
    python3 python/smoke_test.py
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]
LIB = ROOT / "target" / "release" / "libuedqt_py.so"


def load():
    if not LIB.exists():
        sys.exit(f"missing {LIB}; build the extension first")
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "uedqt_py.so"
    shutil.copy(LIB, target)
    spec = importlib.util.spec_from_file_location("uedqt_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    uq = load()

    assert abs(uq.normalized_legendre(0, 0, 0.3) - 1 / math.sqrt(2)) < 1e-12
    assert abs(uq.clebsch_gordan(1, 1, 1, -1, 0, 0) - 1 / math.sqrt(3)) < 1e-12
    assert uq.tikhonov_solve([[2.0, 0.0], [0.0, 4.0]], [2.0, 4.0], 0.0) == [1.0, 1.0]

    cfg = uq.Config()
    rho = uq.rotational_truth(cfg)
    assert abs(rho.trace() - 1) < 1e-10
    pr = uq.synthesize_probability(rho, cfg)
    est, history = uq.qt_rot(pr, cfg, rho)
    print(f"qt_rot: {len(history)} iterations, eps_rho {history[-1][1]:.3e}, eps_pr {history[-1][2]:.3e}")
    assert history[-1][1] <= 5e-2 and history[-1][2] <= 1e-3

    vcfg = uq.Config('system = "vibrational"\nseed = 100\n')
    truth = uq.VibrationalDensity.random(9, 3, 0)
    times, values = uq.vibrational_movie(truth, vcfg)
    est, history = uq.qt_vib(times, values, vcfg, truth)
    print(f"qt_vib: {len(history)} iterations, eps_rho {history[-1][1]:.3e}, eps_pr {history[-1][2]:.3e}")
    assert history[-1][1] <= 8e-2 and history[-1][2] <= 6e-2

    try:
        uq.Config("[rotor]\nj_max = -1\n")
    except ValueError as e:
        print(f"bad config rejected: {e}")
    else:
        raise AssertionError("invalid config accepted")
    print("ok")


if __name__ == "__main__":
    main()
