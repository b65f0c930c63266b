"""Time the hot kernels under both backends.

Each backend runs in a fresh interpreter because the choice is made at
import time.  The numba timings exclude compilation (one warm-up call).

    python benchmarks/bench_kernels.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

_WORKER = r"""
import json, sys, time
import numpy as np
from hestonfqi import BACKEND, HestonParams, PricePath, SimConfig, simulate_batch, simulate_heston
from hestonfqi.calibrate import CalibrationConfig, ekf_filter_pass
from hestonfqi.extratrees import TreeParams, fit
from hestonfqi.trading_env import ArbitrageMarketConfig, simulate_arbitrage_path

repeat = int(sys.argv[1])
params = HestonParams(3.0, 0.04, 0.3, -0.6, 0.0)
path = simulate_heston(params, SimConfig(100.0, 0.04, 20_000, 1 / 252, 0))
rng = np.random.default_rng(0)
x = rng.uniform(-1, 1, (20_000, 3))
y = x[:, 0] ** 2 + np.sin(3 * x[:, 1])
model = fit(x, y, TreeParams(n_trees=10))

cases = {
    "heston_paths (32 x 10k)": lambda: simulate_batch(params, SimConfig(100.0, 0.04, 10_000, 1 / 252, 0), 32),
    "reverting_path (100k)": lambda: simulate_arbitrage_path(
        ArbitrageMarketConfig(HestonParams(0.05, 1e-4, 0.002, -0.5, 0.0), n_steps=100_000)),
    "ekf_pass (20k)": lambda: ekf_filter_pass(PricePath(path.prices, dt=1 / 252), params, CalibrationConfig()),
    "build_forest (20k x 3, 10 trees)": lambda: fit(x, y, TreeParams(n_trees=10)),
    "predict_forest (20k rows)": lambda: model.predict_batch(x),
}
out = {"backend": BACKEND, "cases": {}}
for name, fn in cases.items():
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out["cases"][name] = best
print(json.dumps(out))
"""


def run_backend(disable_numba: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env["HESTONFQI_DISABLE_NUMBA"] = "1" if disable_numba else "0"
    proc = subprocess.run(
        [sys.executable, "-c", _WORKER, str(repeat)],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3, help="timed repetitions per case; best is kept")
    args = parser.parse_args(argv)

    start = time.perf_counter()
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    width = max(len(k) for k in fast["cases"])
    print(f"{'kernel':<{width}}  {fast['backend']:>10}  {slow['backend']:>10}  speedup")
    for name, t_fast in fast["cases"].items():
        t_slow = slow["cases"][name]
        print(f"{name:<{width}}  {t_fast * 1e3:>8.1f}ms  {t_slow * 1e3:>8.1f}ms  {t_slow / t_fast:>6.1f}x")
    print(f"total wall time {time.perf_counter() - start:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
