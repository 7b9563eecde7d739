"""Time the numba and numpy paths of each kernel on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Compilation happens in a warm-up call and is reported separately.  The
end-to-end section times full environment steps in fresh interpreters so
the ``HERO_NUMBA`` switch is honoured.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from hero.kernels import IMPLEMENTATIONS


def cases(rng):
    xs, ys = rng.uniform(0, 3, 4), rng.uniform(0, 1, 4)
    size = 32 * 32 + 32
    p, g = rng.standard_normal(size), rng.standard_normal(size)
    return {
        "lidar": lambda f: f(xs, ys, 0, 0.1, 36, 0.1, 5.0),
        "collisions": lambda f: f(xs, ys, 0.25, 0.3),
        "adam": lambda f: f(p.copy(), g, np.zeros(size), np.zeros(size), 0.01, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def bench(call, fn, repeat):
    t0 = time.perf_counter()
    call(fn)
    first = time.perf_counter() - t0
    t0 = time.perf_counter()
    for _ in range(repeat):
        call(fn)
    return first, (time.perf_counter() - t0) / repeat


_STEP_SNIPPET = """
import time, numpy as np
from hero import env as E
cfg = E.congestion_config(4)
state, _, _ = E.reset(cfg, 0)
E.step(state, {0: (0.08, 0.0)}); E.all_high_observations(state)
t0 = time.perf_counter(); n = 0
while n < %d:
    state, _, _ = E.reset(cfg, n)
    while not state.done:
        state, _ = E.step(state, {i: (0.08, 0.0) for i in cfg.learner_ids})
        E.all_high_observations(state)
        n += 1
print((time.perf_counter() - t0) / n)
"""


def env_step_time(flag: str, steps: int) -> float:
    env = dict(os.environ, HERO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", _STEP_SNIPPET % steps], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'backend':<8}{'first call':>14}{'per call':>14}")
    for name, call in cases(rng).items():
        for backend, impls in IMPLEMENTATIONS.items():
            first, per = bench(call, impls[name], args.repeat)
            print(f"{name:<12}{backend:<8}{first * 1e3:>12.2f}ms{per * 1e6:>12.2f}us")
    print()
    for flag, label in (("1", "numba"), ("0", "numpy")):
        per = env_step_time(flag, args.steps)
        print(f"env step + observations, 4 vehicles, {label:<6}{per * 1e6:>10.1f}us")


if __name__ == "__main__":
    main()
