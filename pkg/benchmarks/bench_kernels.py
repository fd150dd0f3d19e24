"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--envs 8] [--repeats 200]

Both variants are imported directly, so the QUADFTC_NUMBA flag does not matter
here.  Outputs are also compared for bitwise equality.
"""

import argparse
import time

import numpy as np

from quadftc import kernels as K
from quadftc.dynamics import QuadrotorParams, RigidBodyState


def timeit(fn, repeats):
    fn()  # warm-up (numba compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def setup(n, seed=0):
    rng = np.random.default_rng(seed)
    p = QuadrotorParams()
    states = np.tile(RigidBodyState.hover(p, (0, 0, 2)).as_array(), (n, 1))
    states[:, 0:3] += rng.normal(0, 0.3, (n, 3))
    states[:, 10:13] += rng.normal(0, 0.5, (n, 3))
    cmds = np.clip(p.hover_command + rng.normal(0, 0.05, (n, 4)), 0, 1)
    eta = np.ones((n, 4))
    eta[:, 0] = 0.5
    onset = np.zeros(n)
    params = np.tile(p.as_array(), (n, 1))
    steps = np.zeros(n, dtype=np.int64)
    return states, cmds, eta, onset, params, steps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--envs", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=200)
    a = ap.parse_args()
    n = a.envs
    states, cmds, eta, onset, params, steps = setup(n)
    targets = np.tile([0.0, 0.0, 2.0], (n, 1))
    zeros3 = np.zeros((n, 3))
    w = np.array([0.5, 0.05, 0.05, 0.2, 10.0])
    crashed = np.zeros(n, dtype=bool)
    T = 512
    rng = np.random.default_rng(1)
    r, v, d = rng.normal(size=(T, n)), rng.normal(size=(T, n)), rng.random((T, n)) < 0.01
    last = rng.normal(size=n)

    cases = {
        "step (5 RK4 substeps)": (
            lambda: K.step_batch_nb(states, cmds, eta, onset, params, steps, 0.002, 5),
            lambda: K.step_batch_np(states, cmds, eta, onset, params, steps, 0.002, 5)),
        "observe": (
            lambda: K.observe_batch_nb(states, targets, zeros3, cmds, 5.0, 20.0),
            lambda: K.observe_batch_np(states, targets, zeros3, cmds, 5.0, 20.0)),
        "reward": (
            lambda: K.reward_batch_nb(states, cmds, cmds, targets, w, crashed),
            lambda: K.reward_batch_np(states, cmds, cmds, targets, w, crashed)),
        f"gae (T={T})": (
            lambda: K.gae_nb(r, v, d, last, 0.99, 0.95),
            lambda: K.gae_np(r, v, d, last, 0.99, 0.95)),
    }
    print(f"{'kernel':24s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}  identical")
    for name, (f_nb, f_np) in cases.items():
        t_nb = timeit(f_nb, a.repeats) * 1e6
        t_np = timeit(f_np, a.repeats) * 1e6
        o_nb, o_np = f_nb(), f_np()
        o_nb = o_nb if isinstance(o_nb, tuple) else (o_nb,)
        o_np = o_np if isinstance(o_np, tuple) else (o_np,)
        same = all(np.array_equal(x, y) for x, y in zip(o_nb, o_np))
        print(f"{name:24s} {t_nb:10.1f} {t_np:10.1f} {t_np / t_nb:8.1f}  {same}")


if __name__ == "__main__":
    main()
