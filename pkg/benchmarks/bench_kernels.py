"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--episodes N] [--repeat R]

Both paths are called directly, so the env flag is not needed here. The first
numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from skippylab import _kernels, instances
from skippylab.mdp import N_UNIFORMS


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--H", type=int, default=10)
    args = ap.parse_args(argv)

    mdp, _ = instances.padded_linear(d=3, H=args.H, chain=2, seed=0)
    P_cdf, R_vals, R_cdf = mdp.sampling_tables()
    rng = np.random.default_rng(0)
    tau = rng.uniform(size=mdp.S)
    tau[0] = 1.0
    aplus = rng.integers(0, mdp.A, size=mdp.S).astype(np.int64)
    pi = np.cumsum(np.full((mdp.S, mdp.A), 1.0 / mdp.A), axis=1)
    C = rng.uniform(0, mdp.H, size=mdp.S)
    U = rng.random((args.episodes, mdp.H, N_UNIFORMS))
    k = np.int64(mdp.H // 2)
    s0 = np.int64(0)

    cases = {
        "rollout_memoryless": lambda impl: impl(P_cdf, R_vals, R_cdf, pi, s0, U),
        "rollout_skippy": lambda impl: impl(P_cdf, R_vals, R_cdf, tau, aplus, s0, k, U),
    }
    states = _kernels.rollout_skippy_np(P_cdf, R_vals, R_cdf, tau, aplus, s0, k, U)[0]
    rewards = rng.uniform(size=states.shape)
    cases["suffix_corrections"] = lambda impl: impl(states, rewards, tau, C)

    print(f"S={mdp.S} H={mdp.H} episodes={args.episodes} numba={'yes' if _kernels.HAVE_NUMBA else 'no'}")
    print(f"{'kernel':<22}{'numpy s':>10}{'numba s':>10}{'speedup':>9}  same")
    for name, call in cases.items():
        t_np, out_np = best_of(lambda: call(getattr(_kernels, name + "_np")), args.repeat)
        if not _kernels.HAVE_NUMBA:
            print(f"{name:<22}{t_np:>10.4f}{'-':>10}{'-':>9}  -")
            continue
        nb_fn = getattr(_kernels, name + "_nb")
        call(nb_fn)   # compile
        t_nb, out_nb = best_of(lambda: call(nb_fn), args.repeat)
        same = all(np.allclose(a, b, rtol=0, atol=1e-12) for a, b in zip(out_np, out_nb))
        print(f"{name:<22}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
