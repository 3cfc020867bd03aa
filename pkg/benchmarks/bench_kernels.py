"""Compare the numba and numpy kernel paths.

    python3 benchmarks/bench_kernels.py --repeat 5

Also runs one full ALS fit per backend. Set VODKIT_DISABLE_NUMBA=1 to check
that only the numpy path is reported.
"""
import argparse
import time

import numpy as np

from vodkit import kernels, matest, synth


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def csr_problem(m, n, r, fill, rng):
    mask = rng.random((m, n)) < fill
    vals = rng.random((m, n))
    indptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))])
    rows, cols = np.nonzero(mask)
    return indptr, cols, vals[rows, cols], rng.random((n, r))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    cases = []
    for m, n in [(8, 8), (200, 31), (500, 80)]:
        a = rng.random((m, n))
        cases.append((f"jacobi_svd {m}x{n}", lambda a=a: kernels.jacobi_svd(a)))
    for m, n, r in [(500, 31, 2), (5000, 100, 3)]:
        prob = csr_problem(m, n, r, 0.4, rng)
        cases.append((f"solve_rows {m}x{n} r={r}", lambda p=prob: kernels.solve_rows(*p, 0.01)))
    model = synth.generate_model(500, 31, 2, seed=args.seed)
    obs = synth.sample_observations(model, synth.SamplingConfig(rho=0.4, seed=args.seed))
    cfg = matest.AlsConfig(rank=2, lam=0.01, seed=args.seed)
    cases.append(("als fit 500x31", lambda: matest.als(obs, cfg)))

    backends = kernels.available_backends()
    print(f"{'case':28s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases:
        row = []
        for b in backends:
            with kernels.use_backend(b):
                row.append(best_of(fn, args.repeat))
        line = f"{name:28s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
        if len(row) > 1:
            line += f"{row[1] / row[0]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
