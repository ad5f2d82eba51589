"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--rows N] [--repeat R]

Both backends are run on the same inputs, their outputs are checked for
bit-identity, and the best wall time of ``--repeat`` runs is reported.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from quantforge import kernels, kquant, nf4


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=16384, help="32-element sub-blocks for q4k_search")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only numpy is available", file=sys.stderr)

    rng = np.random.default_rng(args.seed)
    sub = (rng.standard_normal((args.rows, 32)) * 0.02).astype(np.float32)
    x = rng.standard_normal(args.rows * 32).astype(np.float32)
    normalized = (x.reshape(-1, 64) / np.abs(x.reshape(-1, 64)).max(axis=1, keepdims=True)).ravel()
    codebook = nf4.build_nf4_codebook()

    cases = {
        "nf4_encode": lambda mod: mod.nf4_encode(normalized, codebook),
        "q4k_search": lambda mod: mod.q4k_search(sub, kquant.Q4K_NUMERATORS, kquant.Q4K_ITERS),
    }
    print(f"{'kernel':<12} {'backend':<8} {'elements':>10} {'best s':>9} {'Melem/s':>9} {'speedup':>8}")
    ok = True
    for name, run in cases.items():
        results = {}
        for label, mod in backends.items():
            results[label] = _best(lambda: run(mod), args.repeat)
        base = results["numpy"][0]
        for label, (t, _) in results.items():
            n = sub.size if name == "q4k_search" else normalized.size
            print(f"{name:<12} {label:<8} {n:>10} {t:>9.4f} {n / t / 1e6:>9.2f} {base / t:>7.1f}x")
        if "cython" in results:
            same = _same(results["numpy"][1], results["cython"][1])
            ok &= same
            print(f"{name:<12} outputs identical: {same}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
