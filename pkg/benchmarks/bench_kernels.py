"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from xltavg import _kernels_py

try:
    from xltavg import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def cases(mod):
    out = np.empty(1 << 20, dtype=np.uint64)
    items = np.arange(100_000, dtype=np.int64)
    acc = np.zeros(1 << 20)
    x32 = np.ones(1 << 20, dtype=np.float32)
    return {
        "splitmix64_fill 1M": lambda: mod.splitmix64_fill(42, out),
        "fisher_yates 100k": lambda: mod.fisher_yates(items, 42),
        "accumulate f32 1M": lambda: mod.accumulate(acc, x32),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=3)
    args = parser.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    results = {}
    for backend, mod in backends.items():
        for name, fn in cases(mod).items():
            best = min(timeit.repeat(fn, repeat=args.repeat, number=args.number)) / args.number
            results.setdefault(name, {})[backend] = best

    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, row in results.items():
        line = f"{name:<22}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in row:
            line += f"{row['python'] / row['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
