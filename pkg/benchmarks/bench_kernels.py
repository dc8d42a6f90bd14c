"""Time the compiled and numpy kernel backends on EM-GS-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json]
"""
import argparse
import json
import timeit

import numpy as np

from raqr import kernels


def cases(rng):
    kap = 10.0 ** rng.uniform(-2, 4, size=(32, 20))
    kap_big = 10.0 ** rng.uniform(-2, 4, size=(256, 32, 20))
    z = np.abs(rng.standard_normal((32, 20)))
    y = rng.standard_normal((32, 20)) + 1j * rng.standard_normal((32, 20))
    return {
        "bessel_ratio 32x20": lambda k: k.bessel_ratio(kap),
        "bessel_ratio 256x32x20": lambda k: k.bessel_ratio(kap_big),
        "phase_reconstruct gs": lambda k: k.phase_reconstruct(z, y, 0.1, False),
        "phase_reconstruct emgs": lambda k: k.phase_reconstruct(z, y, 0.1, True),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    backends = kernels.backends()
    rng = np.random.default_rng(0)
    results = []
    for name, fn in cases(rng).items():
        row = {"case": name}
        for bname, mod in backends.items():
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            best = min(timer.repeat(repeat=args.repeat, number=number)) / number
            row[bname] = best * 1e6
        results.append(row)

    if args.json:
        print(json.dumps(results, indent=2))
        return
    names = list(backends)
    print(f"{'case':28s}" + "".join(f"{n + ' (us)':>16s}" for n in names) + "   speedup")
    for row in results:
        line = f"{row['case']:28s}" + "".join(f"{row[n]:16.1f}" for n in names)
        if "cython" in row:
            line += f"   {row['python'] / row['cython']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
