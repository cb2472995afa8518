"""Time the compiled SSIM kernel against the numpy fallback.

    python benchmarks/bench_ssim.py --pairs 1000 --size 32 --repeat 5
"""
import argparse
import time

import numpy as np

from capgan import kernels

C1, C2 = 0.01 ** 2, 0.03 ** 2


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    shape = (args.pairs, args.size, args.size, args.channels)
    a, b = rng.uniform(size=shape), rng.uniform(size=shape)

    backends = ["numpy"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    results, outputs = {}, {}
    for name in backends:
        outputs[name] = kernels.ssim_batch(a, b, C1, C2, backend=name)
        results[name] = best_of(lambda: kernels.ssim_batch(a, b, C1, C2, backend=name),
                                args.repeat)

    print(f"SSIM, {args.pairs} pairs of {args.size}x{args.size}x{args.channels}, "
          f"best of {args.repeat}")
    for name, t in results.items():
        print(f"  {name:9s} {t * 1e3:9.2f} ms  {args.pairs / t:12.0f} pairs/s")
    if "compiled" in results:
        diff = float(np.abs(outputs["compiled"] - outputs["numpy"]).max())
        print(f"  speedup   {results['numpy'] / results['compiled']:9.2f}x  "
              f"max |compiled - numpy| = {diff:.2e}")
    else:
        print("  compiled backend not built; install with a C compiler and Cython")


if __name__ == "__main__":
    main()
