"""Compare the compiled and numpy convolution kernels.

Times im2col, col2im and one full ConvNet-6 training step under each backend.

    python3 benchmarks/bench_kernels.py --batch 64 --size 32 --repeats 10
"""

import argparse
import statistics
import time

import numpy as np

from dynsubnet import _kernels_py, archs, kernels, nn

try:
    from dynsubnet import _kernels as _compiled
except ImportError:
    _compiled = None


def timeit(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def use_backend(mod):
    kernels.im2col = mod.im2col
    kernels.col2im = mod.col2im


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, c, s, k = args.batch, args.channels, args.size, args.kernel
    x = rng.standard_normal((n, c, s, s)).astype(np.float32)
    cols = _kernels_py.im2col(x, k, 1, k // 2)
    model = nn.build_model(archs.convnet6(10), 10, seed=0, input_shape=(3, s, s))
    batch = (rng.standard_normal((n, 3, s, s)).astype(np.float32), rng.integers(0, 10, n))
    hyper = nn.TrainHyper(0.0, 0.0, n, 0)

    backends = [("python", _kernels_py)]
    if _compiled is not None:
        backends.append(("cython", _compiled))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    results = {}
    for name, mod in backends:
        use_backend(mod)
        results[name] = (
            timeit(lambda: mod.im2col(x, k, 1, k // 2), args.repeats),
            timeit(lambda: mod.col2im(cols, n, c, s, s, k, 1, k // 2), args.repeats),
            timeit(lambda: nn.train_step(model, batch, hyper), args.repeats),
        )
    print(f"x = {n}x{c}x{s}x{s}, kernel {k}; median of {args.repeats} runs (ms)")
    print(f"{'backend':<8} {'im2col':>10} {'col2im':>10} {'train step':>12}")
    for name, (a, b, t) in results.items():
        print(f"{name:<8} {a:>10.2f} {b:>10.2f} {t:>12.2f}")
    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        print(f"{'speedup':<8} {py[0] / cy[0]:>9.2f}x {py[1] / cy[1]:>9.2f}x {py[2] / cy[2]:>11.2f}x")


if __name__ == "__main__":
    main()
