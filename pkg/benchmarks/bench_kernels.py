"""Time the compiled and scipy.sparse projection kernels on the same workload.

    python3 benchmarks/bench_kernels.py [--dims 32x64x64] [--angles 20] [--repeat 5]

Both backends run MIP, sum projection and backprojection over an evenly spaced
angle grid. Outputs are cross-checked before any timing is reported.
"""
import argparse
import timeit

import numpy as np

from rand25d import kernels
from rand25d.autodiff import Tensor
from rand25d.geometry import ProjectionStack, backproject, mip_stack, sum_stack
from rand25d.pipeline import make_angle_grid


def workload(vol, angles):
    return {
        "mip": lambda: mip_stack(vol, angles).images.data,
        "sum": lambda: sum_stack(vol, angles).images.data,
        "backproject": lambda: backproject(
            ProjectionStack(angles, Tensor(np.ones((len(angles),) + vol.shape[1:], vol.dtype))), vol.shape
        ).data,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", default="32x64x64")
    ap.add_argument("--angles", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    dims = tuple(int(d) for d in args.dims.split("x"))
    vol = np.random.default_rng(0).random(dims, dtype=np.float32)
    angles = list(make_angle_grid(args.angles).angles)
    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; timing the fallback only")

    timings, outputs = {}, {}
    for name in backends:
        kernels.use(name)
        for op, fn in workload(vol, angles).items():
            outputs[name, op] = fn()  # also warms the stencil cache
            timings[name, op] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    kernels.use(backends[0])

    for op in ("mip", "sum", "backproject"):
        ref = outputs["python", op]
        for name in backends:
            np.testing.assert_allclose(outputs[name, op], ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())

    print(f"dims={args.dims} angles={len(angles)} best of {args.repeat}")
    print(f"{'op':<12}" + "".join(f"{n + ' ms':>12}" for n in backends) + ("     speedup" if len(backends) > 1 else ""))
    for op in ("mip", "sum", "backproject"):
        row = f"{op:<12}" + "".join(f"{1e3 * timings[n, op]:>12.2f}" for n in backends)
        if len(backends) > 1:
            row += f"{timings['python', op] / timings['cython', op]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
