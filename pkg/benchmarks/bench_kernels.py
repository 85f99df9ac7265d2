"""Benchmark the compiled interpolation kernels against the numpy fallback.

The gather / scatter pair is the hot inner loop of rendering: every ray
sample reads 8 weighted grid corners forward and scatters its adjoint
back.  Run:

    python benchmarks/bench_kernels.py

Sizes mimic the distillation workload (32-cube grid, 16 channels, one
64x64 render at 24 samples per ray and a 4-camera minibatch at 64
samples).  A render-loop comparison at the end times a full
differentiable render + backward on both backends.
"""

import sys
import time

import numpy as np


def _time(fn, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels():
    from voxeldiff.kernels import _native, _numpy

    backends = [("native", _native), ("numpy", _numpy)]
    rng = np.random.default_rng(0)
    cases = [
        ("64x64 render, N=24", 64 * 64 * 24, 16, 32**3),
        ("4x 64x64 render, N=64", 4 * 64 * 64 * 64, 16, 32**3),
    ]
    print(f"{'case':26s} {'op':10s} " + " ".join(f"{n:>10s}" for n, _ in backends) + "   speedup")
    for label, p, c, m in cases:
        values = np.ascontiguousarray(rng.standard_normal((c, m)))
        idx = np.ascontiguousarray(rng.integers(0, m, size=(p, 8)), dtype=np.int64)
        weights = np.ascontiguousarray(rng.random((p, 8)))
        grad = np.ascontiguousarray(rng.standard_normal((p, c)))
        for op, args in [
            ("gather", (values, idx, weights)),
            ("scatter", (grad, idx, weights, m)),
            ("gather_dot", (values, idx, grad)),
        ]:
            times = []
            for _name, impl in backends:
                times.append(_time(lambda impl=impl: getattr(impl, op)(*args)))
            speedup = times[1] / times[0]
            print(f"{label:26s} {op:10s} "
                  + " ".join(f"{t * 1e3:9.1f}ms" for t in times)
                  + f"   {speedup:5.1f}x")


def bench_render():
    import voxeldiff.tensor as T
    from voxeldiff import kernels
    from voxeldiff.field import FieldDecoder, VoxelGrid
    from voxeldiff.render import RenderConfig, precompute_rays, render
    from voxeldiff.scenes import ring_cameras
    from voxeldiff.tensor import Tensor

    rng = np.random.default_rng(1)
    grid = VoxelGrid(32, 16, Tensor(0.1 * rng.standard_normal((16, 32, 32, 32))))
    grid.features.requires_grad = True
    decoder = FieldDecoder(16, hidden=(16,), rng=np.random.default_rng(2))
    cam = ring_cameras(1, 2.8, 0.0, 64)[0]
    cfg = RenderConfig(samples_per_ray=24)
    bundle = precompute_rays(grid, cam, cfg)
    target = rng.random((64, 64, 3))

    def step():
        grid.features.zero_grad()
        out = render(grid, decoder, cam, cfg, bundle=bundle)
        diff = T.sub(out.image_t, Tensor(target))
        T.mean(T.mul(diff, diff)).backward()

    t = _time(step, repeats=5)
    print(f"\nfull render+backward (64x64, N=24, 32-cube grid) "
          f"[{kernels.BACKEND} backend]: {t * 1e3:.0f} ms")


if __name__ == "__main__":
    try:
        from voxeldiff.kernels import _native  # noqa: F401
    except ImportError:
        print("compiled kernels not built; run pip install -e . first", file=sys.stderr)
        raise SystemExit(1)
    bench_kernels()
    bench_render()
    print("\nre-run with VOXELDIFF_NO_NATIVE=1 to time the full loop on the fallback")
