"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--size 512] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from mvcorr import _kernels
from mvcorr.attention import AttentionWeights, cca
from mvcorr.correspondence import AttentionMask, build_correspondences
from mvcorr.geometry import relative_transform
from mvcorr.synthetic import SceneSpec, generate


def cases(scene, rng):
    b = scene.batch
    ca, cb = b.cameras[0], b.cameras[1]
    ys, xs = np.mgrid[0:b.height, 0:b.width].astype(np.float64)
    rargs = (xs.ravel(), ys.ravel(), b.depth(0), ca.intrinsics, cb.intrinsics,
             relative_transform(ca, cb), relative_transform(cb, ca), b.depth(1), 1.0, 0.05)
    g = scene.features[0].shape[0]
    query = rng.normal(size=(g * g, 16)).astype(np.float32)
    target = rng.normal(size=(g * g, 16)).astype(np.float32)
    cs, _ = build_correspondences(b, scene.features, threads=1)
    mask = AttentionMask.from_correspondences(cs)
    z = rng.normal(size=(b.n_views, g, g, 16))
    w = AttentionWeights.random(16, rng)
    return {
        "reproject (all pixels, one pair)": lambda: _kernels.reproject(*rargs),
        "cosine_argmax (all tokens)": lambda: _kernels.cosine_argmax(query, target),
        "cca (gathered attention)": lambda: cca(z, cs, mask, w),
        "build_correspondences": lambda: build_correspondences(b, scene.features, threads=1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512, help="image size in pixels (default 512)")
    ap.add_argument("--views", type=int, default=4, help="number of views (default 4)")
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is reported (default 5)")
    args = ap.parse_args()

    scene = generate(SceneSpec(kind="plane_with_occluder", n_views=args.views, size=args.size, seed=0))
    backends = _kernels.available()
    results = {}
    for name in backends:
        _kernels.use(name)
        for label, fn in cases(scene, np.random.default_rng(0)).items():
            results.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    _kernels.use(None)

    print(f"scene {args.size}x{args.size}, {args.views} views; best of {args.repeat} (ms)")
    head = f"{'kernel':36s}" + "".join(f"{n:>12s}" for n in backends)
    if len(backends) == 2:
        head += f"{'speed-up':>10s}"
    print(head)
    for label, times in results.items():
        row = f"{label:36s}" + "".join(f"{1e3 * times[n]:12.2f}" for n in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['native']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
