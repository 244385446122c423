"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from domgen import _kernels_py

try:
    from domgen import _kernels
except ImportError:  # extension not built
    _kernels = None


def random_boxes(rng, n, size=512.0, side=(8.0, 60.0)):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(*side, (n, 2))
    return np.ascontiguousarray(np.hstack([xy, xy + wh]))


def cases(rng):
    a = random_boxes(rng, 300)
    b = random_boxes(rng, 3000)
    boxes = random_boxes(rng, 2000, size=256.0)
    scores = rng.random(2000)
    pred = np.ascontiguousarray(rng.uniform(0, 2048, (400, 2)))
    gt = np.ascontiguousarray(rng.uniform(0, 2048, (200, 2)))
    return {
        "iou_matrix 300x3000": lambda m: m.iou_matrix(a, b),
        "nms 2000 boxes": lambda m: m.nms(boxes, scores, 0.5),
        "greedy_match 400x200": lambda m: m.greedy_match(pred, gt, 30.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':24s} " + " ".join(f"{k:>12s}" for k in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        times = {}
        for label, mod in backends.items():
            fn(mod)  # warm-up
            times[label] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{name:24s} " + " ".join(f"{times[k] * 1e3:10.3f}ms" for k in backends)
        if len(backends) > 1:
            row += f"  {times['python'] / times['cython']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
