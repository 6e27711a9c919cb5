"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json]
"""
import argparse
import json
import timeit

import numpy as np

from rotdet import _backend


def _boxes(rng, n, lo=0.0, hi=64.0):
    return np.c_[rng.uniform(lo, hi, (n, 2)), rng.uniform(4, 20, (n, 2)), rng.uniform(-np.pi / 2, np.pi / 2, n)]


def cases(seed=0):
    rng = np.random.default_rng(seed)
    a, b = _boxes(rng, 100), _boxes(rng, 30)
    cost = rng.uniform(size=(100, 30))
    feats = rng.standard_normal((32, 64, 64))
    rois = _boxes(rng, 100, 16, 48)
    grad = rng.standard_normal((100, 32, 7, 7))
    return {
        "pairwise_iou 100x30": lambda k: k.pairwise_iou(a, b),
        "linear_assignment 100x30": lambda k: k.linear_assignment(cost),
        "roi_align 100 boxes, C=32, K=7": lambda k: k.roi_align_rotated(feats, rois, 7, 1),
        "roi_align_backward 100 boxes": lambda k: k.roi_align_rotated_backward(grad, rois, feats.shape, 1),
    }


def run(repeat):
    rows = []
    for name, fn in cases().items():
        row = {"case": name}
        for backend in _backend.available():
            k = _backend.get(backend)
            fn(k)  # warm-up
            row[backend] = min(timeit.repeat(lambda: fn(k), number=1, repeat=repeat))
        if "compiled" in row:
            row["speedup"] = row["python"] / row["compiled"]
        rows.append(row)
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true", help="print machine-readable results")
    args = parser.parse_args(argv)
    rows = run(args.repeat)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'case':34s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for r in rows:
        comp = f"{r['compiled'] * 1e3:8.2f}ms" if "compiled" in r else "       n/a"
        speed = f"{r['speedup']:7.1f}x" if "speedup" in r else "     n/a"
        print(f"{r['case']:34s} {r['python'] * 1e3:8.2f}ms {comp} {speed}")


if __name__ == "__main__":
    main()
