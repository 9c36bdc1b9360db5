"""Benchmark the numba kernels against the pure-numpy fallback.

Times the three hot paths (scoring forward, training forward with cached
intermediates, training backward) over a range of pair-batch sizes and
prints per-pair throughput plus the numba speedup. Run from the repo root:

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --batches 1000,6000 --dim 128
"""

import argparse
import time

import numpy as np

from reda import kernels, model


def build_params(args):
    hp = model.HyperParams(dim=args.dim, aspects=args.aspects,
                           mem_slices=args.mem_slices, hidden=args.hidden)
    return model.init_params(args.items, hp, np.random.default_rng(0))


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batches", default="500,2000,6000",
                    help="comma-separated pair-batch sizes")
    ap.add_argument("--items", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--aspects", type=int, default=2)
    ap.add_argument("--mem-slices", type=int, default=10)
    ap.add_argument("--hidden", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    params = build_params(args)
    backends = kernels.available_backends()
    if backends == ["numpy"]:
        print("numba unavailable; timing the numpy backend only")
    rng = np.random.default_rng(1)

    print(f"model: items={args.items} dim={args.dim} aspects={args.aspects} "
          f"mem_slices={args.mem_slices} hidden={args.hidden}")
    header = f"{'op':18s} {'batch':>7s}" + "".join(
        f" {name + ' (us/pair)':>18s}" for name in backends)
    if len(backends) > 1:
        header += f" {'speedup':>9s}"
    print(header)

    for batch in (int(b) for b in args.batches.split(",")):
        ii = rng.integers(args.items, size=batch).astype(np.int64)
        jj = rng.integers(args.items, size=batch).astype(np.int64)
        GR = rng.normal(size=(batch, args.dim))

        rows = {}
        for name in backends:
            be = kernels.get_backend(name)
            kernels.relation_embeddings(params, ii[:8], jj[:8], backend=be)  # warm JIT

            fwd = bench(lambda: kernels.relation_embeddings(params, ii, jj, backend=be),
                        args.repeats)
            cache = kernels.forward_cache(params, ii, jj, backend=be)
            cached = bench(lambda: kernels.forward_cache(params, ii, jj, backend=be),
                           args.repeats)
            bwd = bench(lambda: kernels.backward_from_cache(params, cache, GR, backend=be),
                        args.repeats)
            rows[name] = {"score fwd": fwd, "train fwd": cached, "train bwd": bwd}

        for op in ("score fwd", "train fwd", "train bwd"):
            line = f"{op:18s} {batch:>7d}"
            for name in backends:
                line += f" {rows[name][op] / batch * 1e6:>18.3f}"
            if len(backends) > 1:
                line += f" {rows['numpy'][op] / rows['numba'][op]:>8.1f}x"
            print(line)


if __name__ == "__main__":
    main()
