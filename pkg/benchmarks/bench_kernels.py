"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--rows-per-class 1500] [--repeat 3]
"""

import argparse
import time

import numpy as np

from trafficloop.forest import Dataset, TrainParams, predict, predict_batch, set_backend, train_forest
from trafficloop.forest.kernels import BACKENDS
from trafficloop.harness import bench, labelled_windows
from trafficloop.pcap_io import synth_mix


def best_of(repeat, fn):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows-per-class", type=int, default=1500)
    ap.add_argument("--predictions", type=int, default=20_000)
    ap.add_argument("--flows", type=int, default=10)
    ap.add_argument("--duration", type=float, default=10.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    X, y = labelled_windows(args.rows_per_class, 1)
    data = Dataset(X, y)
    probe = X[np.random.default_rng(0).integers(0, len(X), args.predictions)]
    packets, _ = synth_mix(args.flows, args.duration, 2)
    print(f"{len(X)} training rows, {args.predictions} predictions, {len(packets)} packets")

    results = {}
    reference = None
    for name in BACKENDS:
        set_backend(name)
        train_s = best_of(args.repeat, lambda: train_forest(data, TrainParams(seed=3)))
        model = train_forest(data, TrainParams(seed=3))
        if reference is None:
            reference = model
        assert model == reference, "backends grew different forests"
        single_s = best_of(args.repeat, lambda: [predict(model, x) for x in probe])
        batch_s = best_of(args.repeat, lambda: predict_batch(model, probe))
        pps = max(bench(packets, model)["pkts_per_s"] for _ in range(args.repeat))
        results[name] = (train_s, 1e6 * single_s / len(probe), 1e6 * batch_s / len(probe), pps)

    print(f"{'backend':<10}{'train s':>10}{'predict us':>12}{'batch us':>10}{'packets/s':>12}")
    for name, (tr, single, batch, pps) in results.items():
        print(f"{name:<10}{tr:>10.3f}{single:>12.2f}{batch:>10.2f}{pps:>12,.0f}")
    if len(results) == 2:
        c, p = results["compiled"], results["python"]
        print(f"speedup   {p[0] / c[0]:>10.1f}{p[1] / c[1]:>12.1f}{p[2] / c[2]:>10.1f}{c[3] / p[3]:>12.1f}")


if __name__ == "__main__":
    main()
