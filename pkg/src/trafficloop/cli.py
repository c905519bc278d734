"""Command-line entry points: run, synth, extract, train, eval, bench."""

from __future__ import annotations

import argparse
import sys
from collections import Counter

import numpy as np

from . import harness
from .core import ClassLabel
from .errors import TrafficLoopError
from .features import DEFAULT_WINDOW, extract_all, read_features, write_features
from .forest import Dataset, TrainParams, backend_name, evaluate, load_model, save_model, set_backend
from .pcap_io import DEFAULT_PROFILES, iter_synth, load_pcap, load_sidecar, profile_by_name, save_pcap, save_sidecar


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    report = harness.run(cfg)
    sys.stdout.write(report.to_text())
    return 0 if report.conservation_ok else 1


def _cmd_synth(args) -> int:
    if args.profile.lower() in ("mix", "all"):
        mix = [(DEFAULT_PROFILES[label], args.flows) for label in ClassLabel]
    else:
        mix = [(profile_by_name(args.profile), args.flows)]
    packets, sidecar = iter_synth(mix, args.duration, args.seed)
    packets = list(packets)
    save_pcap(args.out, packets)
    save_sidecar(args.labels, sidecar)
    print(f"wrote {len(packets)} packets in {len(sidecar)} flows to {args.out}")
    return 0


def _labelled(pcap: str, labels: str, window: int):
    truth = load_sidecar(labels)
    vectors = [fv for fv in extract_all(load_pcap(pcap), window) if fv.flow in truth]
    return vectors, truth


def _cmd_extract(args) -> int:
    vectors, truth = _labelled(args.pcap, args.labels, args.window)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_features(fh, vectors, truth)
    print(f"wrote {len(vectors)} labelled windows to {args.out}")
    return 0


def load_training_csv(path: str) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = read_features(fh)
    if rows and rows[0][1] is None:
        raise TrafficLoopError(f"{path} has no label column")
    return Dataset([fv.values for fv, _ in rows], [int(ClassLabel.parse(lab)) for _, lab in rows])


def _cmd_train(args) -> int:
    data = load_training_csv(args.data)
    params = TrainParams(
        max_depth=args.max_depth, n_trees=args.n_trees, seed=args.seed, bootstrap=args.kind == "rf"
    )
    model = harness.train_model(args.kind, data, params)
    save_model(args.out, model, args.version)
    print(f"trained {args.kind} on {len(data)} rows -> {args.out} (version {args.version})")
    return 0


def _print_eval(accuracy: float, confusion, n: int) -> None:
    print(f"windows   {n}")
    print(f"accuracy  {accuracy:.6f}")
    print("confusion (rows true, cols predicted: AR CG other)")
    for i, row in enumerate(confusion):
        print(f"  {ClassLabel(i).text:<6}" + "".join(f"{c:>9}" for c in row))


def _cmd_eval(args) -> int:
    model, version = load_model(args.model)
    if args.data:
        data = load_training_csv(args.data)
        X, y = data.X, data.y
    else:
        vectors, truth = _labelled(args.pcap, args.labels, args.window)
        X = np.array([fv.values for fv in vectors]).reshape(-1, 8)
        y = np.array([int(truth[fv.flow]) for fv in vectors], dtype=np.int64)
    accuracy, confusion = evaluate(model, X, y)
    print(f"model     version {version}")
    _print_eval(accuracy, confusion, len(y))
    return 0


def _cmd_bench(args) -> int:
    if args.backend:
        set_backend(args.backend)
    skipped: Counter = Counter()
    packets = load_pcap(args.pcap, skipped)
    if args.model:
        model, _ = load_model(args.model)
    else:
        X, y = harness.labelled_windows(300, seed=0, window=args.window)
        model = harness.train_model("rf", Dataset(X, y), TrainParams())
    result = harness.bench(packets, model, args.window, args.workers)
    print(f"backend   {backend_name()}")
    for k, v in result.items():
        print(f"{k:<9} {v:,.1f}" if isinstance(v, float) else f"{k:<9} {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trafficloop", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the closed loop from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synth", help="generate a labelled synthetic pcap")
    p.add_argument("--profile", required=True, help="AR, CG, other or mix")
    p.add_argument("--flows", type=int, required=True)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract", help="dump labelled window features of a pcap to CSV")
    p.add_argument("--pcap", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="train a model envelope from a labelled feature CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("dt", "rf"), default="rf")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-trees", type=int, default=20)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--version", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate an envelope on a pcap + sidecar or a labelled CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--pcap")
    p.add_argument("--labels")
    p.add_argument("--data")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="classifier throughput over pre-parsed packets")
    p.add_argument("--pcap", required=True)
    p.add_argument("--model")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--backend", choices=("compiled", "python"))
    p.set_defaults(func=_cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and not args.data and not (args.pcap and args.labels):
        print("error: eval needs --data, or --pcap with --labels", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (TrafficLoopError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
