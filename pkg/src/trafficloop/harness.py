"""Assemble pool -> classifier -> servers -> trainer into one run and report on it.

Time inside a run is trace time (packet timestamps). The trainer is stepped
every ``tick_s`` of trace time: feature batches and due labels are ingested,
the retrain policy is consulted and any new envelope is swapped in before
the next packet is classified. With one worker and ``speed_factor = 0`` the
decision stream is therefore a pure function of the configuration; with
several workers only latency and throughput vary.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .core import ClassLabel, FlowKey, Packet
from .errors import ConfigError
from .features import DEFAULT_WINDOW, extract_all
from .forest import Dataset, Model, TrainParams, load_model, train_forest, train_tree
from .oracle import LabelOracle
from .pcap_io import DEFAULT_PROFILES, Drift, TrafficProfile, iter_synth, load_pcap, load_sidecar, replay
from .pipeline import ModelHandle, RouteDecision, ShardedPipeline, SinkId, write_decision_log
from .trainer import OnlineTrainer, RetrainPolicy


@dataclass
class RunConfig:
    # input: either pcap + labels, or synthetic traffic
    pcap: Optional[str] = None
    labels: Optional[str] = None
    flows_per_profile: int = 20
    duration_s: float = 30.0
    synth_seed: int = 1
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    drifts: dict = field(default_factory=dict)
    # extractor
    window: int = DEFAULT_WINDOW
    idle_timeout_s: float = 30.0
    # model
    kind: str = "rf"
    params: TrainParams = TrainParams()
    initial_model: Optional[str] = None
    warmup_fraction: float = 0.2
    # trainer
    retrain: bool = True
    policy: RetrainPolicy = RetrainPolicy()
    label_ttl_s: float = 60.0
    replay_capacity: int = 5000
    # application servers
    label_latency_s: float = 0.0
    label_reemit_s: Optional[float] = None
    # execution
    seed: int = 0
    speed_factor: float = 0.0
    workers: int = 1
    tick_s: float = 0.5
    # outputs
    report_text: Optional[str] = None
    report_kv: Optional[str] = None
    decision_log: Optional[str] = None

    def validate(self) -> None:
        if (self.pcap is None) != (self.labels is None):
            raise ConfigError("pcap input needs both 'pcap' and 'labels'")
        for path in (self.pcap, self.labels, self.initial_model):
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"file not found: {path}")
        if self.kind not in ("dt", "rf"):
            raise ConfigError(f"model kind must be dt or rf, not {self.kind!r}")
        if self.window < 1 or self.workers < 1 or self.tick_s <= 0 or self.idle_timeout_s <= 0:
            raise ConfigError("window, workers, tick_s and idle_timeout_s must be positive")
        if not 0 < self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must be in (0, 1]")
        if self.speed_factor < 0 or self.label_latency_s < 0:
            raise ConfigError("speed_factor and latency must be >= 0")


_TRUE = {"1", "on", "yes", "true"}


def _profile_from_section(base: TrafficProfile, sec) -> TrafficProfile:
    changes = {}
    for f in dataclasses.fields(TrafficProfile):
        if f.name == "label" or f.name not in sec:
            continue
        raw = sec[f.name]
        if f.name == "rtp":
            changes[f.name] = raw.strip().lower() in _TRUE
        elif f.name == "mtu_payload_bytes":
            changes[f.name] = int(raw)
        else:
            changes[f.name] = float(raw)
    return base.with_changes(**changes)


def load_config(path: str) -> RunConfig:
    """Parse an INI run configuration; relative paths resolve against the file's directory."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    base = os.path.dirname(os.path.abspath(path))
    try:
        return _from_parser(cp, base)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def _opt(sec, key, conv, default):
    if sec is None or key not in sec or sec[key].strip() == "":
        return default
    return conv(sec[key].strip())


def _from_parser(cp: configparser.ConfigParser, base: str) -> RunConfig:
    known = {"input", "synth", "extractor", "model", "policy", "labels", "run", "report"}
    for name in cp.sections():
        if name not in known and not name.startswith("profile."):
            raise ConfigError(f"unknown config section [{name}]")
    g = lambda name: cp[name] if cp.has_section(name) else None  # noqa: E731
    path = lambda p: p if os.path.isabs(p) else os.path.join(base, p)  # noqa: E731
    boolean = lambda s: s.lower() in _TRUE  # noqa: E731
    cfg = RunConfig()

    inp = g("input")
    source = _opt(inp, "source", str, "synth")
    if source == "pcap":
        cfg.pcap = path(_opt(inp, "pcap", str, ""))
        cfg.labels = path(_opt(inp, "labels", str, ""))
    elif source != "synth":
        raise ConfigError("[input] source must be 'synth' or 'pcap'")

    syn = g("synth")
    cfg.flows_per_profile = _opt(syn, "flows_per_profile", int, cfg.flows_per_profile)
    cfg.duration_s = _opt(syn, "duration_s", float, cfg.duration_s)
    run_sec = g("run")
    cfg.seed = _opt(run_sec, "seed", int, cfg.seed)
    cfg.synth_seed = _opt(syn, "seed", int, cfg.seed)
    for name in cp.sections():
        if name.startswith("profile."):
            label = ClassLabel.parse(name.split(".", 1)[1])
            cfg.profiles[label] = _profile_from_section(cfg.profiles[label], cp[name])
    drift_label = _opt(syn, "drift_label", str, None)
    if drift_label:
        label = ClassLabel.parse(drift_label)
        before = cfg.profiles[label]
        after = before.with_changes(
            frame_rate_hz=_opt(syn, "drift_frame_rate_hz", float, before.frame_rate_hz),
            frame_size_mean_bytes=_opt(syn, "drift_frame_size_mean", float, before.frame_size_mean_bytes),
            frame_size_std_bytes=_opt(syn, "drift_frame_size_std", float, before.frame_size_std_bytes),
        )
        cfg.drifts = {label: Drift(_opt(syn, "drift_at_s", float, cfg.duration_s / 2), after)}

    ext = g("extractor")
    cfg.window = _opt(ext, "window", int, cfg.window)
    cfg.idle_timeout_s = _opt(ext, "idle_timeout_s", float, cfg.idle_timeout_s)

    m = g("model")
    cfg.kind = _opt(m, "kind", str, cfg.kind)
    defaults = TrainParams()
    max_depth = _opt(m, "max_depth", str, str(defaults.max_depth))
    cfg.params = TrainParams(
        max_depth=None if max_depth.lower() == "none" else int(max_depth),
        min_samples_split=_opt(m, "min_samples_split", int, defaults.min_samples_split),
        n_trees=_opt(m, "n_trees", int, defaults.n_trees),
        features_per_split=_opt(m, "features_per_split", int, defaults.features_per_split),
        bootstrap=_opt(m, "bootstrap", boolean, cfg.kind == "rf"),
        seed=_opt(m, "seed", int, cfg.seed),
    )
    cfg.initial_model = _opt(m, "initial", path, None)
    cfg.warmup_fraction = _opt(m, "warmup_fraction", float, cfg.warmup_fraction)

    pol = g("policy")
    dp = RetrainPolicy()
    cfg.retrain = _opt(pol, "enabled", boolean, True)
    cfg.policy = RetrainPolicy(
        min_new_samples=_opt(pol, "min_new_samples", int, dp.min_new_samples),
        accuracy_floor=_opt(pol, "accuracy_floor", float, dp.accuracy_floor),
        accuracy_window=_opt(pol, "accuracy_window", int, dp.accuracy_window),
        min_interval_s=_opt(pol, "min_interval_s", float, dp.min_interval_s),
        recency_weight=_opt(pol, "recency_weight", int, dp.recency_weight),
    )
    cfg.label_ttl_s = _opt(pol, "label_ttl_s", float, cfg.label_ttl_s)
    cfg.replay_capacity = _opt(pol, "replay_capacity", int, cfg.replay_capacity)

    lab = g("labels")
    cfg.label_latency_s = _opt(lab, "latency_s", float, cfg.label_latency_s)
    cfg.label_reemit_s = _opt(lab, "reemit_s", float, None)

    cfg.speed_factor = _opt(run_sec, "speed_factor", float, cfg.speed_factor)
    cfg.workers = _opt(run_sec, "workers", int, cfg.workers)
    cfg.tick_s = _opt(run_sec, "tick_s", float, cfg.tick_s)

    rep = g("report")
    cfg.report_text = _opt(rep, "text", path, None)
    cfg.report_kv = _opt(rep, "kv", path, None)
    cfg.decision_log = _opt(rep, "decision_log", path, None)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# report

@dataclass
class TimelineEntry:
    version: int
    wall_time_s: float
    trace_time_s: float
    reason: str
    post_swap_accuracy: Optional[float] = None


@dataclass
class MetricsReport:
    packets_in: int = 0
    delivered: dict = field(default_factory=lambda: {s.name: 0 for s in SinkId})
    drops: int = 0
    reader_drops: int = 0
    pre_decision: int = 0
    windows_classified: int = 0
    accuracy: Optional[float] = None
    accuracy_by_version: dict = field(default_factory=dict)
    confusion: list = field(default_factory=lambda: [[0] * 3 for _ in range(3)])
    throughput_pps: float = 0.0
    latency_mean_us: float = 0.0
    latency_p95_us: float = 0.0
    timeline: list = field(default_factory=list)
    misrouted_packets: int = 0
    misroute_records: int = 0
    unknown_flow_packets: int = 0
    label_emissions: int = 0
    joined_samples: int = 0
    expired_features: int = 0
    batches_dropped: int = 0
    # not written to the key/value file
    decisions: list = field(default_factory=list, repr=False)
    moving_accuracy_trace: list = field(default_factory=list, repr=False)

    @property
    def conservation_ok(self) -> bool:
        return self.packets_in == sum(self.delivered.values()) + self.drops

    def decision_fields(self) -> dict:
        """The fields that must be identical between runs of the same configuration."""
        return {
            "accuracy": self.accuracy,
            "accuracy_by_version": self.accuracy_by_version,
            "confusion": self.confusion,
            "decisions": self.decisions,
            "timeline": [(t.version, t.trace_time_s, t.reason, t.post_swap_accuracy) for t in self.timeline],
            "windows_classified": self.windows_classified,
            "delivered": self.delivered,
            "pre_decision": self.pre_decision,
            "misrouted_packets": self.misrouted_packets,
        }

    def key_values(self) -> list[tuple[str, object]]:
        kv: list[tuple[str, object]] = [("packets_in", self.packets_in)]
        kv += [(f"delivered.{k}", v) for k, v in self.delivered.items()]
        kv += [
            ("drops", self.drops), ("reader_drops", self.reader_drops),
            ("pre_decision", self.pre_decision), ("windows_classified", self.windows_classified),
            ("accuracy", self.accuracy),
        ]
        kv += [(f"accuracy.v{v}", a) for v, a in sorted(self.accuracy_by_version.items())]
        kv += [(f"confusion.{ClassLabel(i).text}.{ClassLabel(j).text}", self.confusion[i][j])
               for i in range(3) for j in range(3)]
        kv += [
            ("throughput_pps", round(self.throughput_pps, 1)),
            ("latency_mean_us", round(self.latency_mean_us, 3)),
            ("latency_p95_us", round(self.latency_p95_us, 3)),
            ("misrouted_packets", self.misrouted_packets), ("misroute_records", self.misroute_records),
            ("unknown_flow_packets", self.unknown_flow_packets), ("label_emissions", self.label_emissions),
            ("joined_samples", self.joined_samples), ("expired_features", self.expired_features),
            ("batches_dropped", self.batches_dropped), ("conservation_ok", self.conservation_ok),
            ("model_versions", len(self.timeline)),
        ]
        for i, t in enumerate(self.timeline):
            kv += [
                (f"timeline.{i}.version", t.version),
                (f"timeline.{i}.wall_time_s", round(t.wall_time_s, 3)),
                (f"timeline.{i}.trace_time_s", t.trace_time_s),
                (f"timeline.{i}.reason", t.reason),
                (f"timeline.{i}.post_swap_accuracy", t.post_swap_accuracy),
            ]
        return kv

    def to_kv(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in self.key_values())

    def to_text(self) -> str:
        pct = lambda a: "n/a" if a is None else f"{100 * a:.2f}%"  # noqa: E731
        lines = [
            "traffic classifier run report",
            "=============================",
            f"packets in          {self.packets_in}",
            "delivered           " + ", ".join(f"{k}={v}" for k, v in self.delivered.items()),
            f"drops               {self.drops} (reader skipped {self.reader_drops})",
            f"pre-decision        {self.pre_decision}",
            f"conservation        {'ok' if self.conservation_ok else 'VIOLATED'}",
            f"windows classified  {self.windows_classified}",
            f"accuracy            {pct(self.accuracy)}",
        ]
        for v, a in sorted(self.accuracy_by_version.items()):
            lines.append(f"  model v{v:<4}       {pct(a)}")
        lines.append("confusion (rows true, cols predicted: AR CG other)")
        for i, row in enumerate(self.confusion):
            lines.append(f"  {ClassLabel(i).text:<6}" + "".join(f"{c:>9}" for c in row))
        lines += [
            f"throughput          {self.throughput_pps:,.0f} pkts/s",
            f"latency             mean {self.latency_mean_us:.2f} us, p95 {self.latency_p95_us:.2f} us",
            f"misrouted packets   {self.misrouted_packets} in {self.misroute_records} records",
            f"unknown-flow pkts   {self.unknown_flow_packets}",
            f"label emissions     {self.label_emissions}, joined samples {self.joined_samples}",
            "model timeline:",
        ]
        for t in self.timeline:
            lines.append(
                f"  v{t.version:<4} trace {t.trace_time_s:9.3f} s  wall {t.wall_time_s:8.3f} s  "
                f"{t.reason:<12} post-swap accuracy {pct(t.post_swap_accuracy)}"
            )
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# running

def _packet_source(cfg: RunConfig) -> tuple[Callable[[], Iterable[Packet]], dict[FlowKey, ClassLabel], int]:
    if cfg.pcap is not None:
        skipped: Counter = Counter()
        packets = load_pcap(cfg.pcap, skipped)
        truth = load_sidecar(cfg.labels)
        return (lambda: packets), truth, sum(skipped.values())
    mix = [(cfg.profiles[label], cfg.flows_per_profile) for label in ClassLabel]
    _, sidecar = iter_synth(mix, cfg.duration_s, cfg.synth_seed, cfg.drifts)
    return (lambda: iter_synth(mix, cfg.duration_s, cfg.synth_seed, cfg.drifts)[0]), dict(sidecar), 0


def train_model(kind: str, data: Dataset, params: TrainParams) -> Model:
    if kind == "dt":
        return train_tree(data, params)
    return train_forest(data, params)


def warmup_model(cfg: RunConfig, packets: Iterable[Packet], truth: dict) -> Optional[Model]:
    """Train on the first ``warmup_fraction`` of the labelled windows of the input."""
    labelled = [fv for fv in extract_all(packets, cfg.window) if fv.flow in truth]
    n = math.ceil(cfg.warmup_fraction * len(labelled))
    if n == 0:
        return None
    head = labelled[:n]
    data = Dataset([fv.values for fv in head], [int(truth[fv.flow]) for fv in head])
    return train_model(cfg.kind, data, cfg.params)


def _accuracy_fields(decisions: list[RouteDecision], truth: dict, k: int):
    confusion = [[0] * 3 for _ in range(3)]
    per_version: dict[int, list[int]] = {}
    first_k: dict[int, list[int]] = {}
    for d in decisions:
        true = truth.get(d.flow)
        if true is None:
            continue
        confusion[true][d.label] += 1
        ok = int(true == d.label)
        per_version.setdefault(d.model_version, [0, 0])
        per_version[d.model_version][0] += ok
        per_version[d.model_version][1] += 1
        fk = first_k.setdefault(d.model_version, [0, 0])
        if fk[1] < k:
            fk[0] += ok
            fk[1] += 1
    total = sum(map(sum, confusion))
    accuracy = sum(confusion[i][i] for i in range(3)) / total if total else None
    by_version = {v: c / n for v, (c, n) in per_version.items()}
    post_swap = {v: c / n for v, (c, n) in first_k.items()}
    return accuracy, by_version, confusion, post_swap


def run(cfg: RunConfig) -> MetricsReport:
    cfg.validate()
    wall0 = time.perf_counter()
    source, truth, reader_drops = _packet_source(cfg)

    if cfg.initial_model is not None:
        model, version = load_model(cfg.initial_model)
        initial_reason = "loaded"
    else:
        model, version, initial_reason = warmup_model(cfg, source(), truth), 1, "warmup"

    pipeline = ShardedPipeline(cfg.window, cfg.workers, batch_queue_size=1 << 16)
    if model is not None:
        pipeline.start(ModelHandle(version, model))
    oracle = LabelOracle(
        truth,
        latency_us=round(cfg.label_latency_s * 1e6),
        reemit_every_us=None if cfg.label_reemit_s is None else round(cfg.label_reemit_s * 1e6),
    )
    trainer = OnlineTrainer(
        cfg.params, cfg.policy, cfg.kind, version,
        label_ttl_us=round(cfg.label_ttl_s * 1e6), replay_capacity=cfg.replay_capacity, seed=cfg.seed,
    )
    report = MetricsReport(reader_drops=reader_drops)
    timeline = [] if model is None else [TimelineEntry(version, time.perf_counter() - wall0, 0.0, initial_reason)]
    decisions: list[RouteDecision] = []
    latencies: list[int] = []
    busy = [0.0]
    tick_us = round(cfg.tick_s * 1e6)
    idle_us = round(cfg.idle_timeout_s * 1e6)
    chunk: list[Packet] = []
    clock = {"t0": None, "next_tick": None}

    def timer(fn, p):
        t = time.perf_counter_ns()
        r = fn(p)
        latencies.append(time.perf_counter_ns() - t)
        return r

    def process_chunk() -> None:
        if not chunk:
            return
        t = time.perf_counter()
        routings = pipeline.route_batch(chunk, timer)
        busy[0] += time.perf_counter() - t
        for p, r in zip(chunk, routings):
            if r.sink is None:
                continue
            oracle.verify_and_label(p, r.sink, r.pre_decision)
            if r.decision is not None:
                decisions.append(r.decision)
        chunk.clear()

    def trainer_step(now_us: int) -> None:
        items = pipeline.drain_batches()
        trainer.ingest(items, oracle.due(now_us), now_us)
        trace_s = (now_us - clock["t0"]) / 1e6
        report.moving_accuracy_trace.append((trace_s, trainer.moving_accuracy))
        if cfg.retrain:
            res = trainer.maybe_retrain(now_us)
            if res is not None:
                envelope, reason = res
                new_version = pipeline.swap_model(envelope)
                timeline.append(TimelineEntry(new_version, time.perf_counter() - wall0, trace_s, reason))
        pipeline.flush_expired(now_us, idle_us)

    def sink(p: Packet) -> None:
        if clock["t0"] is None:
            clock["t0"] = p.ts_us
            clock["next_tick"] = p.ts_us + tick_us
            trainer.last_retrain_us = p.ts_us
        while p.ts_us >= clock["next_tick"]:
            process_chunk()
            trainer_step(clock["next_tick"])
            clock["next_tick"] += tick_us
        chunk.append(p)

    try:
        if model is None and _nonempty(source()):
            raise ConfigError("warmup produced no labelled windows; supply [model] initial")
        replay(source(), cfg.speed_factor, sink)
        process_chunk()
        if clock["t0"] is not None:
            trainer_step(clock["next_tick"])
    finally:
        pipeline.close()

    counters = pipeline.counters
    report.packets_in = counters["packets_in"]
    report.delivered = {s.name: n for s, n in zip(SinkId, pipeline.delivered)}
    report.drops = counters["drops"]
    report.pre_decision = counters["pre_decision"]
    report.windows_classified = counters["windows"]
    report.batches_dropped = counters["batches_dropped"]
    report.decisions = decisions
    acc, by_version, confusion, post_swap = _accuracy_fields(decisions, truth, cfg.policy.accuracy_window)
    report.accuracy, report.accuracy_by_version, report.confusion = acc, by_version, confusion
    for t in timeline:
        t.post_swap_accuracy = post_swap.get(t.version)
    report.timeline = timeline
    if latencies:
        lat = np.asarray(latencies, dtype=np.float64) / 1e3
        report.latency_mean_us = float(lat.mean())
        report.latency_p95_us = float(np.percentile(lat, 95))
    report.throughput_pps = report.packets_in / busy[0] if busy[0] > 0 else 0.0
    report.misrouted_packets = oracle.counters["misrouted"]
    report.misroute_records = len(oracle.misroutes)
    report.unknown_flow_packets = oracle.counters["unknown"]
    report.label_emissions = oracle.counters["emissions"]
    report.joined_samples = trainer.stats.joined
    report.expired_features = trainer.stats.expired
    write_outputs(cfg, report)
    return report


def _nonempty(packets: Iterable[Packet]) -> bool:
    return next(iter(packets), None) is not None


def write_outputs(cfg: RunConfig, report: MetricsReport) -> None:
    if cfg.report_text:
        with open(cfg.report_text, "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
    if cfg.report_kv:
        with open(cfg.report_kv, "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())
    if cfg.decision_log:
        with open(cfg.decision_log, "w", encoding="utf-8", newline="") as fh:
            write_decision_log(fh, report.decisions)


# --------------------------------------------------------------------------
# offline helpers shared by the CLI and the tests

def labelled_windows(
    per_class: int, seed: int, window: int = DEFAULT_WINDOW, profiles=None, flows: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """First ``per_class`` windows of each class from synthetic traffic, classes in code order."""
    profiles = profiles or DEFAULT_PROFILES
    X, y = [], []
    for label in ClassLabel:
        prof = profiles[label]
        # expected windows per second for one flow, padded by half
        pkts_per_frame = math.ceil(prof.frame_size_mean_bytes / prof.mtu_payload_bytes)
        rate = prof.frame_rate_hz * pkts_per_frame / window
        duration = 1.5 * per_class / (flows * rate) + 2.0
        while True:
            packets, _ = iter_synth([(prof, flows)], duration, seed)
            rows = [fv.values for fv in extract_all(packets, window)]
            if len(rows) >= per_class:
                break
            duration *= 2
        X.extend(rows[:per_class])
        y.extend([int(label)] * per_class)
    return np.array(X, dtype=np.float64).reshape(-1, 8), np.array(y, dtype=np.int64)


def bench(packets: list[Packet], model: Model, window: int = DEFAULT_WINDOW, workers: int = 1) -> dict:
    """Push pre-parsed packets through the classifier as fast as possible."""
    pipeline = ShardedPipeline(window, workers, batch_queue_size=1 << 20)
    pipeline.start(ModelHandle(1, model))
    t = time.perf_counter()
    for i in range(0, len(packets), 4096):
        pipeline.route_batch(packets[i : i + 4096])
        pipeline.drain_batches()
    elapsed = time.perf_counter() - t
    pipeline.close()
    return {
        "packets": len(packets),
        "elapsed_s": elapsed,
        "pkts_per_s": len(packets) / elapsed if elapsed > 0 else float("inf"),
        "windows": pipeline.counters["windows"],
        "workers": workers,
    }
