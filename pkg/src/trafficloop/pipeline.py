"""Traffic classifier: window classification, sticky per-flow routing and hot model swap."""

from __future__ import annotations

import csv
import queue
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from typing import Iterable, NamedTuple, Optional, Sequence

from .core import UDP, ClassLabel, FlowKey, Packet, flow_key
from .errors import NotStarted, StaleVersion
from .features import DEFAULT_WINDOW, FeatureExtractor, FeatureVector, shard_of
from .forest import Model, deserialize_model, predict


class SinkId(IntEnum):
    AR_SERVER = 0
    CG_SERVER = 1
    OTHER_SERVER = 2

    @classmethod
    def for_label(cls, label: ClassLabel) -> "SinkId":
        return cls(int(label))

    @property
    def label(self) -> ClassLabel:
        return ClassLabel(int(self))


class ModelHandle(NamedTuple):
    version: int
    model: Model


class RouteDecision(NamedTuple):
    flow: FlowKey
    label: ClassLabel
    confidence: float
    model_version: int
    window_index: int
    decided_at_us: int


class Routing(NamedTuple):
    sink: Optional[SinkId]  # None: dropped
    decision: Optional[RouteDecision]
    pre_decision: bool


class BatchItem(NamedTuple):
    """One entry of the feature batch sent to the trainer."""

    features: FeatureVector
    decision: RouteDecision


DECISION_LOG_HEADER = [
    "src_ip", "src_port", "dst_ip", "dst_port", "proto",
    "window_index", "label", "confidence", "model_version", "decided_at_us",
]


class ModelSlot:
    """Shared, atomically republished (version, model) pair.

    Readers take ``slot.handle`` once per classification and never block;
    swaps are serialized by a lock and publish with a single reference store.
    """

    def __init__(self, handle: Optional[ModelHandle] = None) -> None:
        self.handle = handle
        self._lock = threading.Lock()
        self.published: list[int] = [] if handle is None else [handle.version]

    def publish(self, handle: ModelHandle) -> int:
        with self._lock:
            current = self.handle
            if current is not None and handle.version <= current.version:
                raise StaleVersion(f"version {handle.version} <= serving version {current.version}")
            self.published.append(handle.version)
            self.handle = handle
        return handle.version

    def swap(self, envelope: bytes) -> int:
        model, version = deserialize_model(envelope)
        return self.publish(ModelHandle(version, model))


class ClassifierPipeline:
    """Feature extraction, classification and forwarding for one shard of flows."""

    def __init__(
        self,
        window: int = DEFAULT_WINDOW,
        slot: Optional[ModelSlot] = None,
        batch_size: int = 64,
        batch_queue: Optional[queue.Queue] = None,
    ) -> None:
        self.extractor = FeatureExtractor(window)
        self.slot = slot if slot is not None else ModelSlot()
        self.routes: dict[FlowKey, RouteDecision] = {}
        self.batch_size = batch_size
        self.batches = batch_queue if batch_queue is not None else queue.Queue(maxsize=1024)
        self._batch: list[BatchItem] = []
        self.counters: Counter = Counter()
        self.delivered = [0, 0, 0]

    def start(self, handle: ModelHandle) -> None:
        self.slot.publish(handle)

    def swap_model(self, envelope: bytes) -> int:
        return self.slot.swap(envelope)

    @property
    def version(self) -> Optional[int]:
        h = self.slot.handle
        return None if h is None else h.version

    def classify_and_route(self, p: Packet) -> Routing:
        handle = self.slot.handle
        if handle is None:
            raise NotStarted("no model has been published")
        self.counters["packets_in"] += 1
        if p.proto != UDP:
            self.counters["drops"] += 1
            return Routing(None, None, False)
        fv = self.extractor.observe(p)
        decision = None
        if fv is not None:
            label, conf = predict(handle.model, fv.values)
            decision = RouteDecision(fv.flow, label, conf, handle.version, fv.window_index, p.ts_us)
            self.routes[fv.flow] = decision
            self.counters["windows"] += 1
            self._batch.append(BatchItem(fv, decision))
            if len(self._batch) >= self.batch_size:
                self.flush_batch()
            sticky = decision
        else:
            sticky = self.routes.get(flow_key(p))
        if sticky is None:
            self.counters["pre_decision"] += 1
            self.delivered[SinkId.OTHER_SERVER] += 1
            return Routing(SinkId.OTHER_SERVER, None, True)
        sink = SinkId(int(sticky.label))
        self.delivered[sink] += 1
        return Routing(sink, decision, False)

    def flush_batch(self) -> None:
        """Hand the pending feature batch to the trainer queue; drop it if the queue is full."""
        if not self._batch:
            return
        batch, self._batch = self._batch, []
        try:
            self.batches.put_nowait(batch)
        except queue.Full:
            self.counters["batches_dropped"] += 1

    def flush_expired(self, now_us: int, idle_timeout_us: int) -> list[FlowKey]:
        evicted = self.extractor.flush_expired(now_us, idle_timeout_us)
        for k in evicted:
            self.routes.pop(k, None)
        return evicted

    def drain_batches(self) -> list[BatchItem]:
        items = []
        while True:
            try:
                items.extend(self.batches.get_nowait())
            except queue.Empty:
                return items


class ShardedPipeline:
    """Several :class:`ClassifierPipeline` workers sharing one :class:`ModelSlot`.

    Packets are dispatched by flow hash; results come back in input order.
    """

    def __init__(self, window: int = DEFAULT_WINDOW, workers: int = 1, batch_size: int = 64,
                 batch_queue_size: int = 1024) -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.slot = ModelSlot()
        self.batches: queue.Queue = queue.Queue(maxsize=batch_queue_size)
        self.workers = [ClassifierPipeline(window, self.slot, batch_size, self.batches) for _ in range(workers)]
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def start(self, handle: ModelHandle) -> None:
        self.slot.publish(handle)

    def swap_model(self, envelope: bytes) -> int:
        return self.slot.swap(envelope)

    @property
    def version(self) -> Optional[int]:
        h = self.slot.handle
        return None if h is None else h.version

    def route_batch(self, packets: Sequence[Packet], timer=None) -> list[Routing]:
        """Route a chunk of packets; ``timer(fn, p)`` may wrap each call for latency accounting."""
        n = len(self.workers)
        if n == 1:
            w = self.workers[0]
            if timer is None:
                return [w.classify_and_route(p) for p in packets]
            return [timer(w.classify_and_route, p) for p in packets]
        parts: list[list[tuple[int, Packet]]] = [[] for _ in range(n)]
        for i, p in enumerate(packets):
            parts[shard_of(flow_key(p), n)].append((i, p))

        def run(s: int):
            w = self.workers[s]
            call = w.classify_and_route
            if timer is None:
                return [(i, call(p)) for i, p in parts[s]]
            return [(i, timer(call, p)) for i, p in parts[s]]

        out: list[Optional[Routing]] = [None] * len(packets)
        for res in self._pool.map(run, range(n)):
            for i, r in res:
                out[i] = r
        return out

    def flush_batches(self) -> None:
        for w in self.workers:
            w.flush_batch()

    def drain_batches(self) -> list[BatchItem]:
        """Flush every worker and return all queued items, ordered by the packet that produced them."""
        self.flush_batches()
        items = []
        while True:
            try:
                items.extend(self.batches.get_nowait())
            except queue.Empty:
                break
        items.sort(key=lambda it: (it.decision.decided_at_us, it.decision.flow, it.decision.window_index))
        return items

    def flush_expired(self, now_us: int, idle_timeout_us: int) -> list[FlowKey]:
        return [k for w in self.workers for k in w.flush_expired(now_us, idle_timeout_us)]

    @property
    def counters(self) -> Counter:
        total: Counter = Counter()
        for w in self.workers:
            total.update(w.counters)
        return total

    @property
    def delivered(self) -> list[int]:
        return [sum(w.delivered[s] for w in self.workers) for s in range(3)]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def write_decision_log(fh, decisions: Iterable[RouteDecision]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(DECISION_LOG_HEADER)
    for d in decisions:
        w.writerow([*d.flow, d.window_index, d.label.text, repr(d.confidence), d.model_version, d.decided_at_us])
