"""Application servers: check routing against ground truth and emit flow labels."""

from __future__ import annotations

import csv
import heapq
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional

from .core import ClassLabel, FlowKey, Packet, flow_key
from .pipeline import SinkId


@dataclass
class MisrouteRecord:
    flow: FlowKey
    expected: ClassLabel
    routed_to: SinkId
    first_seen_us: int
    packet_count: int = 1


class LabelEmission(NamedTuple):
    flow: FlowKey
    label: ClassLabel
    emitted_at_us: int


class LabelOracle:
    """The three logical servers, backed by the ground-truth sidecar.

    A flow's label is emitted on its first sighting at any sink, and again
    every ``reemit_every_us`` after that when set. Emissions become visible to
    :meth:`due` only ``latency_us`` after the packet that triggered them.
    Pre-decision packets (cold-start routing) are never misroutes.
    """

    def __init__(
        self,
        truth: Mapping[FlowKey, ClassLabel],
        latency_us: int = 0,
        reemit_every_us: Optional[int] = None,
    ) -> None:
        if latency_us < 0:
            raise ValueError("latency_us must be >= 0")
        if reemit_every_us is not None and reemit_every_us <= 0:
            raise ValueError("reemit_every_us must be positive")
        self.truth = dict(truth)
        self.latency_us = latency_us
        self.reemit_every_us = reemit_every_us
        self.last_emitted: dict[FlowKey, int] = {}
        self.misroutes: dict[tuple[FlowKey, SinkId], MisrouteRecord] = {}
        self.counters: Counter = Counter()
        self.per_sink = [0, 0, 0]
        self._pending: list[tuple[int, int, LabelEmission]] = []
        self._seq = 0

    def verify_and_label(
        self, p: Packet, sink: SinkId, pre_decision: bool = False
    ) -> tuple[Optional[MisrouteRecord], Optional[LabelEmission]]:
        self.counters["delivered"] += 1
        self.per_sink[sink] += 1
        key = flow_key(p)
        expected = self.truth.get(key)
        if expected is None:
            self.counters["unknown"] += 1
            return None, None

        emission = None
        last = self.last_emitted.get(key)
        if last is None or (self.reemit_every_us is not None and p.ts_us - last >= self.reemit_every_us):
            self.last_emitted[key] = p.ts_us
            emission = LabelEmission(key, expected, p.ts_us + self.latency_us)
            heapq.heappush(self._pending, (emission.emitted_at_us, self._seq, emission))
            self._seq += 1
            self.counters["emissions"] += 1

        record = None
        if pre_decision:
            self.counters["pre_decision"] += 1
        elif sink.label != expected:
            self.counters["misrouted"] += 1
            record = self.misroutes.get((key, sink))
            if record is None:
                record = self.misroutes[(key, sink)] = MisrouteRecord(key, expected, sink, p.ts_us)
            else:
                record.packet_count += 1
        else:
            self.counters["correct"] += 1
        return record, emission

    def due(self, now_us: int) -> list[LabelEmission]:
        """Pop the emissions whose delivery time has come, in delivery order."""
        out = []
        while self._pending and self._pending[0][0] <= now_us:
            out.append(heapq.heappop(self._pending)[2])
        return out

    def drain(self) -> list[LabelEmission]:
        out = [e for _, _, e in sorted(self._pending)]
        self._pending.clear()
        return out


def write_misroutes(fh, records) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["src_ip", "src_port", "dst_ip", "dst_port", "proto", "expected", "routed_to", "packet_count"])
    for r in records:
        w.writerow([*r.flow, r.expected.text, r.routed_to.name, r.packet_count])
