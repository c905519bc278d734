"""Per-flow windowed PS/IPI/FS/IFI statistics.

A flow's packets are cut into non-overlapping windows of ``window`` packets.
At the last packet of each window one :class:`FeatureVector` is emitted with
the mean and population standard deviation of

* packet size (UDP payload bytes),
* inter-packet interval,
* frame size (RTP payload bytes of one RTP-timestamp group, or the packet
  size when the flow is not RTP),
* inter-frame interval (between first packets of consecutive frames).

Intervals and frames straddle window boundaries; only the sample buffers are
reset at emission. Empty statistics are reported as 0.
"""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, NamedTuple, Optional, Sequence

from .core import RTP_HEADER_LEN, FlowKey, Packet, flow_key, parse_rtp

DEFAULT_WINDOW = 30
DEFAULT_IDLE_TIMEOUT_US = 30_000_000

FEATURE_NAMES = (
    "mean_ps", "std_ps", "mean_ipi", "std_ipi", "mean_fs", "std_fs", "mean_ifi", "std_ifi",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_CSV_HEADER = ["src_ip", "src_port", "dst_ip", "dst_port", "proto", "window_index", *FEATURE_NAMES]


class FeatureVector(NamedTuple):
    flow: FlowKey
    window_index: int
    values: tuple[float, ...]
    ts_us: int  # timestamp of the packet that closed the window


def _mean_std(total: int, total_sq: int, n: int) -> tuple[float, float]:
    if n == 0:
        return 0.0, 0.0
    # exact integer variance numerator keeps equal samples at std == 0
    return total / n, math.sqrt(n * total_sq - total * total) / n


class FlowState:
    __slots__ = (
        "key", "packets_in_window", "last_pkt_ts_us", "last_seen_ts_us", "next_window_index",
        "ps", "ipi", "fs", "ifi",
        "frame_rtp_ts", "frame_bytes", "frame_first_ts", "last_frame_ts",
    )

    def __init__(self, key: FlowKey) -> None:
        self.key = key
        self.packets_in_window = 0
        self.last_pkt_ts_us: Optional[int] = None
        self.last_seen_ts_us = 0
        self.next_window_index = 0
        self.ps: list[int] = []
        self.ipi: list[int] = []
        self.fs: list[int] = []
        self.ifi: list[int] = []
        self.frame_rtp_ts: Optional[int] = None  # None: no RTP frame open
        self.frame_bytes = 0
        self.frame_first_ts = 0
        self.last_frame_ts: Optional[int] = None

    def _complete_frame(self, size: int, first_ts: int) -> None:
        self.fs.append(size)
        if self.last_frame_ts is not None:
            self.ifi.append(first_ts - self.last_frame_ts)
        self.last_frame_ts = first_ts

    def _close_open_frame(self) -> None:
        if self.frame_rtp_ts is not None:
            self._complete_frame(self.frame_bytes, self.frame_first_ts)
            self.frame_rtp_ts = None

    def add(self, p: Packet, now_us: int) -> None:
        ts = p.ts_us
        self.ps.append(len(p.payload))
        if self.last_pkt_ts_us is not None:
            self.ipi.append(ts - self.last_pkt_ts_us)
        self.last_pkt_ts_us = ts
        if now_us > self.last_seen_ts_us:
            self.last_seen_ts_us = now_us

        rtp = parse_rtp(p.payload)
        if rtp is None:
            self._close_open_frame()
            self._complete_frame(len(p.payload), ts)
        else:
            if self.frame_rtp_ts is not None and rtp.timestamp != self.frame_rtp_ts:
                self._close_open_frame()
            if self.frame_rtp_ts is None:
                self.frame_rtp_ts = rtp.timestamp
                self.frame_bytes = 0
                self.frame_first_ts = ts
            self.frame_bytes += len(p.payload) - RTP_HEADER_LEN
            if rtp.marker:
                self._close_open_frame()
        self.packets_in_window += 1

    def emit(self, ts_us: int) -> FeatureVector:
        values = []
        for buf in (self.ps, self.ipi, self.fs, self.ifi):
            values.extend(_mean_std(sum(buf), sum(x * x for x in buf), len(buf)))
            buf.clear()
        fv = FeatureVector(self.key, self.next_window_index, tuple(values), ts_us)
        self.next_window_index += 1
        self.packets_in_window = 0
        return fv


class FeatureExtractor:
    """Per-flow state table. Not thread-safe; shard flows across instances."""

    def __init__(self, window: int = DEFAULT_WINDOW) -> None:
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.flows: dict[FlowKey, FlowState] = {}

    def observe(self, p: Packet, now_us: Optional[int] = None) -> Optional[FeatureVector]:
        key = flow_key(p)
        state = self.flows.get(key)
        if state is None:
            state = self.flows[key] = FlowState(key)
        state.add(p, p.ts_us if now_us is None else now_us)
        if state.packets_in_window >= self.window:
            return state.emit(p.ts_us)
        return None

    def flush_expired(self, now_us: int, idle_timeout_us: int = DEFAULT_IDLE_TIMEOUT_US) -> list[FlowKey]:
        """Drop flows idle for more than ``idle_timeout_us``; partial windows are discarded."""
        if idle_timeout_us <= 0:
            raise ValueError("idle_timeout_us must be positive")
        evicted = [k for k, s in self.flows.items() if now_us - s.last_seen_ts_us > idle_timeout_us]
        for k in evicted:
            del self.flows[k]
        return evicted

    def __len__(self) -> int:
        return len(self.flows)


def shard_of(key: FlowKey, n_shards: int) -> int:
    """Stable (process-independent) shard assignment by flow."""
    if n_shards == 1:
        return 0
    return zlib.crc32(str(key).encode()) % n_shards


class ShardedExtractor:
    """Flow-sharded extraction across worker threads.

    Output order is the order of the packets that closed each window, so the
    stream is identical to a single :class:`FeatureExtractor` regardless of
    the worker count.
    """

    def __init__(self, window: int = DEFAULT_WINDOW, workers: int = 1) -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.shards = [FeatureExtractor(window) for _ in range(workers)]
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def observe_batch(self, packets: Sequence[Packet]) -> list[FeatureVector]:
        if self._pool is None:
            ext = self.shards[0]
            return [fv for p in packets if (fv := ext.observe(p)) is not None]
        n = len(self.shards)
        parts: list[list[tuple[int, Packet]]] = [[] for _ in range(n)]
        for i, p in enumerate(packets):
            parts[shard_of(flow_key(p), n)].append((i, p))

        def run(shard: int) -> list[tuple[int, FeatureVector]]:
            ext = self.shards[shard]
            return [(i, fv) for i, p in parts[shard] if (fv := ext.observe(p)) is not None]

        out = [item for res in self._pool.map(run, range(n)) for item in res]
        out.sort(key=lambda item: item[0])
        return [fv for _, fv in out]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def extract_all(packets: Iterable[Packet], window: int = DEFAULT_WINDOW) -> list[FeatureVector]:
    ext = FeatureExtractor(window)
    return [fv for p in packets if (fv := ext.observe(p)) is not None]


def write_features(fh, vectors: Iterable[FeatureVector], labels=None) -> None:
    """Write the feature-dump CSV; with ``labels`` (flow -> ClassLabel) append a label column."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FEATURE_CSV_HEADER + (["label"] if labels is not None else []))
    for fv in vectors:
        row = [*fv.flow, fv.window_index, *(repr(v) for v in fv.values)]
        if labels is not None:
            row.append(labels[fv.flow].text)
        w.writerow(row)


def read_features(fh) -> list[tuple[FeatureVector, Optional[str]]]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header not in (FEATURE_CSV_HEADER, FEATURE_CSV_HEADER + ["label"]):
        raise ValueError("unrecognised feature CSV header")
    labelled = len(header) > len(FEATURE_CSV_HEADER)
    rows = []
    for r in reader:
        key = FlowKey(r[0], int(r[1]), r[2], int(r[3]), int(r[4]))
        fv = FeatureVector(key, int(r[5]), tuple(float(v) for v in r[6:14]), 0)
        rows.append((fv, r[14] if labelled else None))
    return rows
