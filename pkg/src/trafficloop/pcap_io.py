"""Packet pool: classic pcap I/O, labelled traffic synthesis and paced replay."""

from __future__ import annotations

import csv
import heapq
import io
import math
import queue
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Mapping, NamedTuple, Optional, Sequence

from .core import UDP, ClassLabel, FlowKey, Packet, encode_rtp, flow_key
from .errors import BadMagic, InvalidProfile, TruncatedRecord, UnsortedInput, UnsupportedLinkType
from .rng import SplitMix64, derive_seed

LINKTYPE_ETHERNET = 1
SNAPLEN = 65535
PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
HEADER_OVERHEAD = 14 + 20 + 8  # ethernet + ipv4 + udp

_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_IPV6 = 0x86DD
_SRC_MAC = bytes.fromhex("020000000001")
_DST_MAC = bytes.fromhex("020000000002")

SIDECAR_HEADER = ["src_ip", "src_port", "dst_ip", "dst_port", "proto", "label"]


class PcapRecord(NamedTuple):
    ts_sec: int
    ts_usec: int
    incl_len: int
    orig_len: int
    data: bytes


def iter_records(data: bytes) -> tuple[int, Iterator[PcapRecord]]:
    """Split a classic pcap image into its link type and raw records."""
    if len(data) < 4:
        raise BadMagic("file too short for a pcap magic number")
    (magic,) = struct.unpack_from("<I", data)
    if magic == PCAP_MAGIC:
        order = "<"
    elif magic == PCAP_MAGIC_SWAPPED:
        order = ">"
    else:
        raise BadMagic(f"unrecognised pcap magic 0x{magic:08x}")
    if len(data) < 24:
        raise TruncatedRecord("global header shorter than 24 bytes")
    _, _, _, _, snaplen, link_type = struct.unpack_from(order + "HHiIII", data, 4)
    rec_hdr = struct.Struct(order + "IIII")

    def records() -> Iterator[PcapRecord]:
        off, end = 24, len(data)
        while off < end:
            if off + 16 > end:
                raise TruncatedRecord(f"record header cut at offset {off}")
            ts_sec, ts_usec, incl, orig = rec_hdr.unpack_from(data, off)
            off += 16
            if off + incl > end:
                raise TruncatedRecord(f"record data cut at offset {off}: need {incl} bytes")
            if incl > orig or incl > snaplen:
                raise TruncatedRecord(f"record at offset {off - 16} has inconsistent lengths")
            yield PcapRecord(ts_sec, ts_usec, incl, orig, data[off : off + incl])
            off += incl

    return link_type, records()


def _decode_frame(rec: PcapRecord, counters: Optional[Counter]) -> Optional[Packet]:
    frame = rec.data
    if len(frame) < 14:
        _count(counters, "malformed")
        return None
    ethertype = (frame[12] << 8) | frame[13]
    if ethertype == _ETHERTYPE_IPV6:
        _count(counters, "ipv6")
        return None
    if ethertype != _ETHERTYPE_IPV4 or len(frame) < 34 or frame[14] >> 4 != 4:
        _count(counters, "non_ipv4")
        return None
    ihl = (frame[14] & 0x0F) * 4
    proto = frame[23]
    if proto != UDP:
        _count(counters, "non_udp")
        return None
    udp = 14 + ihl
    if len(frame) < udp + 8:
        _count(counters, "malformed")
        return None
    src_port, dst_port, udp_len = struct.unpack_from("!HHH", frame, udp)
    if udp_len < 8:
        _count(counters, "malformed")
        return None
    return Packet(
        ts_us=rec.ts_sec * 1_000_000 + rec.ts_usec,
        src_ip=socket.inet_ntoa(frame[26:30]),
        dst_ip=socket.inet_ntoa(frame[30:34]),
        src_port=src_port,
        dst_port=dst_port,
        proto=proto,
        payload=frame[udp + 8 : udp + udp_len],
        wire_len=rec.orig_len,
    )


def _count(counters: Optional[Counter], key: str) -> None:
    if counters is not None:
        counters[key] += 1


def read_pcap(data: bytes, counters: Optional[Counter] = None) -> tuple[int, list[Packet]]:
    """Decode every UDP-in-IPv4-in-Ethernet record of a classic pcap image.

    Records that are not IPv4/UDP are skipped; pass a ``Counter`` to learn how
    many and why (keys ``ipv6``, ``non_ipv4``, ``non_udp``, ``malformed``).
    """
    link_type, records = iter_records(data)
    if link_type != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {link_type} (only Ethernet is supported)")
    packets = []
    for rec in records:
        p = _decode_frame(rec, counters)
        if p is not None:
            packets.append(p)
    return link_type, packets


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack("!10H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_frame(p: Packet) -> bytes:
    udp_len = 8 + len(p.payload)
    ip = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x45, 0, 20 + udp_len, 0, 0x4000, 64, p.proto, 0,
            socket.inet_aton(p.src_ip), socket.inet_aton(p.dst_ip),
        )
    )
    struct.pack_into("!H", ip, 10, _ip_checksum(bytes(ip)))
    eth = _DST_MAC + _SRC_MAC + struct.pack("!H", _ETHERTYPE_IPV4)
    return eth + bytes(ip) + struct.pack("!HHHH", p.src_port, p.dst_port, udp_len, 0) + p.payload


def write_pcap(link_type: int, packets: Iterable[Packet]) -> bytes:
    """Encode packets as a little-endian classic pcap (v2.4, snaplen 65535).

    Each packet gets synthesized Ethernet/IPv4/UDP headers; ``wire_len`` is
    written as the original length so ``read_pcap`` restores it exactly.
    """
    if link_type != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {link_type} (only Ethernet is supported)")
    out = io.BytesIO()
    out.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, link_type))
    rec_hdr = struct.Struct("<IIII")
    for p in packets:
        frame = encode_frame(p)
        if len(frame) > SNAPLEN:
            raise ValueError(f"packet of {len(p.payload)} payload bytes exceeds snaplen")
        if p.wire_len < len(frame):
            raise ValueError(f"wire_len {p.wire_len} shorter than the {len(frame)}-byte frame")
        if p.ts_us < 0:
            raise ValueError("negative timestamp")
        sec, usec = divmod(p.ts_us, 1_000_000)
        out.write(rec_hdr.pack(sec, usec, len(frame), p.wire_len))
        out.write(frame)
    return out.getvalue()


def load_pcap(path, counters: Optional[Counter] = None) -> list[Packet]:
    with open(path, "rb") as fh:
        return read_pcap(fh.read(), counters)[1]


def save_pcap(path, packets: Iterable[Packet]) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pcap(LINKTYPE_ETHERNET, packets))


# --------------------------------------------------------------------------
# ground truth sidecar

def write_sidecar(rows: Iterable[tuple[FlowKey, ClassLabel]], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SIDECAR_HEADER)
    for key, label in rows:
        w.writerow([key.src_ip, key.src_port, key.dst_ip, key.dst_port, key.proto, label.text])


def read_sidecar(fh) -> dict[FlowKey, ClassLabel]:
    reader = csv.DictReader(fh)
    if reader.fieldnames != SIDECAR_HEADER:
        raise ValueError(f"sidecar header must be {','.join(SIDECAR_HEADER)}")
    truth: dict[FlowKey, ClassLabel] = {}
    for row in reader:
        key = FlowKey(row["src_ip"], int(row["src_port"]), row["dst_ip"], int(row["dst_port"]), int(row["proto"]))
        if key in truth:
            raise ValueError(f"duplicate flow {key} in sidecar")
        truth[key] = ClassLabel.parse(row["label"])
    return truth


def save_sidecar(path, rows: Iterable[tuple[FlowKey, ClassLabel]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_sidecar(rows, fh)


def load_sidecar(path) -> dict[FlowKey, ClassLabel]:
    with open(path, encoding="utf-8", newline="") as fh:
        return read_sidecar(fh)


# --------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class TrafficProfile:
    """Knobs of one synthetic application class."""

    label: ClassLabel
    frame_rate_hz: float
    frame_interval_jitter_us: float
    frame_size_mean_bytes: float
    frame_size_std_bytes: float
    mtu_payload_bytes: int = 1200
    intra_frame_ipi_mean_us: float = 50.0
    intra_frame_ipi_std_us: float = 10.0
    rtp: bool = True

    def validate(self) -> None:
        if not self.frame_rate_hz > 0:
            raise InvalidProfile("frame_rate_hz must be positive")
        if self.mtu_payload_bytes < 64:
            raise InvalidProfile("mtu_payload_bytes must be at least 64")
        stds = (self.frame_interval_jitter_us, self.frame_size_std_bytes, self.intra_frame_ipi_std_us)
        if any(not s >= 0 for s in stds):
            raise InvalidProfile("standard deviations must be non-negative")

    def with_changes(self, **changes) -> "TrafficProfile":
        return replace(self, **changes)


# Harness defaults; frame rates and sizes are fixed by design, the jitter and
# intra-frame pacing values are our own choices.
DEFAULT_PROFILES: dict[ClassLabel, TrafficProfile] = {
    ClassLabel.CG: TrafficProfile(ClassLabel.CG, 60.0, 1000.0, 8000.0, 2000.0, 1200, 40.0, 10.0),
    ClassLabel.AR: TrafficProfile(ClassLabel.AR, 30.0, 2000.0, 15000.0, 4000.0, 1200, 80.0, 20.0),
    ClassLabel.OTHER: TrafficProfile(ClassLabel.OTHER, 25.0, 3000.0, 4000.0, 1500.0, 1200, 150.0, 50.0),
}


def profile_by_name(name: str) -> TrafficProfile:
    return DEFAULT_PROFILES[ClassLabel.parse(name)]


@dataclass(frozen=True)
class Drift:
    """Switch a flow to ``profile`` for every frame starting at or after ``at_s``."""

    at_s: float
    profile: TrafficProfile


def synth_flow_key(label: ClassLabel, index: int) -> FlowKey:
    return FlowKey(
        f"10.{int(label) + 1}.{(index >> 8) & 0xFF}.{index & 0xFF}",
        5004,
        f"10.0.1.{10 + int(label)}",
        4000 + int(label),
        UDP,
    )


def _round_pos(x: float) -> int:
    """Round half up and clamp to at least 1."""
    return max(1, math.floor(x + 0.5))


def _flow_packets(
    profile: TrafficProfile, key: FlowKey, seed: int, duration_us: int, drift: Optional[Drift]
) -> Iterator[Packet]:
    rng = SplitMix64(seed)
    shift_us = None if drift is None else drift.at_s * 1e6
    ssrc = rng.next_u64() & 0xFFFFFFFF
    seq = rng.randbelow(1 << 16)
    rtp_base = rng.randbelow(1 << 32)
    last_rtp_ts = None
    t = math.floor(rng.uniform() * 1e6 / profile.frame_rate_hz)
    last_ts = 0
    prof = profile
    src_ip, src_port, dst_ip, dst_port, proto = key
    while t < duration_us:
        if shift_us is not None and t >= shift_us:
            prof = drift.profile
        size = _round_pos(rng.gauss(prof.frame_size_mean_bytes, prof.frame_size_std_bytes))
        n_pkts = -(-size // prof.mtu_payload_bytes)
        ts = max(t, last_ts)
        rtp_ts = (rtp_base + ts * 90 // 1000) & 0xFFFFFFFF
        if last_rtp_ts is not None and rtp_ts == last_rtp_ts:
            rtp_ts = (rtp_ts + 1) & 0xFFFFFFFF
        last_rtp_ts = rtp_ts
        remaining = size
        for k in range(n_pkts):
            if k:
                ts += _round_pos(rng.gauss(prof.intra_frame_ipi_mean_us, prof.intra_frame_ipi_std_us))
            chunk = min(remaining, prof.mtu_payload_bytes)
            remaining -= chunk
            if prof.rtp:
                header = encode_rtp(
                    marker=k == n_pkts - 1, payload_type=96, seq=seq, timestamp=rtp_ts, ssrc=ssrc
                )
                payload = header + bytes(chunk)
                seq = (seq + 1) & 0xFFFF
            else:
                payload = bytes(chunk)
            yield Packet(ts, src_ip, dst_ip, src_port, dst_port, proto, payload, len(payload) + HEADER_OVERHEAD)
        last_ts = ts
        t += _round_pos(rng.gauss(1e6 / prof.frame_rate_hz, prof.frame_interval_jitter_us))


def iter_synth(
    profiles: Sequence[tuple[TrafficProfile, int]],
    duration_s: float,
    seed: int,
    drifts: Optional[Mapping[ClassLabel, Drift]] = None,
) -> tuple[Iterator[Packet], list[tuple[FlowKey, ClassLabel]]]:
    """Lazily merge the flows of several profiles in global timestamp order.

    ``profiles`` is a list of ``(profile, n_flows)``. Flow ``i`` of a profile is
    driven by a generator seeded from ``(seed, label, i)``; timestamp ties are
    broken by label, then flow index.
    """
    if duration_s < 0:
        raise ValueError("duration_s must be non-negative")
    drifts = drifts or {}
    duration_us = math.floor(duration_s * 1e6)
    streams = []
    sidecar = []
    for profile, n_flows in profiles:
        profile.validate()
        if n_flows < 0:
            raise ValueError("flows must be non-negative")
        drift = drifts.get(profile.label)
        if drift is not None:
            drift.profile.validate()
        for i in range(n_flows):
            key = synth_flow_key(profile.label, i)
            sidecar.append((key, profile.label))
            gen = _flow_packets(profile, key, derive_seed(seed, int(profile.label), i), duration_us, drift)
            order = int(profile.label) << 32 | i
            streams.append(((p.ts_us, order, p) for p in gen))
    if len({k for k, _ in sidecar}) != len(sidecar):
        raise InvalidProfile("two profiles share a class label")
    merged = (item[2] for item in heapq.merge(*streams, key=lambda item: (item[0], item[1])))
    return merged, sidecar


def synth_traffic(
    profile: TrafficProfile, flows: int, duration_s: float, seed: int, drift: Optional[Drift] = None
) -> tuple[list[Packet], list[tuple[FlowKey, ClassLabel]]]:
    drifts = {profile.label: drift} if drift else None
    packets, sidecar = iter_synth([(profile, flows)], duration_s, seed, drifts)
    return list(packets), sidecar


def synth_mix(
    flows_per_profile: int,
    duration_s: float,
    seed: int,
    profiles: Optional[Mapping[ClassLabel, TrafficProfile]] = None,
    drifts: Optional[Mapping[ClassLabel, Drift]] = None,
) -> tuple[list[Packet], list[tuple[FlowKey, ClassLabel]]]:
    """All three classes with ``flows_per_profile`` flows each."""
    profiles = profiles or DEFAULT_PROFILES
    mix = [(profiles[label], flows_per_profile) for label in ClassLabel]
    packets, sidecar = iter_synth(mix, duration_s, seed, drifts)
    return list(packets), sidecar


# --------------------------------------------------------------------------
# replay

class ReplayStats(NamedTuple):
    packets_sent: int
    elapsed_s: float
    rate_pps: float


_END = object()


def replay(
    packets: Iterable[Packet],
    speed_factor: float,
    sink: Callable[[Packet], object],
    queue_size: int = 1024,
) -> ReplayStats:
    """Deliver ``packets`` to ``sink`` in order, paced like tcpreplay.

    A worker thread releases each packet once ``(ts - ts_first) / speed_factor``
    has elapsed on the wall clock and hands it over a bounded queue; ``sink``
    runs on the calling thread. ``speed_factor == 0`` disables pacing.

    Sequences are checked for timestamp order before anything is delivered;
    for lazy iterables :class:`UnsortedInput` is raised when the first
    out-of-order packet is reached.
    """
    if speed_factor < 0:
        raise ValueError("speed_factor must be >= 0")
    if isinstance(packets, Sequence):
        for a, b in zip(packets, packets[1:]):
            if b.ts_us < a.ts_us:
                raise UnsortedInput(f"timestamp {b.ts_us} follows {a.ts_us}")

    q: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()
    failure: list[BaseException] = []
    start = time.perf_counter()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            t0 = last = None
            batch: list[Packet] = []
            for p in packets:
                if last is not None and p.ts_us < last:
                    raise UnsortedInput(f"timestamp {p.ts_us} follows {last}")
                last = p.ts_us
                if speed_factor == 0:
                    batch.append(p)
                    if len(batch) == 256:
                        if not put(batch):
                            return
                        batch = []
                    continue
                if t0 is None:
                    t0 = p.ts_us
                delay = start + (p.ts_us - t0) / 1e6 / speed_factor - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                if not put((p,)):
                    return
            if batch and not put(batch):
                return
        except BaseException as exc:  # handed to the consumer thread
            failure.append(exc)
        put(_END)

    worker = threading.Thread(target=produce, name="replay", daemon=True)
    worker.start()
    sent = 0
    try:
        while True:
            chunk = q.get()
            if chunk is _END:
                break
            for p in chunk:
                sink(p)
            sent += len(chunk)
    finally:
        stop.set()
        worker.join()
    if failure:
        raise failure[0]
    elapsed = time.perf_counter() - start
    return ReplayStats(sent, elapsed, sent / elapsed if elapsed > 0 else 0.0)


def flows_in(packets: Iterable[Packet]) -> set[FlowKey]:
    return {flow_key(p) for p in packets}
