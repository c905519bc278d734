import io
import math
import struct
import time
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from trafficloop.core import UDP, ClassLabel, Packet, flow_key, parse_rtp
from trafficloop.errors import BadMagic, InvalidProfile, TruncatedRecord, UnsortedInput, UnsupportedLinkType
from trafficloop.pcap_io import (
    DEFAULT_PROFILES,
    Drift,
    TrafficProfile,
    read_pcap,
    read_sidecar,
    replay,
    synth_mix,
    synth_traffic,
    write_pcap,
    write_sidecar,
)


def hand_built_pcap(order="<", magic=0xA1B2C3D4, link=1):
    """24-byte header + one 60-byte Ethernet/IPv4/UDP record, packed field by field."""
    payload = bytes(range(18))
    udp = struct.pack("!HHHH", 5004, 4000, 8 + len(payload), 0) + payload
    ip = struct.pack("!BBHHHBBH", 0x45, 0, 20 + len(udp), 1, 0, 64, 17, 0) + bytes([10, 0, 0, 1, 10, 0, 1, 10])
    frame = b"\x00" * 12 + b"\x08\x00" + ip + udp
    assert len(frame) == 60
    glob = struct.pack(order + "IHHiIII", magic, 2, 4, 0, 0, 65535, link)
    rec = struct.pack(order + "IIII", 12, 345678, 60, 60)
    return glob + rec + frame, payload


def test_read_hand_built_file():
    data, payload = hand_built_pcap()
    link, packets = read_pcap(data)
    assert link == 1
    assert packets == [Packet(12_345_678, "10.0.0.1", "10.0.1.10", 5004, 4000, 17, payload, 60)]


def test_read_byte_swapped_file_is_identical():
    native, _ = hand_built_pcap()
    swapped, _ = hand_built_pcap(order=">")
    assert struct.unpack_from("<I", swapped)[0] == 0xD4C3B2A1
    assert read_pcap(swapped) == read_pcap(native)


def test_truncated_record():
    data, _ = hand_built_pcap()
    with pytest.raises(TruncatedRecord):
        read_pcap(data[:-3])


def test_bad_magic_and_link_type():
    data, _ = hand_built_pcap(magic=0x12345678)
    with pytest.raises(BadMagic):
        read_pcap(data)
    data, _ = hand_built_pcap(link=101)
    with pytest.raises(UnsupportedLinkType):
        read_pcap(data)


def test_non_udp_skipped_and_counted():
    data, _ = hand_built_pcap()
    tcp = bytearray(data)
    tcp[24 + 16 + 14 + 9] = 6
    counters = Counter()
    assert read_pcap(bytes(tcp), counters)[1] == []
    assert counters == {"non_udp": 1}


def test_empty_list_writes_bare_header():
    out = write_pcap(1, [])
    assert len(out) == 24
    assert struct.unpack("<IHHiIII", out) == (0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)


def test_single_packet_round_trip():
    p = Packet(1_500_000, "192.168.1.2", "8.8.8.8", 1234, 53, UDP, b"hello", 47 + 100)
    assert read_pcap(write_pcap(1, [p])) == (1, [p])


ip = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
packets_st = st.builds(
    lambda ts, s, d, sp, dp, payload, extra: Packet(ts, s, d, sp, dp, UDP, payload, len(payload) + 42 + extra),
    st.integers(0, 2**40), ip, ip, st.integers(0, 65535), st.integers(0, 65535),
    st.binary(max_size=300), st.integers(0, 1000),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(packets_st, max_size=20))
def test_round_trip_property(packets):
    image = write_pcap(1, packets)
    assert read_pcap(image)[1] == packets
    assert write_pcap(1, read_pcap(image)[1]) == image


def test_thousand_random_packets_double_round_trip():
    from trafficloop.rng import SplitMix64

    g = SplitMix64(5)
    pk = []
    for _ in range(1000):
        n = g.randbelow(1400)
        pk.append(Packet(g.randbelow(2**42), f"10.0.{g.randbelow(256)}.{g.randbelow(256)}", "10.9.9.9",
                         g.randbelow(65536), g.randbelow(65536), UDP, bytes(g.randbelow(256) for _ in range(n % 64)) * (n // 64 + 1), 0))
    pk = [p._replace(wire_len=len(p.payload) + 42) for p in pk]
    once = write_pcap(1, pk)
    assert write_pcap(1, read_pcap(once)[1]) == once


# ---------------------------------------------------------------- synthesis

def test_synth_zero_flows():
    assert synth_traffic(DEFAULT_PROFILES[ClassLabel.CG], 0, 10, 1) == ([], [])


def test_synth_deterministic():
    prof = DEFAULT_PROFILES[ClassLabel.AR]
    a = synth_traffic(prof, 3, 2.0, 99)
    b = synth_traffic(prof, 3, 2.0, 99)
    assert a == b
    assert write_pcap(1, a[0]) == write_pcap(1, b[0])
    assert synth_traffic(prof, 3, 2.0, 100)[0] != a[0]


def test_cg_frame_interval_mean():
    packets, _ = synth_traffic(DEFAULT_PROFILES[ClassLabel.CG], 1, 30.0, 7)
    frame_starts = []
    last_ts = None
    for p in packets:
        h = parse_rtp(p.payload)
        if h.timestamp != last_ts:
            frame_starts.append(p.ts_us)
            last_ts = h.timestamp
    gaps = [b - a for a, b in zip(frame_starts, frame_starts[1:])]
    assert len(gaps) >= 1000
    mean = sum(gaps) / len(gaps)
    assert abs(mean - 1e6 / 60) / (1e6 / 60) < 0.05


def test_sidecar_covers_exactly_emitted_flows():
    packets, sidecar = synth_mix(4, 3.0, 11)
    keys = [k for k, _ in sidecar]
    assert len(keys) == len(set(keys)) == 12
    assert {flow_key(p) for p in packets} == set(keys)
    assert all(a.ts_us <= b.ts_us for a, b in zip(packets, packets[1:]))


def test_marker_ends_each_rtp_timestamp_group():
    packets, _ = synth_mix(3, 2.0, 4)
    by_flow = {}
    for p in packets:
        by_flow.setdefault(flow_key(p), []).append(parse_rtp(p.payload))
    for headers in by_flow.values():
        for h, nxt in zip(headers, headers[1:]):
            if h.marker:
                assert nxt.timestamp != h.timestamp
            else:
                assert nxt.timestamp == h.timestamp
        assert headers[-1].marker


def test_frame_packetization():
    prof = TrafficProfile(ClassLabel.CG, 10.0, 0.0, 3000.0, 0.0, 1200, 50.0, 0.0)
    packets, _ = synth_traffic(prof, 1, 0.5, 1)
    sizes = [len(p.payload) - 12 for p in packets[:3]]
    assert sizes == [1200, 1200, 600]
    assert [p.ts_us - packets[0].ts_us for p in packets[:3]] == [0, 50, 100]


def test_drift_changes_frame_rate():
    before = DEFAULT_PROFILES[ClassLabel.OTHER]
    after = before.with_changes(frame_rate_hz=50.0, frame_interval_jitter_us=0.0)
    packets, _ = synth_traffic(before, 1, 4.0, 3, Drift(2.0, after))
    ends = [p.ts_us for p in packets if parse_rtp(p.payload).marker]
    early = sum(t < 2e6 for t in ends)
    late = len(ends) - early
    assert abs(early - 50) <= 3
    assert abs(late - 100) <= 3


@pytest.mark.parametrize("bad", [
    dict(frame_rate_hz=0.0), dict(mtu_payload_bytes=63), dict(frame_size_std_bytes=-1.0),
])
def test_invalid_profile(bad):
    prof = DEFAULT_PROFILES[ClassLabel.CG].with_changes(**bad)
    with pytest.raises(InvalidProfile):
        synth_traffic(prof, 1, 1.0, 1)


def test_non_rtp_profile():
    prof = DEFAULT_PROFILES[ClassLabel.OTHER].with_changes(rtp=False)
    packets, _ = synth_traffic(prof, 1, 1.0, 2)
    assert packets and all(parse_rtp(p.payload) is None for p in packets)


def test_sidecar_csv_format():
    _, sidecar = synth_mix(1, 0.1, 1)
    buf = io.StringIO()
    write_sidecar(sidecar, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "src_ip,src_port,dst_ip,dst_port,proto,label"
    assert "\r" not in text
    assert {"AR", "CG", "other"} == {line.rsplit(",", 1)[1] for line in text.splitlines()[1:]}
    assert read_sidecar(io.StringIO(text)) == dict(sidecar)


# ---------------------------------------------------------------- replay

def _two(gap_us):
    return [Packet(0, "1.1.1.1", "2.2.2.2", 1, 2, UDP, b"", 42), Packet(gap_us, "1.1.1.1", "2.2.2.2", 1, 2, UDP, b"", 42)]


def test_replay_fast_preserves_order():
    packets = [Packet(i, "1.1.1.1", "2.2.2.2", 1, 2, UDP, b"", 42) for i in range(100_000)]
    got = []
    stats = replay(packets, 0, got.append)
    assert stats.packets_sent == 100_000
    assert got == packets


def test_replay_real_time_lower_bound():
    stats = replay(_two(1_000_000), 1.0, lambda p: None)
    assert stats.elapsed_s >= 1.0


def test_replay_speed_factor_ten():
    slack = 0.25  # generous allowance for thread scheduling on loaded CI hosts
    stats = replay(_two(1_000_000), 10.0, lambda p: None)
    assert 0.1 <= stats.elapsed_s <= 0.1 + slack


def test_replay_rejects_unsorted():
    packets = list(reversed(_two(10)))
    with pytest.raises(UnsortedInput):
        replay(packets, 0, lambda p: None)
    with pytest.raises(UnsortedInput):
        replay(iter(packets), 0, lambda p: None)


def test_replay_empty():
    assert replay([], 1.0, lambda p: None).packets_sent == 0
