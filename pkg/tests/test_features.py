import io
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from trafficloop.core import flow_key
from trafficloop.features import (
    FEATURE_CSV_HEADER,
    FeatureExtractor,
    ShardedExtractor,
    extract_all,
    read_features,
    write_features,
)
from trafficloop.pcap_io import synth_mix

from conftest import make_packet, rtp_packet


def test_non_rtp_window_by_hand():
    ext = FeatureExtractor(window=4)
    out = [ext.observe(make_packet(ts, size)) for ts, size in [(0, 100), (1000, 200), (2000, 100), (3000, 200)]]
    assert out[:3] == [None, None, None]
    fv = out[3]
    assert fv.window_index == 0
    assert fv.values == (150.0, 50.0, 1000.0, 0.0, 150.0, 50.0, 1000.0, 0.0)


def test_incomplete_window_emits_nothing():
    ext = FeatureExtractor(window=4)
    assert [ext.observe(make_packet(t)) for t in range(3)] == [None] * 3


def test_rtp_frame_grouping_by_timestamp_and_marker():
    ext = FeatureExtractor(window=4)
    ext.observe(rtp_packet(0, 500, rtp_ts=1000))
    ext.observe(rtp_packet(100, 300, rtp_ts=1000, marker=True))
    state = ext.flows[flow_key(make_packet(0))]
    assert state.fs == [800]
    # a timestamp change also closes a frame, without a marker
    ext.observe(rtp_packet(5000, 400, rtp_ts=2000))
    ext.observe(rtp_packet(9000, 200, rtp_ts=3000))
    assert state.fs == []  # emitted and cleared
    assert ext.flows[flow_key(make_packet(0))].next_window_index == 1


def test_rtp_window_values():
    ext = FeatureExtractor(window=4)
    pk = [
        rtp_packet(0, 500, 1000), rtp_packet(100, 300, 1000, marker=True),
        rtp_packet(20000, 1000, 2000), rtp_packet(20200, 200, 2000, marker=True),
    ]
    fv = [ext.observe(p) for p in pk][-1]
    ps = [512, 312, 1012, 212]
    ipi = [100, 19900, 200]
    assert fv.values[0] == pytest.approx(statistics.fmean(ps))
    assert fv.values[1] == pytest.approx(statistics.pstdev(ps))
    assert fv.values[2] == pytest.approx(statistics.fmean(ipi))
    assert fv.values[3] == pytest.approx(statistics.pstdev(ipi))
    assert fv.values[4:] == (1000.0, 200.0, 20000.0, 0.0)


def test_window_accounting():
    ext = FeatureExtractor(window=5)
    out = [fv for t in range(23) if (fv := ext.observe(make_packet(t * 10, 50 + t % 3)))]
    assert [fv.window_index for fv in out] == [0, 1, 2, 3]


def test_degenerate_std_is_exact_zero():
    ext = FeatureExtractor(window=30)
    out = [ext.observe(make_packet(t * 333, 1187)) for t in range(30)]
    v = out[-1].values
    assert v[1] == 0.0 and v[3] == 0.0 and v[5] == 0.0 and v[7] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 1400)), min_size=1, max_size=90))
def test_fallback_equivalence_for_non_rtp(steps):
    ext = FeatureExtractor(window=7)
    ts = 0
    for gap, size in steps:
        ts += gap
        # leading 0x00 byte keeps the payload from parsing as RTP
        fv = ext.observe(make_packet(ts, payload=bytes(size)))
        if fv is not None:
            assert fv.values[4:] == fv.values[:4]
            assert all(v >= 0 for v in fv.values)


def test_flush_expired_boundaries():
    ext = FeatureExtractor(window=3)
    ext.observe(make_packet(0))
    ext.observe(make_packet(10))
    assert ext.flush_expired(29_000_010, 30_000_000) == []
    assert ext.flush_expired(31_000_010, 30_000_000) == [flow_key(make_packet(0))]
    out = [ext.observe(make_packet(31_000_100 + t)) for t in range(3)]
    assert out[-1].window_index == 0
    assert FeatureExtractor().flush_expired(10, 5) == []


def test_sharding_matches_single_worker():
    packets, _ = synth_mix(4, 3.0, 21)
    reference = extract_all(packets, 30)
    for workers in (1, 4):
        sharded = ShardedExtractor(30, workers)
        got = []
        for i in range(0, len(packets), 5000):
            got.extend(sharded.observe_batch(packets[i : i + 5000]))
        sharded.close()
        assert got == reference


def test_feature_csv_round_trip():
    packets, sidecar = synth_mix(1, 1.0, 2)
    vecs = extract_all(packets, 30)
    truth = dict(sidecar)
    buf = io.StringIO()
    write_features(buf, vecs, truth)
    assert buf.getvalue().splitlines()[0] == ",".join(FEATURE_CSV_HEADER + ["label"])
    rows = read_features(io.StringIO(buf.getvalue()))
    assert [r[0].values for r in rows] == [v.values for v in vecs]
    assert [r[1] for r in rows] == [truth[v.flow].text for v in vecs]
