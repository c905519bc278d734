import pytest

from trafficloop.core import UDP, Packet, encode_rtp
from trafficloop.forest import kernels


def make_packet(ts_us, size=100, src=("10.0.0.1", 5004), dst=("10.0.1.10", 4000), proto=UDP, payload=None):
    payload = bytes(size) if payload is None else payload
    return Packet(ts_us, src[0], dst[0], src[1], dst[1], proto, payload, len(payload) + 42)


def rtp_packet(ts_us, rtp_payload_len, rtp_ts, marker=False, seq=0, **kw):
    header = encode_rtp(marker=marker, payload_type=96, seq=seq, timestamp=rtp_ts, ssrc=0x1234)
    return make_packet(ts_us, payload=header + bytes(rtp_payload_len), **kw)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    previous = kernels.active
    kernels.set_backend(request.param)
    yield request.param
    kernels.active = previous
