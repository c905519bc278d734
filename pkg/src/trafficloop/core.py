"""Domain vocabulary: packets, flow identity, class labels and the RTP header."""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import NamedTuple, Optional

UDP = 17
RTP_HEADER_LEN = 12

_RTP = struct.Struct("!BBHII")


class ClassLabel(IntEnum):
    """Traffic class. The integer value is the wire encoding and the tie-break order."""

    AR = 0
    CG = 1
    OTHER = 2

    @property
    def text(self) -> str:
        return _LABEL_TEXT[self]

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return _TEXT_LABEL[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown class label {text!r}") from None


_LABEL_TEXT = {ClassLabel.AR: "AR", ClassLabel.CG: "CG", ClassLabel.OTHER: "other"}
_TEXT_LABEL = {"ar": ClassLabel.AR, "cg": ClassLabel.CG, "other": ClassLabel.OTHER}


class FlowKey(NamedTuple):
    """Direction-sensitive 5-tuple; A->B and B->A are different flows."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: int

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}/{self.proto}"


class Packet(NamedTuple):
    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: int
    payload: bytes
    wire_len: int


class RtpHeader(NamedTuple):
    version: int
    padding: bool
    marker: bool
    payload_type: int
    seq: int
    timestamp: int
    ssrc: int


def flow_key(p: Packet) -> FlowKey:
    return FlowKey(p.src_ip, p.src_port, p.dst_ip, p.dst_port, p.proto)


def parse_rtp(payload: bytes) -> Optional[RtpHeader]:
    """Decode the fixed 12-byte RTP header.

    Returns None when the payload is too short or the version field is not 2;
    callers then treat the packet as a frame of its own.
    """
    if len(payload) < RTP_HEADER_LEN:
        return None
    b0, b1, seq, ts, ssrc = _RTP.unpack_from(payload)
    if b0 >> 6 != 2:
        return None
    return RtpHeader(2, bool(b0 & 0x20), bool(b1 & 0x80), b1 & 0x7F, seq, ts, ssrc)


def encode_rtp(
    *, marker: bool, payload_type: int, seq: int, timestamp: int, ssrc: int, padding: bool = False
) -> bytes:
    b0 = 0x80 | (0x20 if padding else 0)
    b1 = (0x80 if marker else 0) | (payload_type & 0x7F)
    return _RTP.pack(b0, b1, seq & 0xFFFF, timestamp & 0xFFFFFFFF, ssrc & 0xFFFFFFFF)
