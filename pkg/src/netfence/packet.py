"""Simulated datagram carried between hosts and routers."""

from __future__ import annotations

from enum import IntEnum


class Kind(IntEnum):
    REQUEST = 0
    REGULAR = 1
    LEGACY = 2


REQUEST_SIZE = 92
DATA_SIZE = 1500


class Packet:
    """A packet with an optional shim header.

    ``fb`` holds the forward feedback (a :class:`~netfence.crypto.Feedback`
    or, under the multi-bottleneck policy, a ``MultiFeedback``); ``None``
    means no valid feedback is carried. Addresses and AS numbers travel
    out-of-band.
    """

    __slots__ = (
        "pid", "src", "dst", "src_as", "dst_as", "size", "kind", "priority", "fb",
        "flow", "seq", "syn", "route", "hop", "sent", "chain", "stage", "reset_link",
    )

    def __init__(self, pid: int, src: int, dst: int, size: int, kind: Kind,
                 priority: int = 0, fb=None, flow=None, seq: int = -1,
                 syn: bool = False, src_as: int = 0, dst_as: int = 0):
        self.pid = pid
        self.src = src
        self.dst = dst
        self.src_as = src_as
        self.dst_as = dst_as
        self.size = size
        self.kind = kind
        self.priority = priority
        self.fb = fb
        self.flow = flow
        self.seq = seq
        self.syn = syn
        self.route = None
        self.hop = 0
        self.sent = 0.0
        self.chain = None
        self.stage = 0
        self.reset_link = 0

    def __repr__(self) -> str:
        fb = self.fb.describe() if self.fb is not None else "-"
        return f"Packet(#{self.pid} {self.src}->{self.dst} {self.kind.name} k={self.priority} {self.size}B fb={fb})"
