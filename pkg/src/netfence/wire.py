"""Bit-exact shim header codec.

Layout (big-endian)::

    0   flags     fwd_mode:1 fwd_action:1 ret_present:1 ret_mode:1
                  ret_action:1 ret_ts2:2 reserved:1
    1   proto     u8
    2   priority  u8
    3   fwd_ts    u32 (whole seconds)
    7   fwd_mac   u64
    15  [fwd_link_id u32, token_nop u64]   iff fwd_mode == MON
        [ret_mac u64]                      iff ret_present
        [ret_link_id u32]                  iff ret_present and ret_mode == MON

The return section carries only the two low bits of its timestamp; the
receiving access router recovers the full value with
:func:`reconstruct_timestamp`.

The multi-bottleneck variant (:func:`encode_multi`) is a separate
variable-length record: ``ts u32, count u8, count * (link u32, action u8),
token u64``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional


class Mode(IntEnum):
    NOP = 0
    MON = 1


class Action(IntEnum):
    INCR = 0
    DECR = 1


class HeaderError(ValueError):
    """Base class for codec failures."""


class TruncatedError(HeaderError):
    """The buffer ends before the fields its flag bits announce."""


class MalformedError(HeaderError):
    """Reserved bits set, inconsistent flags, or trailing bytes."""


_FIXED = struct.Struct(">BBBIQ")
FIXED_SIZE = _FIXED.size  # 15
LINK_SIZE = 4
MAC_SIZE = 8

_F_FWD_MON = 0x80
_F_FWD_DECR = 0x40
_F_RET = 0x20
_F_RET_MON = 0x10
_F_RET_DECR = 0x08
_TS2_SHIFT = 1
_F_RESERVED = 0x01

_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class NetfenceHeader:
    fwd_mode: Mode = Mode.NOP
    fwd_action: Action = Action.INCR
    proto: int = 0
    priority: int = 0
    fwd_ts: int = 0
    fwd_mac: int = 0
    fwd_link_id: Optional[int] = None
    token_nop: Optional[int] = None
    ret_present: bool = False
    ret_mode: Mode = Mode.NOP
    ret_action: Action = Action.INCR
    ret_ts2: int = 0
    ret_mac: Optional[int] = None
    ret_link_id: Optional[int] = None

    def check(self) -> None:
        """Raise :class:`MalformedError` unless the presence invariants hold."""
        mon = self.fwd_mode == Mode.MON
        if mon != (self.fwd_link_id is not None) or mon != (self.token_nop is not None):
            raise MalformedError("fwd_link_id and token_nop must be present iff fwd_mode is MON")
        if not mon and self.fwd_action != Action.INCR:
            raise MalformedError("a NOP forward feedback must carry action INCR")
        if self.ret_present:
            if self.ret_mac is None:
                raise MalformedError("ret_mac is required when the return section is present")
            ret_mon = self.ret_mode == Mode.MON
            if ret_mon != (self.ret_link_id is not None):
                raise MalformedError("ret_link_id must be present iff ret_mode is MON")
            if not ret_mon and self.ret_action != Action.INCR:
                raise MalformedError("a NOP return feedback must carry action INCR")
        else:
            if (self.ret_mac is not None or self.ret_link_id is not None or self.ret_ts2
                    or self.ret_mode != Mode.NOP or self.ret_action != Action.INCR):
                raise MalformedError("return fields set while ret_present is false")
        _range("proto", self.proto, 0xFF)
        _range("priority", self.priority, 0xFF)
        _range("fwd_ts", self.fwd_ts, _U32)
        _range("fwd_mac", self.fwd_mac, _U64)
        _range("ret_ts2", self.ret_ts2, 3)
        for name in ("fwd_link_id", "ret_link_id"):
            v = getattr(self, name)
            if v is not None:
                _range(name, v, _U32)
        for name in ("token_nop", "ret_mac"):
            v = getattr(self, name)
            if v is not None:
                _range(name, v, _U64)


def _range(name: str, value: int, hi: int) -> None:
    if not 0 <= value <= hi:
        raise MalformedError(f"{name}={value} out of range [0, {hi}]")


def encoded_size(fwd_mon: bool, ret_present: bool, ret_mon: bool) -> int:
    n = FIXED_SIZE
    if fwd_mon:
        n += LINK_SIZE + MAC_SIZE
    if ret_present:
        n += MAC_SIZE
        if ret_mon:
            n += LINK_SIZE
    return n


def encode_header(h: NetfenceHeader) -> bytes:
    h.check()
    flags = 0
    if h.fwd_mode == Mode.MON:
        flags |= _F_FWD_MON
    if h.fwd_action == Action.DECR:
        flags |= _F_FWD_DECR
    if h.ret_present:
        flags |= _F_RET
        if h.ret_mode == Mode.MON:
            flags |= _F_RET_MON
        if h.ret_action == Action.DECR:
            flags |= _F_RET_DECR
        flags |= h.ret_ts2 << _TS2_SHIFT
    out = [_FIXED.pack(flags, h.proto, h.priority, h.fwd_ts, h.fwd_mac)]
    if h.fwd_mode == Mode.MON:
        out.append(struct.pack(">IQ", h.fwd_link_id, h.token_nop))
    if h.ret_present:
        out.append(struct.pack(">Q", h.ret_mac))
        if h.ret_mode == Mode.MON:
            out.append(struct.pack(">I", h.ret_link_id))
    return b"".join(out)


def decode_header(b: bytes) -> NetfenceHeader:
    if len(b) < FIXED_SIZE:
        raise TruncatedError(f"need at least {FIXED_SIZE} bytes, got {len(b)}")
    flags, proto, priority, fwd_ts, fwd_mac = _FIXED.unpack_from(b, 0)
    if flags & _F_RESERVED:
        raise MalformedError("reserved flag bit is set")
    fwd_mon = bool(flags & _F_FWD_MON)
    ret_present = bool(flags & _F_RET)
    ret_mon = bool(flags & _F_RET_MON)
    if not ret_present and flags & (_F_RET_MON | _F_RET_DECR | (3 << _TS2_SHIFT)):
        raise MalformedError("return flag bits set while ret_present is clear")
    need = encoded_size(fwd_mon, ret_present, ret_mon)
    if len(b) < need:
        raise TruncatedError(f"flags announce {need} bytes, got {len(b)}")
    if len(b) > need:
        raise MalformedError(f"{len(b) - need} trailing byte(s) after header")
    off = FIXED_SIZE
    fwd_link_id = token_nop = ret_mac = ret_link_id = None
    if fwd_mon:
        fwd_link_id, token_nop = struct.unpack_from(">IQ", b, off)
        off += LINK_SIZE + MAC_SIZE
    if ret_present:
        (ret_mac,) = struct.unpack_from(">Q", b, off)
        off += MAC_SIZE
        if ret_mon:
            (ret_link_id,) = struct.unpack_from(">I", b, off)
    h = NetfenceHeader(
        fwd_mode=Mode(fwd_mon),
        fwd_action=Action(bool(flags & _F_FWD_DECR)),
        proto=proto,
        priority=priority,
        fwd_ts=fwd_ts,
        fwd_mac=fwd_mac,
        fwd_link_id=fwd_link_id,
        token_nop=token_nop,
        ret_present=ret_present,
        ret_mode=Mode(ret_mon) if ret_present else Mode.NOP,
        ret_action=Action(bool(flags & _F_RET_DECR)) if ret_present else Action.INCR,
        ret_ts2=(flags >> _TS2_SHIFT) & 3,
        ret_mac=ret_mac,
        ret_link_id=ret_link_id,
    )
    h.check()
    return h


def reconstruct_timestamp(now: int, ts2: int) -> int:
    """Return the unique ``t <= now`` with ``now - t < 4`` and ``t % 4 == ts2``."""
    now = int(now)
    if not 0 <= ts2 <= 3:
        raise ValueError(f"ts2 must be a 2-bit value, got {ts2}")
    return now - ((now - ts2) % 4)


def hexdump(b: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(b), width):
        chunk = b[off:off + width]
        hexpart = " ".join(f"{x:02x}" for x in chunk)
        lines.append(f"{off:04x}  {hexpart}")
    return "\n".join(lines)


# -- multi-bottleneck feedback record ---------------------------------------

_MULTI_HEAD = struct.Struct(">IB")
_MULTI_ENTRY = struct.Struct(">IB")
_MULTI_TOKEN = struct.Struct(">Q")
MAX_MULTI_ENTRIES = 8


def encode_multi(ts: int, entries, token: int) -> bytes:
    """Encode ``(ts, [(link, action), ...], token)``."""
    entries = list(entries)
    if len(entries) > MAX_MULTI_ENTRIES:
        raise MalformedError(f"at most {MAX_MULTI_ENTRIES} entries, got {len(entries)}")
    _range("ts", ts, _U32)
    _range("token", token, _U64)
    out = [_MULTI_HEAD.pack(ts, len(entries))]
    for link, action in entries:
        _range("link", link, _U32)
        out.append(_MULTI_ENTRY.pack(link, int(action)))
    out.append(_MULTI_TOKEN.pack(token))
    return b"".join(out)


def decode_multi(b: bytes) -> tuple[int, list[tuple[int, Action]], int]:
    if len(b) < _MULTI_HEAD.size:
        raise TruncatedError("multi-feedback record shorter than its fixed part")
    ts, count = _MULTI_HEAD.unpack_from(b, 0)
    if count > MAX_MULTI_ENTRIES:
        raise MalformedError(f"entry count {count} exceeds {MAX_MULTI_ENTRIES}")
    need = _MULTI_HEAD.size + count * _MULTI_ENTRY.size + _MULTI_TOKEN.size
    if len(b) < need:
        raise TruncatedError(f"record announces {need} bytes, got {len(b)}")
    if len(b) > need:
        raise MalformedError("trailing bytes after multi-feedback record")
    entries = []
    off = _MULTI_HEAD.size
    for _ in range(count):
        link, action = _MULTI_ENTRY.unpack_from(b, off)
        if action > 1:
            raise MalformedError(f"invalid action code {action}")
        entries.append((link, Action(action)))
        off += _MULTI_ENTRY.size
    (token,) = _MULTI_TOKEN.unpack_from(b, off)
    return ts, entries, token
