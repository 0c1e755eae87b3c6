"""Stamping and validation of congestion-policing feedback.

All authenticators are AES-128-CMAC tags truncated to their 64 most
significant bits. Three message shapes are authenticated:

* nop:  ``(src, dst, ts, link_null, nop)`` under the access router key
* incr: ``(src, dst, ts, L, mon, incr)`` under the access router key
* decr: ``(src, dst, ts, L, mon, decr, token_nop)`` under the key shared by
  the bottleneck's AS and the sender's AS

Each message is prefixed with a one-byte domain tag so that no two shapes
can collide.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

from cryptography.hazmat.primitives import cmac
from cryptography.hazmat.primitives.ciphers import algorithms

from .wire import Action, Mode

NOP, MON = Mode.NOP, Mode.MON
INCR, DECR = Action.INCR, Action.DECR

_TAG_NOP = b"\x01"
_TAG_INCR = b"\x02"
_TAG_DECR = b"\x03"

_NOP_MSG = struct.Struct(">IIIIB")
_INCR_MSG = struct.Struct(">IIIIBB")
_DECR_MSG = struct.Struct(">IIIIBBQ")

_cmac_cache: dict[bytes, cmac.CMAC] = {}


def mac64(key: bytes, msg: bytes) -> int:
    """AES-CMAC of ``msg`` truncated to 64 bits."""
    base = _cmac_cache.get(key)
    if base is None:
        if len(key) != 16:
            raise ValueError("keys are 128-bit")
        if len(_cmac_cache) > 4096:
            _cmac_cache.clear()
        base = _cmac_cache[key] = cmac.CMAC(algorithms.AES(key))
    c = base.copy()
    c.update(msg)
    return int.from_bytes(c.finalize()[:8], "big")


class Verdict(Enum):
    VALID_NOP = "valid_nop"
    VALID_INCR = "valid_incr"
    VALID_DECR = "valid_decr"
    INVALID = "invalid"
    INVALID_EXPIRED = "invalid_expired"

    @property
    def ok(self) -> bool:
        return self in (Verdict.VALID_NOP, Verdict.VALID_INCR, Verdict.VALID_DECR)


class MissingASKeyError(KeyError):
    """No shared key is provisioned for an AS pair."""


@dataclass(frozen=True, slots=True)
class Feedback:
    mode: Mode
    link: int
    action: Action
    ts: int
    mac: int
    token_nop: int = 0

    @property
    def is_incr(self) -> bool:
        return self.mode == MON and self.action == INCR

    @property
    def is_decr(self) -> bool:
        return self.mode == MON and self.action == DECR

    def describe(self) -> str:
        if self.mode == NOP:
            return f"nop@{self.ts}"
        arrow = "up" if self.action == INCR else "down"
        return f"L{self.link}:{arrow}@{self.ts}"


class AccessSecrets:
    """Epoch-indexed access-router keys derived from a master secret."""

    def __init__(self, master: bytes):
        self._master = master
        self._keys: dict[int, bytes] = {}

    @classmethod
    def from_seed(cls, seed: int, router_id: int) -> "AccessSecrets":
        return cls(hashlib.sha256(f"access:{seed}:{router_id}".encode()).digest())

    def __getitem__(self, epoch: int) -> bytes:
        key = self._keys.get(epoch)
        if key is None:
            key = hmac.new(self._master, epoch.to_bytes(8, "big", signed=True), hashlib.sha256).digest()[:16]
            self._keys[epoch] = key
        return key


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class KeyRegistry:
    """Keys held by one router: its own rotating secret plus inter-AS keys.

    Validation accepts MACs made under the current epoch or the one before.
    """

    local_as: int
    access_secret: Optional[AccessSecrets] = None
    as_pair_keys: Mapping[tuple[int, int], bytes] = field(default_factory=dict)
    epoch: int = 0
    period: float = 16.0

    def access_key(self, epoch: Optional[int] = None) -> bytes:
        if self.access_secret is None:
            raise KeyError(f"router in AS {self.local_as} holds no access secret")
        return self.access_secret[self.epoch if epoch is None else epoch]

    def pair_key(self, remote_as: int) -> Optional[bytes]:
        return self.as_pair_keys.get(_pair(self.local_as, remote_as))

    def advance(self, now: float) -> "KeyRegistry":
        """Rotate as many times as needed for the epoch to cover ``now``."""
        reg = self
        while now >= (reg.epoch + 1) * reg.period:
            reg = rotate_access_key(reg, now)
        return reg


def rotate_access_key(reg: KeyRegistry, now: float) -> KeyRegistry:
    """Return a registry whose access-key epoch is one later."""
    return replace(reg, epoch=reg.epoch + 1)


def make_pair_keys(pairs: Mapping[tuple[int, int], bytes]) -> dict[tuple[int, int], bytes]:
    out = {}
    for (a, b), key in pairs.items():
        if len(key) != 16:
            raise ValueError(f"key for AS pair ({a}, {b}) is not 128 bits")
        out[_pair(a, b)] = key
    return out


def derive_as_keys(seed: int, as_ids) -> dict[tuple[int, int], bytes]:
    ids = sorted(set(as_ids))
    keys = {}
    for i, a in enumerate(ids):
        for b in ids[i:]:
            keys[(a, b)] = hashlib.sha256(f"as-pair:{seed}:{a}:{b}".encode()).digest()[:16]
    return keys


def load_as_keys(path) -> dict[tuple[int, int], bytes]:
    """Read a key table with lines ``as_a as_b hex128key``; ``#`` starts a comment."""
    keys = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'as_a as_b hexkey'")
        try:
            a, b, key = int(parts[0]), int(parts[1]), bytes.fromhex(parts[2])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if len(key) != 16:
            raise ValueError(f"{path}:{lineno}: key must be 32 hex digits")
        keys[_pair(a, b)] = key
    return keys


def dump_as_keys(keys: Mapping[tuple[int, int], bytes], path) -> None:
    lines = [f"{a} {b} {key.hex()}" for (a, b), key in sorted(keys.items())]
    Path(path).write_text("\n".join(lines) + "\n")


# -- MAC message builders ----------------------------------------------------
# Memoised: a sender emits many packets per one-second timestamp, and the
# tags are pure functions of their inputs.

@functools.lru_cache(maxsize=1 << 16)
def nop_token(key: bytes, src: int, dst: int, ts: int) -> int:
    return mac64(key, _TAG_NOP + _NOP_MSG.pack(src, dst, ts, 0, NOP))


@functools.lru_cache(maxsize=1 << 16)
def incr_mac(key: bytes, src: int, dst: int, ts: int, link: int) -> int:
    return mac64(key, _TAG_INCR + _INCR_MSG.pack(src, dst, ts, link, MON, INCR))


@functools.lru_cache(maxsize=1 << 16)
def decr_mac(key: bytes, src: int, dst: int, ts: int, link: int, token: int) -> int:
    return mac64(key, _TAG_DECR + _DECR_MSG.pack(src, dst, ts, link, MON, DECR, token))


# -- stamping ----------------------------------------------------------------

def stamp_nop(src: int, dst: int, now: float, reg: KeyRegistry) -> Feedback:
    ts = int(now)
    return Feedback(NOP, 0, INCR, ts, nop_token(reg.access_key(), src, dst, ts))


def stamp_incr(src: int, dst: int, now: float, link: int, reg: KeyRegistry) -> Feedback:
    if link == 0:
        raise ValueError("link id 0 is reserved for nop feedback")
    ts = int(now)
    key = reg.access_key()
    return Feedback(MON, link, INCR, ts, incr_mac(key, src, dst, ts, link),
                    nop_token(key, src, dst, ts))


def stamp_decr(fb: Feedback, src: int, dst: int, link: int, reg: KeyRegistry,
               remote_as: int) -> Feedback:
    """Overwrite ``fb`` with L-down for ``link``; the timestamp is kept.

    A nop feedback's MAC *is* the access router's token, so it is folded in
    directly; a mon feedback contributes its ``token_nop`` field. The output
    carries a zeroed token.
    """
    key = reg.pair_key(remote_as)
    if key is None:
        raise MissingASKeyError((reg.local_as, remote_as))
    token = fb.mac if fb.mode == NOP else fb.token_nop
    return Feedback(MON, link, DECR, fb.ts, decr_mac(key, src, dst, fb.ts, link, token), 0)


# -- validation --------------------------------------------------------------

def _epochs(reg: KeyRegistry):
    return (reg.epoch, reg.epoch - 1)


def validate(fb: Feedback, src: int, dst: int, now: float, reg: KeyRegistry,
             link_to_as: Mapping[int, int], w: float = 4.0) -> Verdict:
    if abs(now - fb.ts) > w:
        return Verdict.INVALID_EXPIRED
    if fb.mac == 0:
        return Verdict.INVALID
    ts = fb.ts
    if fb.mode == NOP:
        if fb.link != 0 or fb.action != INCR or fb.token_nop != 0:
            return Verdict.INVALID
        for e in _epochs(reg):
            if nop_token(reg.access_key(e), src, dst, ts) == fb.mac:
                return Verdict.VALID_NOP
        return Verdict.INVALID
    if fb.mode != MON or fb.link == 0:
        return Verdict.INVALID
    if fb.action == INCR:
        for e in _epochs(reg):
            key = reg.access_key(e)
            if incr_mac(key, src, dst, ts, fb.link) == fb.mac:
                if nop_token(key, src, dst, ts) == fb.token_nop:
                    return Verdict.VALID_INCR
                return Verdict.INVALID
        return Verdict.INVALID
    if fb.action != DECR or fb.token_nop != 0:
        return Verdict.INVALID
    link_as = link_to_as.get(fb.link)
    if link_as is None:
        return Verdict.INVALID
    pair = reg.pair_key(link_as)
    if pair is None:
        return Verdict.INVALID
    for e in _epochs(reg):
        token = nop_token(reg.access_key(e), src, dst, ts)
        if decr_mac(pair, src, dst, ts, fb.link, token) == fb.mac:
            return Verdict.VALID_DECR
    return Verdict.INVALID
