"""Multi-bottleneck policing.

Two remedies for flows that cross more than one monitored link:

* chained feedback, where every monitored link on the path appends its own
  verdict and folds it into a running authenticator, and the access router
  polices the packet with one limiter per listed link;
* limiter inference, where packets keep single-link feedback but the access
  router remembers which links lie toward each destination prefix and
  polices with all of them.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import Mapping, Optional

from .access import PASS, AccessRouter, Decision, RateLimiterState
from .crypto import KeyRegistry, MissingASKeyError, Verdict, mac64
from .packet import Packet
from .wire import MAX_MULTI_ENTRIES, Action

_TAG_BASE = b"\x04"
_TAG_FOLD = b"\x05"
_BASE_MSG = struct.Struct(">III")
_FOLD_MSG = struct.Struct(">IIIIBQ")


@dataclass(frozen=True, slots=True)
class MultiFeedback:
    ts: int
    entries: tuple = ()
    token: int = 0

    @property
    def links(self) -> list[int]:
        return [link for link, _ in self.entries]

    @property
    def is_incr(self) -> bool:
        return bool(self.entries) and all(a == Action.INCR for _, a in self.entries)

    @property
    def is_decr(self) -> bool:
        return any(a == Action.DECR for _, a in self.entries)

    def describe(self) -> str:
        parts = [f"L{link}:{'up' if a == Action.INCR else 'down'}" for link, a in self.entries]
        return f"[{' '.join(parts) or 'nop'}]@{self.ts}"


@functools.lru_cache(maxsize=1 << 16)
def base_token(key: bytes, src: int, dst: int, ts: int) -> int:
    return mac64(key, _TAG_BASE + _BASE_MSG.pack(src, dst, ts))


@functools.lru_cache(maxsize=1 << 16)
def fold_token(key: bytes, src: int, dst: int, ts: int, link: int, action: Action, token: int) -> int:
    return mac64(key, _TAG_FOLD + _FOLD_MSG.pack(src, dst, ts, link, int(action), token))


def stamp_multi_base(src: int, dst: int, now: float, reg: KeyRegistry) -> MultiFeedback:
    ts = int(now)
    return MultiFeedback(ts, (), base_token(reg.access_key(), src, dst, ts))


def stamp_multi(fb: MultiFeedback, src: int, dst: int, link: int, action: Action,
                key: Optional[bytes]) -> MultiFeedback:
    """Append ``(link, action)`` and fold it over the previous token."""
    if key is None:
        raise MissingASKeyError(link)
    if len(fb.entries) >= MAX_MULTI_ENTRIES:
        raise ValueError(f"feedback already carries {MAX_MULTI_ENTRIES} entries")
    token = fold_token(key, src, dst, fb.ts, link, action, fb.token)
    return MultiFeedback(fb.ts, fb.entries + ((link, Action(action)),), token)


def validate_multi(fb: MultiFeedback, src: int, dst: int, now: float, reg: KeyRegistry,
                   link_to_as: Mapping[int, int], w: float = 4.0) -> Verdict:
    """Replay the fold; VALID_NOP for an empty chain, VALID_INCR otherwise."""
    if abs(now - fb.ts) > w:
        return Verdict.INVALID_EXPIRED
    keys = []
    for link, _ in fb.entries:
        remote = link_to_as.get(link)
        key = reg.pair_key(remote) if remote is not None else None
        if key is None:
            return Verdict.INVALID
        keys.append(key)
    for epoch in (reg.epoch, reg.epoch - 1):
        token = base_token(reg.access_key(epoch), src, dst, fb.ts)
        for key, (link, action) in zip(keys, fb.entries):
            token = fold_token(key, src, dst, fb.ts, link, action, token)
        if token == fb.token:
            return Verdict.VALID_NOP if not fb.entries else Verdict.VALID_INCR
    return Verdict.INVALID


class MultiFeedbackAccessRouter(AccessRouter):
    """Polices each packet with a limiter per link named in its feedback chain."""

    policy = "netfence-b1"

    def validate(self, pkt: Packet, now: float) -> Verdict:
        if not isinstance(pkt.fb, MultiFeedback):
            return Verdict.INVALID
        return validate_multi(pkt.fb, pkt.src, pkt.dst, now, self._reg(now),
                              self.link_to_as, self.params.w)

    def police_mon(self, pkt: Packet, now: float) -> Decision:
        return self.police_multi(pkt, now)

    def police_multi(self, pkt: Packet, now: float) -> Decision:
        fb = pkt.fb
        if self.compromised:
            self._forward(pkt, now)
            return PASS
        chain = []
        for link, action in fb.entries:
            rl = self.get_limiter(pkt.src, link, now)
            rl.observe(action, fb.ts, now)
            chain.append(rl)
        chain.sort(key=lambda r: r.r_lim)
        return self.run_chain(pkt, chain, now)

    def reset_feedback_on_forward(self, pkt: Packet, now: float) -> None:
        pkt.fb = stamp_multi_base(pkt.src, pkt.dst, now, self._reg(now))


class InferenceCache:
    """Destination prefix -> {link: last time feedback for it was seen}."""

    def __init__(self, staleness: float):
        self.staleness = staleness
        self.entries: dict[int, dict[int, float]] = {}

    def update(self, prefix: int, link: int, now: float) -> None:
        self.entries.setdefault(prefix, {})[link] = now

    def links(self, prefix: int, now: float) -> list[int]:
        entry = self.entries.get(prefix)
        if not entry:
            return []
        stale = [link for link, seen in entry.items() if now - seen > self.staleness]
        for link in stale:
            del entry[link]
        if not entry:
            del self.entries[prefix]
            return []
        return sorted(entry)

    def forget_link(self, link: int) -> None:
        for prefix in list(self.entries):
            entry = self.entries[prefix]
            entry.pop(link, None)
            if not entry:
                del self.entries[prefix]

    def __len__(self) -> int:
        return len(self.entries)


def update_cache(cache: InferenceCache, prefix: int, fb, now: float) -> None:
    if fb is not None and fb.link:
        cache.update(prefix, fb.link, now)


def infer_limiters(router: "InferenceAccessRouter", pkt: Packet, now: float) -> list[RateLimiterState]:
    links = router.cache.links(pkt.dst_as, now)
    return [router.get_limiter(pkt.src, link, now) for link in links]


def adjust_rate_limit_v2(rl: RateLimiterState, now: float, params) -> float:
    return rl.adjust_v2(now, params)


class InferenceAccessRouter(AccessRouter):
    """Single-link feedback, but policing with every link inferred toward the prefix."""

    policy = "netfence-b2"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cache = InferenceCache(self.params.inference_staleness)

    def police_mon(self, pkt: Packet, now: float) -> Decision:
        fb = pkt.fb
        if self.compromised:
            pkt.reset_link = fb.link
            self._forward(pkt, now)
            return PASS
        update_cache(self.cache, pkt.dst_as, fb, now)
        chain = infer_limiters(self, pkt, now)
        for rl in chain:
            if rl.link == fb.link:
                rl.update_status(fb, now)
            else:
                rl.update_status_foreign(fb)
        low = min(chain, key=lambda r: (r.r_lim, r.link))
        pkt.reset_link = low.link
        chain.sort(key=lambda r: r.r_lim)
        return self.run_chain(pkt, chain, now)

    def adjust_limiter(self, rl: RateLimiterState, now: float) -> float:
        return adjust_rate_limit_v2(rl, now, self.params)

    def gc_rate_limiters(self, now: float) -> int:
        removed = super().gc_rate_limiters(now)
        if removed:
            live = {link for _, link in self.limiters}
            for link in {l for entry in self.cache.entries.values() for l in entry} - live:
                self.cache.forget_link(link)
        return removed


__all__ = [
    "MultiFeedback", "base_token", "fold_token", "stamp_multi", "stamp_multi_base",
    "validate_multi", "MultiFeedbackAccessRouter", "InferenceCache", "update_cache",
    "infer_limiters", "adjust_rate_limit_v2", "InferenceAccessRouter",
]
