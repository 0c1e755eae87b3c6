"""Access-router policing: request limiters, per-(sender, link) leaky buckets,
robust AIMD rate adjustment and feedback reset on forward."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional

from . import crypto
from .crypto import Feedback, KeyRegistry, Verdict
from .packet import Kind, Packet
from .params import Parameters
from .wire import Action, Mode


class Decision(Enum):
    PASS = "pass"
    CACHED = "cached"
    DROP = "drop"


PASS, CACHED, DROP = Decision.PASS, Decision.CACHED, Decision.DROP


def request_cost(priority: int) -> float:
    return 0.0 if priority <= 0 else float(2 ** (priority - 1))


@dataclass
class RequestLimiter:
    """Per-sender token limiter for request packets.

    The affordability check uses the uncapped token count and the depth cap
    is applied only afterwards, so a sender that waited long enough can
    always afford a high level once.
    """

    tokens: float
    refill_rate: float
    depth: float
    last_refill_ts: float

    def police(self, priority: int, now: float) -> Decision:
        if priority <= 0:
            return PASS
        available = self.tokens + (now - self.last_refill_ts) * self.refill_rate
        cost = request_cost(priority)
        if cost > available:
            return DROP
        self.tokens = max(0.0, min(available, self.depth) - cost)
        self.last_refill_ts = now
        return PASS

    def ready_at(self, priority: int) -> float:
        """Earliest time a level-``priority`` packet would be admitted."""
        deficit = request_cost(priority) - self.tokens
        return self.last_refill_ts + max(0.0, deficit) / self.refill_rate


@dataclass(eq=False)
class RateLimiterState:
    """Leaky bucket policing one sender's regular traffic through one link."""

    sender: int
    link: int
    r_lim: float
    created_ts: float = 0.0
    cache: deque = field(default_factory=deque)
    cache_bytes: int = 0
    last_depart_ts: float = -math.inf
    bytes_sent: int = 0
    t_s: float = 0.0
    has_incr: bool = False
    last_activity_ts: float = 0.0
    last_drop_ts: float = -math.inf
    has_incr_star: bool = False
    is_active: bool = False
    is_active_star: bool = False
    unleash_at: Optional[float] = None
    gen: int = 0
    alive: bool = True
    total_bytes: int = 0

    def __post_init__(self) -> None:
        self.t_s = self.created_ts
        self.last_activity_ts = self.created_ts

    def projected_departure(self, size: int) -> float:
        return self.last_depart_ts + (self.cache_bytes + size) * 8.0 / self.r_lim

    def would_drop(self, size: int, now: float, max_delay: float) -> bool:
        if not self.cache and (now - self.last_depart_ts) * self.r_lim >= size * 8:
            return False
        return self.projected_departure(size) - now > max_delay

    def police(self, pkt: Packet, now: float, max_delay: float) -> Decision:
        size = pkt.size
        if not self.cache:
            if (now - self.last_depart_ts) * self.r_lim >= size * 8:
                self.last_depart_ts = now
                self.bytes_sent += size
                self.total_bytes += size
                return PASS
        if self.projected_departure(size) - now > max_delay:
            self.last_drop_ts = now
            return DROP
        self.cache.append(pkt)
        self.cache_bytes += size
        if len(self.cache) == 1:
            self.unleash_at = self.last_depart_ts + size * 8.0 / self.r_lim
        return CACHED

    def unleash(self, now: float) -> Optional[Packet]:
        if not self.cache:
            self.unleash_at = None
            return None
        pkt = self.cache.popleft()
        self.cache_bytes -= pkt.size
        self.last_depart_ts = now
        self.bytes_sent += pkt.size
        self.total_bytes += pkt.size
        if self.cache:
            self.unleash_at = now + self.cache[0].size * 8.0 / self.r_lim
        else:
            self.unleash_at = None
        return pkt

    def update_status(self, fb: Feedback, now: float) -> None:
        """Record feedback about this limiter's own link."""
        if fb.mode == Mode.MON and fb.link == self.link:
            self.observe(fb.action, fb.ts, now)

    def observe(self, action: Action, ts: int, now: float) -> None:
        self.is_active = True
        if action == Action.INCR:
            if ts >= self.t_s:
                self.has_incr = True
        else:
            self.last_activity_ts = now

    def update_status_foreign(self, fb: Feedback) -> None:
        """Record feedback about another on-path link (rate-limiter inference)."""
        if fb.mode != Mode.MON or fb.link == self.link:
            return
        self.is_active_star = True
        if fb.action == Action.INCR and fb.ts >= self.t_s:
            self.has_incr_star = True

    def throughput(self, now: float) -> float:
        span = now - self.t_s
        return self.bytes_sent * 8.0 / span if span > 0 else 0.0

    def _end_interval(self, now: float) -> None:
        self.has_incr = False
        self.has_incr_star = False
        self.is_active = False
        self.is_active_star = False
        self.t_s = now
        self.bytes_sent = 0

    def adjust(self, now: float, params: Parameters) -> float:
        """Apply one robust-AIMD step; returns the measured interval throughput."""
        tput = self.throughput(now)
        if self.has_incr:
            if tput > self.r_lim / 2:
                self.r_lim += params.delta_ai
        else:
            self.r_lim = max(params.rate_floor, self.r_lim * (1.0 - params.delta_md))
        self._end_interval(now)
        return tput

    def adjust_v2(self, now: float, params: Parameters) -> float:
        """AIMD step extended with inferred feedback about other on-path links."""
        tput = self.throughput(now)
        if self.has_incr or self.has_incr_star:
            if tput >= self.r_lim / 2:
                self.r_lim += params.delta_ai
        elif self.is_active:
            self.r_lim = max(params.rate_floor, self.r_lim * (1.0 - params.delta_md))
        elif self.is_active_star:
            pass
        else:
            self.r_lim = max(params.rate_floor, self.r_lim * (1.0 - params.delta_md))
        self._end_interval(now)
        return tput

    def reschedule(self, now: float) -> None:
        """Re-time the pending unleash after a rate change."""
        if self.cache:
            self.unleash_at = max(now, self.last_depart_ts + self.cache[0].size * 8.0 / self.r_lim)


class _ManualClock:
    """Stand-in scheduler that just records requested callbacks."""

    def __init__(self):
        self.pending: list = []

    def at(self, t, fn, arg=None):
        self.pending.append((t, fn, arg))


class AccessRouter:
    """Validates, polices and re-stamps traffic from the hosts it serves.

    ``scheduler`` needs an ``at(time, fn, arg)`` method; ``emit(pkt, now)``
    receives every forwarded packet.
    """

    policy = "core"

    def __init__(self, as_id: int, params: Parameters, registry: KeyRegistry,
                 link_to_as: Mapping[int, int], scheduler=None,
                 emit: Optional[Callable[[Packet, float], None]] = None,
                 compromised: bool = False):
        self.as_id = as_id
        self.params = params
        self.registry = registry
        self.link_to_as = link_to_as
        self.scheduler = scheduler if scheduler is not None else _ManualClock()
        self.emit = emit if emit is not None else (lambda pkt, now: None)
        self.compromised = compromised
        self.request_limiters: dict[int, RequestLimiter] = {}
        self.limiters: dict[tuple[int, int], RateLimiterState] = {}
        self.on_adjust: Optional[Callable[[RateLimiterState, float, float], None]] = None
        self.retry_at: Optional[float] = None
        self._gc_armed = False
        self.stats = {"forwarded": 0, "dropped_request": 0, "dropped_regular": 0,
                      "invalid": 0, "expired": 0, "dropped_late": 0}

    # -- keys ----------------------------------------------------------------

    def _reg(self, now: float) -> KeyRegistry:
        reg = self.registry
        if now >= (reg.epoch + 1) * reg.period:
            reg = self.registry = reg.advance(now)
        return reg

    # -- request path --------------------------------------------------------

    def request_limiter(self, src: int, now: float) -> RequestLimiter:
        lim = self.request_limiters.get(src)
        if lim is None:
            p = self.params
            lim = self.request_limiters[src] = RequestLimiter(p.request_depth, p.l1, p.request_depth, now)
        return lim

    def police_request(self, pkt: Packet, now: float) -> Decision:
        lim = self.request_limiter(pkt.src, now)
        if lim.police(pkt.priority, now) is DROP:
            self.stats["dropped_request"] += 1
            self.retry_at = lim.ready_at(pkt.priority)
            return DROP
        pkt.kind = Kind.REQUEST
        pkt.reset_link = 0
        self._forward(pkt, now)
        return PASS

    # -- regular path --------------------------------------------------------

    def classify_and_police(self, pkt: Packet, now: float) -> Decision:
        """Entry point for every packet arriving from a local host."""
        self.retry_at = None
        if pkt.kind == Kind.LEGACY:
            self._forward(pkt, now)
            return PASS
        if pkt.kind == Kind.REQUEST or pkt.fb is None:
            pkt.fb = None
            return self.police_request(pkt, now)
        verdict = self.validate(pkt, now)
        if not verdict.ok:
            self.stats["expired" if verdict is Verdict.INVALID_EXPIRED else "invalid"] += 1
            pkt.kind = Kind.REQUEST
            pkt.fb = None
            return self.police_request(pkt, now)
        if verdict is Verdict.VALID_NOP:
            pkt.reset_link = 0
            self._forward(pkt, now)
            return PASS
        return self.police_mon(pkt, now)

    def validate(self, pkt: Packet, now: float) -> Verdict:
        return crypto.validate(pkt.fb, pkt.src, pkt.dst, now, self._reg(now),
                               self.link_to_as, self.params.w)

    def get_limiter(self, src: int, link: int, now: float) -> RateLimiterState:
        rl = self.limiters.get((src, link))
        if rl is None:
            rl = RateLimiterState(src, link, self.params.initial_rate, created_ts=now)
            self.limiters[(src, link)] = rl
            self.scheduler.at(now + self.params.i_lim, self._adjust_event, rl)
            if not self._gc_armed:
                self._gc_armed = True
                self.scheduler.at(now + self._gc_period(), self._gc_event, None)
        return rl

    def police_mon(self, pkt: Packet, now: float) -> Decision:
        fb = pkt.fb
        pkt.reset_link = fb.link
        if self.compromised:
            self._forward(pkt, now)
            return PASS
        rl = self.get_limiter(pkt.src, fb.link, now)
        rl.update_status(fb, now)
        return self.run_chain(pkt, [rl], now)

    def run_chain(self, pkt: Packet, chain: list, now: float) -> Decision:
        """Pass ``pkt`` through every limiter in ``chain`` in order.

        The packet is dropped up front if any limiter's delay bound would be
        exceeded; otherwise it is held by the first limiter that cannot
        release it immediately and resumes at the next stage when unleashed.
        """
        max_delay = self.params.max_cache_delay
        size = pkt.size
        for rl in chain:
            if rl.would_drop(size, now, max_delay):
                rl.last_drop_ts = now
                self.stats["dropped_regular"] += 1
                # Unleashing leaves the projected departure unchanged, so only
                # the delay bound or the next rate change can readmit it.
                self.retry_at = min(rl.projected_departure(size) - max_delay,
                                    rl.t_s + self.params.i_lim)
                return DROP
        pkt.chain = chain
        pkt.stage = 0
        d = self._continue_chain(pkt, now)
        if d is CACHED and len(chain) == 1:
            # a same-sized follow-up is certain to be dropped before this
            rl = chain[0]
            self.retry_at = min(rl.projected_departure(size) - max_delay,
                                rl.t_s + self.params.i_lim)
        return d

    def _continue_chain(self, pkt: Packet, now: float) -> Decision:
        chain = pkt.chain
        max_delay = self.params.max_cache_delay
        for i in range(pkt.stage, len(chain)):
            rl = chain[i]
            d = rl.police(pkt, now, max_delay)
            if d is PASS:
                continue
            if d is CACHED:
                pkt.stage = i
                if len(rl.cache) == 1:
                    self._arm_unleash(rl)
                return CACHED
            self.stats["dropped_regular"] += 1
            if i:
                self.stats["dropped_late"] += 1
            return DROP
        pkt.chain = None
        self._forward(pkt, now)
        return PASS

    def _arm_unleash(self, rl: RateLimiterState) -> None:
        rl.gen += 1
        self.scheduler.at(rl.unleash_at, self._unleash_event, (rl, rl.gen))

    def _unleash_event(self, arg) -> None:
        rl, gen = arg
        if gen != rl.gen or not rl.alive:
            return
        now = rl.unleash_at
        pkt = rl.unleash(now)
        if rl.cache:
            self._arm_unleash(rl)
        if pkt is not None:
            pkt.stage += 1
            self._continue_chain(pkt, now)

    # -- forwarding ----------------------------------------------------------

    def reset_feedback_on_forward(self, pkt: Packet, now: float) -> None:
        reg = self._reg(now)
        if pkt.reset_link:
            pkt.fb = crypto.stamp_incr(pkt.src, pkt.dst, now, pkt.reset_link, reg)
        else:
            pkt.fb = crypto.stamp_nop(pkt.src, pkt.dst, now, reg)

    def _forward(self, pkt: Packet, now: float) -> None:
        if pkt.kind != Kind.LEGACY:
            self.reset_feedback_on_forward(pkt, now)
        self.stats["forwarded"] += 1
        self.emit(pkt, now)

    # -- periodic work -------------------------------------------------------

    def adjust_limiter(self, rl: RateLimiterState, now: float) -> float:
        return rl.adjust(now, self.params)

    def _adjust_event(self, rl: RateLimiterState) -> None:
        if not rl.alive:
            return
        now = rl.t_s + self.params.i_lim
        before = rl.r_lim
        tput = self.adjust_limiter(rl, now)
        if rl.r_lim != before and rl.cache:
            rl.reschedule(now)
            self._arm_unleash(rl)
        if self.on_adjust is not None:
            self.on_adjust(rl, now, tput)
        self.scheduler.at(now + self.params.i_lim, self._adjust_event, rl)

    def _gc_period(self) -> float:
        return max(1.0, min(self.params.t_a / 4.0, 60.0))

    def gc_rate_limiters(self, now: float) -> int:
        """Drop limiters that saw no L-down and discarded nothing for ``t_a``."""
        t_a = self.params.t_a
        dead = [key for key, rl in self.limiters.items()
                if now - rl.last_activity_ts > t_a and now - rl.last_drop_ts > t_a and not rl.cache]
        for key in dead:
            self.limiters.pop(key).alive = False
        return len(dead)

    def _gc_event(self, _arg) -> None:
        now = self._now_hint
        self.gc_rate_limiters(now)
        if self.limiters:
            self.scheduler.at(now + self._gc_period(), self._gc_event, None)
        else:
            self._gc_armed = False

    @property
    def _now_hint(self) -> float:
        return getattr(self.scheduler, "now", 0.0)
