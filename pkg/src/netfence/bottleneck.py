"""Bottleneck output port: three channels, RED, attack detection and feedback marking."""

from __future__ import annotations

import math
import random
from collections import deque
from enum import Enum
from typing import Callable, Optional

from . import crypto
from .crypto import KeyRegistry
from .packet import Kind, Packet
from .params import Parameters
from .wire import Action, Mode


class LinkMode(Enum):
    NOP_STATE = "nop"
    MON_STATE = "mon"


NOP_STATE, MON_STATE = LinkMode.NOP_STATE, LinkMode.MON_STATE

MTU = 1500
# Credit arithmetic is in floating point; these keep rounding from stalling the
# request channel with zero-length waits.
_CREDIT_SLACK = 1e-6
_MIN_WAIT = 1e-9


def red_drop_probability(avg: float, min_th: float, max_th: float, max_p: float) -> float:
    """Classic RED early-drop curve (without the inter-drop count correction)."""
    if avg < min_th:
        return 0.0
    if avg > max_th:
        return 1.0
    return max_p * (avg - min_th) / (max_th - min_th)


class RedQueue:
    """FIFO with random early detection on an EWMA of the queue length."""

    def __init__(self, limit_bytes: float, min_th: float, max_th: float,
                 w_q: float = 0.1, max_p: float = 0.1, rng: Optional[random.Random] = None):
        self.limit = limit_bytes
        self.min_th = min_th
        self.max_th = max_th
        self.w_q = w_q
        self.max_p = max_p
        self.rng = rng or random.Random(0)
        self.avg = 0.0
        self.q: deque = deque()
        self.bytes = 0

    @classmethod
    def for_link(cls, capacity_bps: float, params: Parameters, rng=None) -> "RedQueue":
        lo, hi = params.red_thresholds(capacity_bps)
        return cls(params.q_lim(capacity_bps), lo, hi, params.w_q, params.red_max_p, rng)

    def enqueue(self, pkt: Packet, now: float = 0.0) -> bool:
        self.avg += self.w_q * (self.bytes - self.avg)
        if self.bytes + pkt.size > self.limit:
            return False
        avg = self.avg
        if avg >= self.min_th:
            if avg > self.max_th:
                return False
            p = self.max_p * (avg - self.min_th) / (self.max_th - self.min_th)
            if self.rng.random() < p:
                return False
        self.q.append(pkt)
        self.bytes += pkt.size
        return True

    def dequeue(self) -> Optional[Packet]:
        if not self.q:
            return None
        pkt = self.q.popleft()
        self.bytes -= pkt.size
        return pkt

    def drain(self) -> list:
        out = list(self.q)
        self.q.clear()
        self.bytes = 0
        return out

    def __len__(self) -> int:
        return len(self.q)


class DropTailQueue:
    def __init__(self, limit_bytes: float):
        self.limit = limit_bytes
        self.q: deque = deque()
        self.bytes = 0

    def enqueue(self, pkt: Packet, now: float = 0.0) -> bool:
        if self.bytes + pkt.size > self.limit:
            return False
        self.q.append(pkt)
        self.bytes += pkt.size
        return True

    def dequeue(self) -> Optional[Packet]:
        if not self.q:
            return None
        pkt = self.q.popleft()
        self.bytes -= pkt.size
        return pkt

    def drain(self) -> list:
        out = list(self.q)
        self.q.clear()
        self.bytes = 0
        return out

    def __len__(self) -> int:
        return len(self.q)


class DrrQueue:
    """Deficit round robin over lazily created per-key FIFOs.

    The buffer is shared: a queue may hold at most ``limit / n`` bytes where
    ``n`` counts the backlogged queues including the one being offered to.
    """

    def __init__(self, limit_bytes: float, key: Callable[[Packet], int], quantum: int = MTU):
        self.limit = limit_bytes
        self.key = key
        self.quantum = quantum
        self.queues: dict[int, deque] = {}
        self.qbytes: dict[int, int] = {}
        self.deficit: dict[int, int] = {}
        self.active: deque = deque()
        self._turn_started = False
        self.bytes = 0
        self.on_evict: Optional[Callable[[Packet], None]] = None

    def enqueue(self, pkt: Packet, now: float = 0.0) -> bool:
        k = self.key(pkt)
        q = self.queues.get(k)
        if q is None:
            q = self.queues[k] = deque()
            self.qbytes[k] = 0
            self.deficit[k] = 0
        n = len(self.active) + (0 if q else 1)
        cap = max(self.limit / n, 2 * MTU)
        if self.qbytes[k] + pkt.size > cap:
            return False
        limit = max(self.limit, 2 * MTU * n)
        while self.bytes + pkt.size > limit:
            # push out from the longest queue so one key cannot hog the buffer
            longest = max(self.active, key=self.qbytes.__getitem__)
            if longest == k or self.qbytes[longest] <= self.qbytes[k] + pkt.size:
                return False
            self._evict_tail(longest)
        if not q:
            self.active.append(k)
        q.append(pkt)
        self.qbytes[k] += pkt.size
        self.bytes += pkt.size
        return True

    def _evict_tail(self, k: int) -> None:
        q = self.queues[k]
        victim = q.pop()
        self.qbytes[k] -= victim.size
        self.bytes -= victim.size
        if not q:
            if self.active[0] == k:
                self._turn_started = False
            self.active.remove(k)
            self.deficit[k] = 0
        if self.on_evict is not None:
            self.on_evict(victim)

    def dequeue(self) -> Optional[Packet]:
        active = self.active
        while active:
            k = active[0]
            q = self.queues[k]
            if not self._turn_started:
                self.deficit[k] += self.quantum
                self._turn_started = True
            head = q[0]
            if head.size <= self.deficit[k]:
                q.popleft()
                self.deficit[k] -= head.size
                self.qbytes[k] -= head.size
                self.bytes -= head.size
                if not q:
                    self.deficit[k] = 0
                    active.popleft()
                    self._turn_started = False
                return head
            active.rotate(-1)
            self._turn_started = False
        return None

    def drain(self) -> list:
        out = []
        while True:
            pkt = self.dequeue()
            if pkt is None:
                return out
            out.append(pkt)

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())


class LinkMonitorState:
    """Attack-detection and hysteresis bookkeeping for one output link."""

    def __init__(self, params: Parameters):
        self.params = params
        self.mode = NOP_STATE
        self.mon_started_ts: Optional[float] = None
        self.last_attack_ts = -math.inf
        self.drop_rate_ewma = 0.0
        self.util_ewma = 0.0
        self.congestion_ts = -math.inf
        self.stamp_decr_until = -math.inf
        self.transitions: list[tuple[float, str]] = []

    def note_congestion(self, now: float) -> None:
        self.congestion_ts = now
        self.stamp_decr_until = now + 2.0 * self.params.i_lim

    def check_packet_loss(self, drops: int, dequeues: int, now: float) -> bool:
        """Fold one detection interval into the EWMA; returns True while under attack."""
        if dequeues > 0:
            self.drop_rate_ewma = 0.9 * self.drop_rate_ewma + 0.1 * (drops / dequeues)
        return self._judge(self.drop_rate_ewma > self.params.p_th, now)

    def check_utilization(self, utilization: float, now: float) -> bool:
        self.util_ewma = 0.9 * self.util_ewma + 0.1 * utilization
        return self._judge(self.util_ewma > self.params.util_threshold, now)

    def _judge(self, attacked: bool, now: float) -> bool:
        if attacked:
            if self.mode is NOP_STATE:
                self.mode = MON_STATE
                self.mon_started_ts = now
                self.transitions.append((now, MON_STATE.value))
            self.last_attack_ts = now
        elif self.mode is MON_STATE and now - self.last_attack_ts > self.params.t_b:
            self.mode = NOP_STATE
            self.mon_started_ts = None
            self.transitions.append((now, NOP_STATE.value))
        return attacked


def update_feedback(pkt: Packet, link_id: int, mon: LinkMonitorState, reg: KeyRegistry,
                    now: float, decr_until: Optional[float] = None) -> None:
    """Apply the ordered marking rules to a packet leaving a monitored link.

    nop becomes L-down; an existing L-down from any link is left alone; an
    L-up becomes L-down while the hysteresis window is open. Never stamps L-up.
    ``decr_until`` overrides the link-wide window (per-AS fallback).
    """
    fb = pkt.fb
    if fb is None:
        return
    until = mon.stamp_decr_until if decr_until is None else decr_until
    if fb.mode == Mode.NOP or (fb.action == Action.INCR and now < until):
        pkt.fb = crypto.stamp_decr(fb, pkt.src, pkt.dst, link_id, reg, pkt.src_as)


def update_feedback_multi(pkt: Packet, link_id: int, mon: LinkMonitorState, reg: KeyRegistry,
                          now: float, max_entries: int, decr_until: Optional[float] = None) -> None:
    """Append this link's verdict to a chained feedback record."""
    from .multipath import MultiFeedback, stamp_multi

    fb = pkt.fb
    if not isinstance(fb, MultiFeedback) or len(fb.entries) >= max_entries:
        return
    until = mon.stamp_decr_until if decr_until is None else decr_until
    action = Action.DECR if now < until else Action.INCR
    pkt.fb = stamp_multi(fb, pkt.src, pkt.dst, link_id, action, reg.pair_key(pkt.src_as))


def _route_forward(sim, pkt: Packet, t: float) -> None:
    route = pkt.route
    h = pkt.hop + 1
    pkt.hop = h
    ports = route.ports
    if h < len(ports):
        port, delay = ports[h]
        sim.at(t + delay, port.arrive, pkt)
    else:
        route.receiver.deliver(pkt, t + route.tail_delay)


class BottleneckPort:
    """One output link with request, regular and legacy channels.

    ``discipline`` selects the regular channel: ``red`` (NetFence, with
    monitoring), ``fq-drr`` (per-sender DRR) or ``droptail``.
    """

    def __init__(self, link_id: int, capacity_bps: float, params: Parameters, sim,
                 registry: Optional[KeyRegistry] = None, *, discipline: str = "red",
                 monitored: bool = True, multi: bool = False, per_as_fallback: bool = False,
                 rng: Optional[random.Random] = None, forward=None, name: str = ""):
        if link_id == 0:
            raise ValueError("link id 0 is reserved")
        self.link_id = link_id
        self.name = name or f"L{link_id}"
        self.capacity = float(capacity_bps)
        self.params = params
        self.sim = sim
        self.registry = registry
        self.discipline = discipline
        self.monitored = monitored and discipline == "red"
        self.multi = multi
        self.per_as_fallback = per_as_fallback
        self.rng = rng or random.Random(link_id)
        self.forward = forward or (lambda pkt, t: _route_forward(sim, pkt, t))
        self.mon = LinkMonitorState(params)
        q_lim = params.q_lim(capacity_bps)
        self.q_lim = q_lim
        if discipline == "red":
            self.regular = RedQueue.for_link(capacity_bps, params, self.rng)
        elif discipline == "fq-drr":
            self.regular = DrrQueue(q_lim, lambda p: p.src)
            self.regular.on_evict = self._regular_drop
        elif discipline == "droptail":
            self.regular = DropTailQueue(q_lim)
        else:
            raise ValueError(f"unknown queue discipline {discipline!r}")
        self.fallback_active = False
        # per source AS hysteresis windows, used only while falling back
        self.as_decr_until: dict[int, float] = {}
        self.levels = params.max_priority + 1
        self.requests = [deque() for _ in range(self.levels)]
        self.req_bytes = 0
        self.req_rate = params.request_channel_frac * self.capacity / 8.0
        self.req_credit_max = max(self.req_rate * params.request_window, MTU)
        self.req_limit = max(params.q_lim_seconds * self.req_rate, 4 * MTU)
        self.req_credit = self.req_credit_max
        self.req_credit_ts = 0.0
        self.legacy: deque = deque()
        self.legacy_bytes = 0
        self.busy = False
        self._wake_pending = False
        # interval counters for detection
        self.int_drops = 0
        self.int_dequeues = 0
        self.int_bytes = 0
        # cumulative counters
        self.bytes_in = 0
        self.bytes_tx = 0
        self.bytes_dropped = 0
        self.tx_by_kind = [0, 0, 0]
        self.drops_by_kind = [0, 0, 0]
        self.stamped = 0
        self.on_stamp: Optional[Callable[[Packet, float], None]] = None
        if self.monitored:
            sim.at(sim.now + params.detect_interval, self._detect, None)

    # -- state views ---------------------------------------------------------

    @property
    def mode(self) -> LinkMode:
        return self.mon.mode

    @property
    def queued_bytes(self) -> int:
        return self.req_bytes + self.regular.bytes + self.legacy_bytes

    # -- arrival -------------------------------------------------------------

    def arrive(self, pkt: Packet) -> None:
        now = self.sim.now
        size = pkt.size
        self.bytes_in += size
        kind = pkt.kind
        if kind == Kind.REGULAR:
            if not self.regular.enqueue(pkt, now):
                self._regular_drop(pkt)
                return
        elif kind == Kind.REQUEST:
            if self.req_bytes + size > self.req_limit:
                self._drop(pkt, now)
                return
            level = pkt.priority if pkt.priority < self.levels else self.levels - 1
            self.requests[level].append(pkt)
            self.req_bytes += size
        else:
            if self.legacy_bytes + size > self.q_lim:
                self._drop(pkt, now)
                return
            self.legacy.append(pkt)
            self.legacy_bytes += size
        if not self.busy:
            self._start(now)

    def _drop(self, pkt: Packet, now: float) -> None:
        self.bytes_dropped += pkt.size
        self.drops_by_kind[pkt.kind] += 1

    def _regular_drop(self, pkt: Packet) -> None:
        now = self.sim.now
        self._drop(pkt, now)
        self.int_drops += 1
        if self.fallback_active:
            # only the AS whose own queue overflowed is told to slow down
            self.as_decr_until[pkt.src_as] = now + 2.0 * self.params.i_lim
            self.mon.congestion_ts = now
        else:
            self.mon.note_congestion(now)

    # -- scheduling ----------------------------------------------------------

    def schedule_channels(self, now: float) -> Optional[Packet]:
        """Pick the next packet: requests within their credit, then regular, then legacy."""
        if self.req_bytes:
            credit = self.req_credit + (now - self.req_credit_ts) * self.req_rate
            if credit > self.req_credit_max:
                credit = self.req_credit_max
            self.req_credit = credit
            self.req_credit_ts = now
            reqs = self.requests
            for level in range(self.levels - 1, -1, -1):
                if reqs[level]:
                    head = reqs[level][0]
                    if head.size <= credit + _CREDIT_SLACK:
                        reqs[level].popleft()
                        self.req_bytes -= head.size
                        self.req_credit = credit - head.size
                        return head
                    break
        pkt = self.regular.dequeue()
        if pkt is not None:
            self.int_dequeues += 1
            return pkt
        if self.legacy:
            pkt = self.legacy.popleft()
            self.legacy_bytes -= pkt.size
            return pkt
        return None

    def _request_wait(self, now: float) -> Optional[float]:
        for level in range(self.levels - 1, -1, -1):
            if self.requests[level]:
                need = self.requests[level][0].size - self.req_credit
                return now + max(need / self.req_rate, _MIN_WAIT)
        return None

    def _start(self, now: float) -> None:
        pkt = self.schedule_channels(now)
        if pkt is None:
            self.busy = False
            if self.req_bytes and not self._wake_pending:
                t = self._request_wait(now)
                self._wake_pending = True
                self.sim.at(t, self._wake, None)
            return
        self.busy = True
        if self.mon.mode is MON_STATE and pkt.fb is not None:
            until = self.as_decr_until.get(pkt.src_as, -math.inf) if self.fallback_active else None
            if self.multi:
                update_feedback_multi(pkt, self.link_id, self.mon, self.registry, now,
                                      self.params.multi_max_entries, until)
            else:
                update_feedback(pkt, self.link_id, self.mon, self.registry, now, until)
            if self.on_stamp is not None:
                self.on_stamp(pkt, now)
        self.sim.at(now + pkt.size * 8.0 / self.capacity, self._done, pkt)

    def _wake(self, _arg) -> None:
        self._wake_pending = False
        if not self.busy:
            self._start(self.sim.now)

    def _done(self, pkt: Packet) -> None:
        now = self.sim.now
        size = pkt.size
        self.bytes_tx += size
        self.int_bytes += size
        self.tx_by_kind[pkt.kind] += size
        self.forward(pkt, now)
        self._start(now)

    # -- detection -----------------------------------------------------------

    def _detect(self, _arg) -> None:
        now = self.sim.now
        p = self.params
        if p.detection == "loss":
            attacked = self.mon.check_packet_loss(self.int_drops, self.int_dequeues, now)
        else:
            util = self.int_bytes * 8.0 / (self.capacity * p.detect_interval)
            attacked = self.mon.check_utilization(util, now)
        self.int_drops = self.int_dequeues = self.int_bytes = 0
        if self.per_as_fallback:
            if (self.mon.mode is MON_STATE and attacked and not self.fallback_active
                    and now - self.mon.mon_started_ts > p.fallback_grace):
                self.enable_per_as_fallback()
            elif self.fallback_active and self.mon.mode is NOP_STATE:
                self.disable_per_as_fallback()
        self.sim.at(now + p.detect_interval, self._detect, None)

    def enable_per_as_fallback(self) -> None:
        """Serve the regular channel by DRR across source-AS queues."""
        if self.fallback_active:
            return
        old = self.regular
        self.regular = DrrQueue(self.q_lim, lambda p: p.src_as)
        self.regular.on_evict = self._regular_drop
        self.fallback_active = True
        for pkt in old.drain():
            self.regular.enqueue(pkt)
        self.mon.transitions.append((self.sim.now, "per_as_fallback"))

    def disable_per_as_fallback(self) -> None:
        if not self.fallback_active:
            return
        old = self.regular
        self.regular = RedQueue.for_link(self.capacity, self.params, self.rng)
        for pkt in old.drain():
            self.regular.q.append(pkt)
            self.regular.bytes += pkt.size
        self.fallback_active = False
        self.as_decr_until.clear()
        self.mon.transitions.append((self.sim.now, "fifo"))
