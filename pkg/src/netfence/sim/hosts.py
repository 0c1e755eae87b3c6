"""Traffic endpoints: TCP transfers, constant-rate and on-off UDP sources,
request flooders, and the receivers that return feedback to them."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from ..access import PASS, RequestLimiter
from ..packet import DATA_SIZE, REQUEST_SIZE, Kind, Packet

SEGMENT_PAYLOAD = 1460
MAX_CWND = 64.0
MIN_RTO = 0.2
MAX_RTO = 60.0
SYN_RTO = 1.0
MAX_SYN_RETRIES = 9
TRANSFER_DEADLINE = 200.0
ONE_WAY_RETURN_PERIOD = 0.1
USABLE_MARGIN = 0.5


class Strategy(Enum):
    HONEST = "honest"
    HIDE_DECR = "hide_decr"
    STALE_INCR = "stale_incr"
    SILENT = "silent"


class ReceiverMode(Enum):
    HONEST = "honest"
    COLLUDER = "colluder"
    VICTIM = "victim"


PAUSE = object()


class FeedbackStore:
    """Feedback a sender has received back, released when its return trip completes."""

    __slots__ = ("pending", "latest", "latest_incr", "incrs", "expiry")

    def __init__(self, w: float):
        self.pending: deque = deque()
        self.latest = None
        self.latest_incr = None
        self.incrs: deque = deque(maxlen=16)
        self.expiry = w - USABLE_MARGIN

    def offer(self, fb, available_at: float) -> None:
        self.pending.append((available_at, fb))

    def add(self, fb) -> None:
        latest = self.latest
        if latest is None or fb.ts >= latest.ts:
            self.latest = fb
        if fb.is_incr:
            if self.latest_incr is None or fb.ts >= self.latest_incr.ts:
                self.latest_incr = fb
            self.incrs.append(fb)

    def _mature(self, now: float) -> None:
        pending = self.pending
        while pending and pending[0][0] <= now:
            self.add(pending.popleft()[1])

    def pick(self, now: float, strategy: Strategy = Strategy.HONEST):
        if self.pending:
            self._mature(now)
        horizon = now - self.expiry
        incr = self.latest_incr
        if incr is not None and incr.ts < horizon:
            incr = None
        if strategy is Strategy.STALE_INCR:
            for fb in self.incrs:
                if fb.ts >= horizon:
                    return fb
        if incr is not None:
            return incr
        latest = self.latest
        if latest is None or latest.ts < horizon:
            return None
        if latest.is_decr:
            if strategy is Strategy.HIDE_DECR:
                return None
            if strategy is Strategy.SILENT:
                return PAUSE
        return latest


class Host:
    """An end host attached to (and event-collocated with) its access router."""

    __slots__ = ("hid", "as_id", "router", "net", "budget")

    def __init__(self, hid: int, as_id: int, router, net):
        self.hid = hid
        self.as_id = as_id
        self.router = router
        self.net = net
        self.budget: Optional[RequestLimiter] = None

    def transmit(self, pkt: Packet):
        pkt.src_as = self.as_id
        net = self.net
        if pkt.fb is None and self.budget is None:
            p = net.params
            self.budget = RequestLimiter(p.request_depth, p.l1, p.request_depth, net.sim.now)
        d = self.router.classify_and_police(pkt, net.sim.now)
        if net.trace is not None:
            net.trace_event(self.hid, "send-" + d.value, pkt)
        return d

    def request_level(self, now: float) -> int:
        """Highest priority this host's request budget can currently afford."""
        p = self.net.params
        if self.budget is None:
            self.budget = RequestLimiter(p.request_depth, p.l1, p.request_depth, now)
        b = self.budget
        avail = b.tokens + (now - b.last_refill_ts) * b.refill_rate
        if avail < 1.0:
            return 0
        return min(p.max_priority, int(math.floor(math.log2(avail))) + 1)


class Flow:
    """Common sender-side bookkeeping."""

    def __init__(self, net, host: Host, sink, route, sender_index: int):
        self.net = net
        self.sim = net.sim
        self.host = host
        self.sink = sink
        self.route = route
        self.index = sender_index
        self.dst = sink.addr
        self.dst_as = sink.as_id
        self.store = FeedbackStore(net.params.w)
        # receiver-side state for one-way flows
        self.rx_latest = None
        self.rx_incr = None
        self.rx_last_return = -math.inf

    def _packet(self, size: int, fb, kind: Kind, priority: int = 0) -> Packet:
        net = self.net
        if fb is None and kind == Kind.REGULAR and net.netfence:
            kind = Kind.REQUEST
        pkt = Packet(net.next_pid(), self.host.hid, self.dst, size, kind, priority, fb, self,
                     dst_as=self.dst_as)
        pkt.route = self.route
        pkt.sent = self.sim.now
        return pkt


# -- TCP -------------------------------------------------------------------------

class TcpFlow(Flow):
    """Reno-style sender with NewReno partial-ACK recovery.

    ``nbytes=None`` means a long-running transfer.
    """

    def __init__(self, net, host, sink, route, sender_index, nbytes: Optional[int] = None,
                 on_finish=None, strategy: Strategy = Strategy.HONEST):
        super().__init__(net, host, sink, route, sender_index)
        self.nseg = None if nbytes is None else max(1, math.ceil(nbytes / SEGMENT_PAYLOAD))
        self.on_finish = on_finish
        self.strategy = strategy
        self.state = "idle"
        self.start_ts = 0.0
        self.finish_ts: Optional[float] = None
        self.syn_tries = 0
        self.syn_rto = SYN_RTO
        self.snd_una = 0
        self.snd_nxt = 0
        self.cwnd = 1.0
        self.ssthresh = MAX_CWND
        self.dupacks = 0
        self.recover = -1
        self.in_recovery = False
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.rto = SYN_RTO
        self.deadline: Optional[float] = None
        self.timer_at: Optional[float] = None
        self.retransmits = 0
        # receiver side
        self.rcv_nxt = 0
        self.ooo: set = set()

    def start(self, _arg=None) -> None:
        now = self.sim.now
        self.state = "syn"
        self.start_ts = now
        self._send_syn(now, 0)

    def _send_syn(self, now: float, level: int) -> None:
        if level > 0:
            self.host.budget.police(level, now)
        pkt = self._packet(REQUEST_SIZE, None, Kind.REQUEST, level)
        pkt.syn = True
        self.host.transmit(pkt)
        self._arm(now + self.syn_rto)

    # The retransmission timer is lazy: moving the deadline later does not
    # touch the event queue; the pending event re-arms itself when it fires.
    def _arm(self, deadline: float) -> None:
        self.deadline = deadline
        if self.timer_at is None or deadline < self.timer_at:
            self.timer_at = deadline
            self.sim.at(deadline, self._on_timer, deadline)

    def _on_timer(self, at: float) -> None:
        if at != self.timer_at:
            return
        self.timer_at = None
        if self.deadline is None or self.state in ("done", "aborted"):
            return
        now = self.sim.now
        if now < self.deadline:
            self.timer_at = self.deadline
            self.sim.at(self.deadline, self._on_timer, self.deadline)
            return
        self.deadline = None
        self._timeout(now)

    def _finish(self, now: float, ok: bool) -> None:
        self.state = "done" if ok else "aborted"
        self.finish_ts = now
        self.deadline = None
        self.net.record_transfer(self, ok)
        if self.on_finish is not None:
            self.on_finish(self, now)

    def _timeout(self, now: float) -> None:
        if self.nseg is not None and now - self.start_ts > TRANSFER_DEADLINE:
            self._finish(now, False)
            return
        if self.state == "syn":
            self.syn_tries += 1
            if self.syn_tries > MAX_SYN_RETRIES:
                self._finish(now, False)
                return
            self.syn_rto *= 2.0
            self._send_syn(now, self.host.request_level(now))
            return
        if self.snd_nxt <= self.snd_una:
            return
        flight = self.snd_nxt - self.snd_una
        self.ssthresh = max(flight / 2.0, 2.0)
        self.cwnd = 1.0
        self.snd_nxt = self.snd_una
        self.in_recovery = False
        self.dupacks = 0
        self.rto = min(self.rto * 2.0, MAX_RTO)
        self._send_more(now)

    def _send_seg(self, seq: int, now: float) -> None:
        fb = self.store.pick(now, self.strategy)
        if fb is PAUSE:
            fb = None
        pkt = self._packet(DATA_SIZE, fb, Kind.REGULAR)
        pkt.seq = seq
        self.host.transmit(pkt)

    def _send_more(self, now: float) -> None:
        limit = self.nseg if self.nseg is not None else math.inf
        wnd = int(self.cwnd)
        while self.snd_nxt < limit and self.snd_nxt - self.snd_una < wnd:
            self._send_seg(self.snd_nxt, now)
            self.snd_nxt += 1
        if self.snd_nxt > self.snd_una and (self.deadline is None):
            self._arm(now + self.rto)

    def _rtt_sample(self, sample: float) -> None:
        if self.srtt is None:
            self.srtt = sample
            self.rttvar = sample / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        self.rto = min(max(MIN_RTO, self.srtt + 4.0 * self.rttvar), MAX_RTO)

    def on_ack(self, arg) -> None:
        ackno, fb, echo, synack = arg
        if self.state in ("done", "aborted", "idle"):
            return
        now = self.sim.now
        if fb is not None:
            self.store.add(fb)
        if self.state == "syn":
            if not synack:
                return
            self.state = "est"
            self._rtt_sample(now - echo)
            self.deadline = None
            self._send_more(now)
            return
        if synack:
            return
        self._rtt_sample(now - echo)
        if ackno > self.snd_una:
            newly = ackno - self.snd_una
            self.snd_una = ackno
            if self.snd_nxt < ackno:
                self.snd_nxt = ackno
            if self.in_recovery:
                if ackno > self.recover:
                    self.cwnd = self.ssthresh
                    self.in_recovery = False
                    self.dupacks = 0
                else:
                    self._send_seg(self.snd_una, now)
                    self.retransmits += 1
                    self.cwnd = max(self.cwnd - newly + 1.0, 1.0)
            else:
                self.dupacks = 0
                if self.cwnd < self.ssthresh:
                    self.cwnd += newly
                else:
                    self.cwnd += newly / self.cwnd
                if self.cwnd > MAX_CWND:
                    self.cwnd = MAX_CWND
            if self.nseg is not None and self.snd_una >= self.nseg:
                self._finish(now, True)
                return
            self.deadline = None
            if self.snd_nxt > self.snd_una:
                self._arm(now + self.rto)
        elif ackno == self.snd_una and self.snd_nxt > self.snd_una:
            self.dupacks += 1
            if self.in_recovery:
                self.cwnd += 1.0
            elif self.dupacks == 3:
                flight = self.snd_nxt - self.snd_una
                self.ssthresh = max(flight / 2.0, 2.0)
                self._send_seg(self.snd_una, now)
                self.retransmits += 1
                self.cwnd = self.ssthresh + 3.0
                self.recover = self.snd_nxt - 1
                self.in_recovery = True
        if self.nseg is not None and now - self.start_ts > TRANSFER_DEADLINE:
            self._finish(now, False)
            return
        self._send_more(now)

    # receiver half, invoked by the sink
    def receive(self, pkt: Packet, t: float) -> None:
        if self.state in ("done", "aborted"):
            return
        rev = self.route.rev_delay
        if pkt.syn:
            self.sim.at(t + rev, self.on_ack, (0, self.sink.returned(self, pkt.fb), pkt.sent, True))
            return
        seq = pkt.seq
        delivered = 0
        if seq == self.rcv_nxt:
            self.rcv_nxt += 1
            delivered = 1
            ooo = self.ooo
            while self.rcv_nxt in ooo:
                ooo.discard(self.rcv_nxt)
                self.rcv_nxt += 1
                delivered += 1
        elif seq > self.rcv_nxt:
            self.ooo.add(seq)
        if delivered:
            self.net.record_delivery(self.index, t, delivered * DATA_SIZE)
        self.sim.at(t + rev, self.on_ack, (self.rcv_nxt, self.sink.returned(self, pkt.fb), pkt.sent, False))


@dataclass(frozen=True)
class WebFileSizes:
    """Heavy-tailed file sizes: a Pareto body mixed with an exponential one, capped.

    The defaults are plausible web-object figures, not fitted to any trace.
    """

    pareto_prob: float = 0.2
    pareto_shape: float = 1.2
    pareto_scale: float = 10_000.0
    exp_mean: float = 8_000.0
    max_bytes: int = 150_000

    def draw(self, rng) -> int:
        if rng.random() < self.pareto_prob:
            size = self.pareto_scale * rng.paretovariate(self.pareto_shape)
        else:
            size = rng.expovariate(1.0 / self.exp_mean)
        return max(1, min(self.max_bytes, int(size)))


class FileTransferSource:
    """Back-to-back TCP transfers with a short random think time.

    ``nbytes`` is either a fixed size or a :class:`WebFileSizes` drawn per file.
    """

    def __init__(self, net, host, sink, route, sender_index, nbytes, rng,
                 think=(0.1, 0.2)):
        self.net = net
        self.host = host
        self.sink = sink
        self.route = route
        self.index = sender_index
        self.nbytes = nbytes
        self.rng = rng
        self.think = think
        self.flows: list[TcpFlow] = []

    def start(self, _arg=None) -> None:
        size = self.nbytes.draw(self.rng) if isinstance(self.nbytes, WebFileSizes) else self.nbytes
        flow = TcpFlow(self.net, self.host, self.sink, self.route, self.index, size,
                       on_finish=self._next)
        self.flows.append(flow)
        flow.start()

    def _next(self, flow, now: float) -> None:
        gap = self.rng.uniform(*self.think)
        self.net.sim.at(now + gap, self.start, None)


# -- UDP ---------------------------------------------------------------------------

class CbrFlow(Flow):
    """Constant-rate UDP source, optionally on-off with a shared phase.

    With ``fast_forward`` the source skips the send slots that its access
    router would certainly drop, counting them as dropped.
    """

    def __init__(self, net, host, sink, route, sender_index, rate_bps: float,
                 start: float = 0.0, strategy: Strategy = Strategy.HONEST,
                 t_on: Optional[float] = None, t_off: Optional[float] = None,
                 phase: float = 0.0, size: int = DATA_SIZE, fast_forward: bool = True,
                 jitter: float = 0.0, rng=None):
        super().__init__(net, host, sink, route, sender_index)
        self.interval = size * 8.0 / rate_bps
        # Each send lands uniformly within the first ``jitter`` fraction of its slot.
        self.jitter = jitter
        self.rng = rng
        self.size = size
        self.strategy = strategy
        self.t_on = t_on
        self.t_off = t_off
        self.phase = phase
        self.fast_forward = fast_forward
        self.grid0 = start
        self.slot = 0
        self.sent = 0
        self.skipped = 0
        self.paused = 0
        self.start_ts = start

    @property
    def cycle(self) -> Optional[float]:
        if self.t_on is None or not self.t_off:
            return None
        return self.t_on + self.t_off

    def start(self, _arg=None) -> None:
        self.sim.at(max(self.grid0, self.sim.now), self._tick, None)

    def _schedule_slot(self, slot: int) -> None:
        self.slot = slot
        t = self.grid0 + slot * self.interval
        if self.jitter:
            t += self.rng.random() * self.jitter * self.interval
        self.sim.at(max(t, self.sim.now), self._tick, None)

    def _tick(self, _arg) -> None:
        now = self.sim.now
        cycle = self.cycle
        if cycle is not None:
            pos = (now - self.phase) % cycle
            if pos >= self.t_on - 1e-12:
                on_start = now - pos + cycle
                self.grid0 = on_start
                self._schedule_slot(0)
                return
        fb = self.store.pick(now, self.strategy)
        if fb is PAUSE:
            self.paused += 1
            resume = now + self.net.params.i_lim
            self._schedule_slot(self.slot + max(1, math.ceil((resume - now) / self.interval)))
            return
        pkt = self._packet(self.size, fb, Kind.REGULAR)
        self.sent += 1
        d = self.host.transmit(pkt)
        nxt = self.slot + 1
        if d is not PASS and self.fast_forward:
            retry = self.host.router.retry_at
            if retry is not None:
                target = math.ceil((retry - self.grid0) / self.interval - 1e-9)
                if target > nxt:
                    self.skipped += target - nxt
                    nxt = target
        self._schedule_slot(nxt)

    def receive(self, pkt: Packet, t: float) -> None:
        self.net.record_delivery(self.index, t, pkt.size)
        fb = pkt.fb
        if fb is not None:
            if self.rx_latest is None or fb.ts >= self.rx_latest.ts:
                self.rx_latest = fb
            if fb.is_incr and (self.rx_incr is None or fb.ts >= self.rx_incr.ts):
                self.rx_incr = fb
        if t - self.rx_last_return >= ONE_WAY_RETURN_PERIOD:
            ret = self.sink.returned_one_way(self, t)
            if ret is not None:
                self.rx_last_return = t
                self.store.offer(ret, t + self.route.rev_delay)


class RequestFlooder(Flow):
    """Sends priority-``level`` requests exactly as fast as its budget refills."""

    def __init__(self, net, host, sink, route, sender_index, level: int, start: float = 0.0):
        super().__init__(net, host, sink, route, sender_index)
        self.level = level
        p = net.params
        # A hair slower than the refill so rounding never makes a send unaffordable.
        self.interval = (2 ** (level - 1)) / p.l1 * (1 + 1e-9) if level > 0 else REQUEST_SIZE * 8 / 1e6
        self.start_ts = start
        self.sent = 0

    def start(self, _arg=None) -> None:
        self.sim.at(max(self.start_ts, self.sim.now), self._tick, 0)

    def _tick(self, n) -> None:
        pkt = self._packet(REQUEST_SIZE, None, Kind.REQUEST, self.level)
        self.sent += 1
        self.host.transmit(pkt)
        self.sim.at(self.start_ts + (n + 1) * self.interval, self._tick, n + 1)

    def receive(self, pkt: Packet, t: float) -> None:
        self.net.record_delivery(self.index, t, pkt.size)


class Sink:
    """A destination host; ``mode`` decides what feedback it hands back."""

    def __init__(self, addr: int, as_id: int, mode: ReceiverMode, w: float):
        self.addr = addr
        self.as_id = as_id
        self.mode = mode
        self.horizon = w - USABLE_MARGIN

    def deliver(self, pkt: Packet, t: float) -> None:
        pkt.flow.receive(pkt, t)

    def returned(self, flow, fb):
        """Feedback piggybacked on a TCP acknowledgement."""
        if self.mode is ReceiverMode.VICTIM:
            return None
        if self.mode is ReceiverMode.COLLUDER and fb is not None and not fb.is_incr:
            held = flow.rx_incr
            if held is not None and held.ts >= fb.ts - self.horizon:
                return held
        if fb is not None and fb.is_incr:
            flow.rx_incr = fb
        return fb

    def returned_one_way(self, flow, t: float):
        mode = self.mode
        if mode is ReceiverMode.VICTIM:
            return None
        if mode is ReceiverMode.COLLUDER:
            incr = flow.rx_incr
            if incr is not None and t - incr.ts < self.horizon:
                return incr
        return flow.rx_latest
