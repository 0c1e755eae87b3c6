"""Topology construction, traffic placement and the top-level ``run``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from statistics import fmean
from typing import Optional

from ..access import PASS, AccessRouter
from ..bottleneck import MON_STATE, BottleneckPort
from ..crypto import AccessSecrets, KeyRegistry, derive_as_keys
from ..multipath import InferenceAccessRouter, MultiFeedbackAccessRouter
from ..packet import Kind, Packet
from ..scenario import GroupSpec, Scenario
from .engine import Simulator, derive_rng
from .hosts import (CbrFlow, FileTransferSource, Host, ReceiverMode, RequestFlooder, Sink,
                    Strategy, TcpFlow, WebFileSizes)
from .metrics import LinkRecord, Metrics, SenderRecord

TRANSIT_AS = 100
DEST_AS = 200
SINK_ADDR = 1_000_000
PATH_DEST_AS = {"A": 201, "B": 202, "C": 203}

ROUTERS = {
    "netfence-core": AccessRouter,
    "netfence-b1": MultiFeedbackAccessRouter,
    "netfence-b2": InferenceAccessRouter,
}


@dataclass(frozen=True)
class Route:
    """Forward path of a flow.

    ``ports`` lists ``(port, delay)`` where ``delay`` is the propagation
    time to reach that port; ``tail_delay`` runs from the last port to the
    receiver and ``rev_delay`` is the whole return trip.
    """

    ports: tuple
    tail_delay: float
    receiver: Sink
    rev_delay: float


class PassThroughRouter:
    """Access router for the baselines: no feedback, no policing."""

    policy = "none"

    def __init__(self, as_id: int, emit):
        self.as_id = as_id
        self.emit = emit
        self.retry_at = None
        self.limiters: dict = {}

    def classify_and_police(self, pkt: Packet, now: float):
        pkt.kind = Kind.REGULAR
        pkt.fb = None
        self.emit(pkt, now)
        return PASS


class Network:
    """Shared environment handed to hosts and flows."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.params = scenario.params
        self.sim = Simulator()
        self.netfence = scenario.policy in ROUTERS
        self.trace: Optional[list] = [] if scenario.trace else None
        self.trace_hash = hashlib.sha256()
        self._pid = 0
        self.bucket = scenario.bucket
        self.nbuckets = max(1, int(scenario.duration / scenario.bucket + 1e-9))
        self.window = (scenario.warmup, scenario.duration)
        self.rx_bytes: list[int] = []
        self.rx_buckets: list[list[int]] = []
        self.senders: list[SenderRecord] = []
        self.transfer_times: list[float] = []
        self.transfers_ok = 0
        self.attack_start: Optional[float] = None
        self.transfers_failed = 0
        self.ports: list[BottleneckPort] = []
        self.routers: dict[int, object] = {}
        self.hosts: list[Host] = []
        self.flows: list = []
        self.samples: list[tuple] = []
        self._mark: dict = {}
        self._win: dict = {}

    # -- services used by hosts ----------------------------------------------

    def next_pid(self) -> int:
        self._pid += 1
        return self._pid

    def trace_event(self, node, event: str, pkt: Packet) -> None:
        fb = pkt.fb.describe() if pkt.fb is not None else "-"
        line = f"{self.sim.now:.6f} {node} {event} {pkt.pid} {fb}"
        self.trace.append(line)
        self.trace_hash.update(line.encode() + b"\n")

    def record_delivery(self, index: int, t: float, nbytes: int) -> None:
        lo, hi = self.window
        if lo <= t < hi:
            self.rx_bytes[index] += nbytes
        b = int(t / self.bucket)
        if b < self.nbuckets:
            self.rx_buckets[index][b] += nbytes

    def record_transfer(self, flow: TcpFlow, ok: bool) -> None:
        if flow.start_ts < self.window[0]:
            return
        if ok:
            self.transfers_ok += 1
            self.transfer_times.append(flow.finish_ts - flow.start_ts)
        else:
            self.transfers_failed += 1

    # -- construction --------------------------------------------------------

    def _emit(self, pkt: Packet, now: float) -> None:
        pkt.hop = 0
        port, delay = pkt.route.ports[0]
        self.sim.at(now + delay, port.arrive, pkt)

    def _registry(self, as_id: int, keys, access: bool) -> KeyRegistry:
        secret = AccessSecrets.from_seed(self.scenario.seed, as_id) if access else None
        return KeyRegistry(as_id, secret, keys, 0, self.params.key_period)

    def _port(self, link_id: int, capacity: float, owner_as: int, keys) -> BottleneckPort:
        s = self.scenario
        policy = s.policy
        discipline = "red" if self.netfence else policy
        port = BottleneckPort(
            link_id, capacity, self.params, self.sim, self._registry(owner_as, keys, False),
            discipline=discipline, monitored=self.netfence, multi=policy == "netfence-b1",
            per_as_fallback=s.topology.per_as_fallback and self.netfence,
            rng=derive_rng(s.seed, "link", link_id), name=f"L{link_id}")
        self.ports.append(port)
        return port

    def _router(self, as_id: int, keys, link_to_as) -> object:
        s = self.scenario
        if not self.netfence:
            router = PassThroughRouter(as_id, self._emit)
        else:
            cls = ROUTERS[s.policy]
            router = cls(as_id, self.params, self._registry(as_id, keys, True), link_to_as,
                         scheduler=self.sim, emit=self._emit,
                         compromised=as_id in s.topology.compromised_ases)
        self.routers[as_id] = router
        return router

    def build(self) -> "Network":
        s = self.scenario
        t = s.topology
        d = t.link_delay
        sources = s.source_as_ids()
        if t.kind == "dumbbell":
            link_to_as = {1: TRANSIT_AS}
            keys = derive_as_keys(s.seed, sources + [TRANSIT_AS])
            l1 = self._port(1, t.bottleneck_bps, TRANSIT_AS, keys)
            paths = {"A": ((l1, d),)}
            dest = {"A": DEST_AS}
        else:
            link_to_as = {1: TRANSIT_AS, 2: TRANSIT_AS + 1}
            keys = derive_as_keys(s.seed, sources + [TRANSIT_AS, TRANSIT_AS + 1])
            l1 = self._port(1, t.l1_bps, TRANSIT_AS, keys)
            l2 = self._port(2, t.l2_bps, TRANSIT_AS + 1, keys)
            paths = {"A": ((l1, d), (l2, d)), "B": ((l2, d),), "C": ((l1, d),)}
            dest = PATH_DEST_AS
        for as_id in sources:
            self._router(as_id, keys, link_to_as)

        # One receiving host per destination AS; colluders sit in their own ASes.
        sinks: dict = {}

        def sink_for(path: str, mode: str, j: int) -> Sink:
            if mode == "colluder":
                key = ("colluder", j % t.colluders)
                addr = SINK_ADDR + 1 + j % t.colluders
                as_id = DEST_AS + 10 + j % t.colluders
            else:
                key = (path, mode)
                addr = SINK_ADDR + 100 + list(dest).index(path) if t.kind == "parking_lot" else SINK_ADDR
                as_id = dest[path]
            sk = sinks.get(key)
            if sk is None:
                sk = sinks[key] = Sink(addr, as_id, ReceiverMode(mode), self.params.w)
            return sk

        hid = 0
        colluder_rr = 0
        for g in s.groups:
            ases = s.group_ases(g)
            rng = derive_rng(s.seed, "group", g.name)
            n = s.group_size(g)
            for i in range(n):
                as_id = ases[i % len(ases)] if g.count is not None else ases[i // g.per_as]
                hid += 1
                index = len(self.senders)
                host = Host(hid, as_id, self.routers[as_id], self)
                self.hosts.append(host)
                sink = sink_for(g.path, g.receiver, colluder_rr)
                if g.receiver == "colluder":
                    colluder_rr += 1
                hops = paths[g.path]
                # the host-to-access-router hop is folded into the return trip
                fwd = sum(delay for _, delay in hops) + 2 * d
                route = Route(hops, 2 * d, sink, fwd + 2 * d)
                self.senders.append(SenderRecord(index, g.name, g.role, as_id))
                self.rx_bytes.append(0)
                self.rx_buckets.append([0] * self.nbuckets)
                start = g.start + rng.uniform(0.0, g.start_jitter)
                if g.role == "attacker" and (self.attack_start is None or start < self.attack_start):
                    self.attack_start = start
                self._flow(g, host, sink, route, index, start, rng)
        self.sim.at(0.0, self._sample, 0)
        self.sim.at(s.warmup, self._mark_window, None)
        return self

    def _flow(self, g: GroupSpec, host: Host, sink: Sink, route: Route, index: int,
              start: float, rng) -> None:
        sim = self.sim
        strategy = Strategy(g.strategy)
        if g.traffic == "tcp":
            flow = TcpFlow(self, host, sink, route, index, None, strategy=strategy)
            sim.at(start, flow.start, None)
        elif g.traffic in ("files", "web"):
            sizes = g.file_bytes if g.traffic == "files" else WebFileSizes(
                g.web_pareto_prob, g.web_pareto_shape, g.web_pareto_scale, g.web_exp_mean, g.max_file_bytes)
            flow = FileTransferSource(self, host, sink, route, index, sizes,
                                      derive_rng(self.scenario.seed, "files", index))
            sim.at(start, flow.start, None)
        elif g.traffic in ("cbr", "onoff"):
            onoff = g.traffic == "onoff"
            flow = CbrFlow(self, host, sink, route, index, g.rate_bps, start=start,
                           strategy=strategy, t_on=g.t_on if onoff else None,
                           t_off=g.t_off if onoff else None, phase=g.phase,
                           fast_forward=self.scenario.fast_forward, jitter=g.send_jitter,
                           rng=derive_rng(self.scenario.seed, "send", index))
            flow.start()
        else:
            flow = RequestFlooder(self, host, sink, route, index, g.level, start=start)
            flow.start()
        self.flows.append(flow)

    # -- sampling ------------------------------------------------------------

    def _sample(self, k: int) -> None:
        now = self.sim.now
        if k > 0:
            t0 = now - self.bucket
            for port in self.ports:
                prev_tx = self._mark.get(port.link_id, 0)
                util = (port.bytes_tx - prev_tx) * 8.0 / (port.capacity * self.bucket)
                name = port.name
                self.samples.append((name, "utilization", t0, now, util))
                self.samples.append((name, "drop_rate_ewma", t0, now, port.mon.drop_rate_ewma))
                self.samples.append((name, "mon", t0, now, 1 if port.mode is MON_STATE else 0))
                self.samples.append((name, "queue_bytes", t0, now, port.queued_bytes))
                self.samples.append((name, "per_as_fallback", t0, now, 1 if port.fallback_active else 0))
                for role in ("legit", "attacker"):
                    rates = [rl.r_lim for r in self.routers.values()
                             for (src, link), rl in r.limiters.items()
                             if link == port.link_id and self.senders[src - 1].role == role]
                    if rates:
                        self.samples.append((name, f"{role}_mean_rate_limit_bps", t0, now, fmean(rates)))
        for port in self.ports:
            self._mark[port.link_id] = port.bytes_tx
        nxt = (k + 1) * self.bucket
        if nxt <= self.scenario.duration + 1e-9:
            self.sim.at(nxt, self._sample, k + 1)

    def _mark_window(self, _arg=None) -> None:
        self._win = {p.link_id: (p.bytes_tx, p.bytes_dropped) for p in self.ports}

    def group_timeseries(self) -> list[tuple]:
        out = []
        b = self.bucket
        groups: dict[str, list[int]] = {}
        for s in self.senders:
            groups.setdefault(s.group, []).append(s.index)
        for name, idx in groups.items():
            for k in range(self.nbuckets):
                total = sum(self.rx_buckets[i][k] for i in idx)
                out.append((name, "mean_throughput_bps", k * b, (k + 1) * b, total * 8.0 / b / len(idx)))
        return out

    # -- results -------------------------------------------------------------

    def metrics(self) -> Metrics:
        s = self.scenario
        lo, hi = self.window
        span = hi - lo
        senders = []
        for rec, nbytes in zip(self.senders, self.rx_bytes):
            senders.append(SenderRecord(rec.index, rec.group, rec.role, rec.as_id, nbytes * 8.0 / span))
        links = []
        win = self._win
        for p in self.ports:
            tx0, dr0 = win.get(p.link_id, (0, 0))
            links.append(LinkRecord(p.name, p.capacity, (p.bytes_tx - tx0) * 8.0 / (p.capacity * span),
                                    p.bytes_tx - tx0, p.bytes_dropped - dr0,
                                    mon_time(p, lo, hi) / span,
                                    next((t for t, st in p.mon.transitions if st == "mon"), None)))
        return Metrics(s.name, s.policy, s.seed, lo, hi, senders, links, list(self.transfer_times),
                       self.transfers_ok, self.transfers_failed, self.params.delta_md,
                       self.sim.executed, self.attack_start)


def mon_time(port: BottleneckPort, lo: float, hi: float) -> float:
    """Seconds within ``[lo, hi)`` that the link spent in the monitored state."""
    total = 0.0
    since = None
    for t, state in port.mon.transitions:
        if state == "mon":
            since = t
        elif state == "nop" and since is not None:
            total += max(0.0, min(t, hi) - max(since, lo))
            since = None
    if since is not None:
        total += max(0.0, hi - max(since, lo))
    return total


def build(scenario: Scenario) -> Network:
    return Network(scenario).build()


def run(scenario: Scenario, network: Optional[Network] = None) -> Metrics:
    """Simulate ``scenario`` to its end time and return its metrics."""
    net = network or build(scenario)
    net.sim.run(scenario.duration)
    return net.metrics()
