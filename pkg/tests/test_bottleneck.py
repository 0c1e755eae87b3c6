import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netfence.bottleneck import (
    MON_STATE, NOP_STATE, BottleneckPort, DrrQueue, LinkMonitorState, RedQueue,
    red_drop_probability, update_feedback,
)
from netfence.crypto import AccessSecrets, KeyRegistry, derive_as_keys, stamp_decr, stamp_incr, stamp_nop
from netfence.packet import Kind, Packet
from netfence.params import Parameters
from netfence.sim.engine import Simulator
from netfence.wire import Action, Mode

P = Parameters()
LINK = 7
KEYS = derive_as_keys(2, [1, 2, 100])
ACCESS = KeyRegistry(1, AccessSecrets.from_seed(2, 1), KEYS)
BNECK = KeyRegistry(100, None, KEYS)


def pkt(kind=Kind.REGULAR, size=1500, fb=None, src=1, src_as=1, priority=0):
    return Packet(0, src, 9, size, kind, priority, fb, src_as=src_as)


class Wire:
    """A port on a fresh event loop that records what it transmits."""

    def __init__(self, capacity=10e6, params=P, **kw):
        self.sim = Simulator()
        self.out = []
        self.port = BottleneckPort(LINK, capacity, params, self.sim, BNECK,
                                   forward=lambda p, t: self.out.append((t, p)), **kw)

    def offer(self, packets_at):
        for t, p in packets_at:
            self.sim.at(t, self.port.arrive, p)


class TestRedCurve:
    @pytest.mark.parametrize("avg,expected", [(10, 0.0), (50, 0.0), (75, 0.05), (100, 0.1), (101, 1.0)])
    def test_curve(self, avg, expected):
        assert red_drop_probability(avg, 50, 100, 0.1) == pytest.approx(expected)

    def test_below_min_enqueues(self):
        q = RedQueue(10_000, 5_000, 7_500)
        q.avg = 3_000
        assert q.enqueue(pkt())

    def test_above_max_drops(self):
        q = RedQueue(10_000, 5_000, 7_500)
        q.avg = q.bytes = 8_000
        assert not q.enqueue(pkt())

    def test_hard_limit(self):
        q = RedQueue(3_000, 100_000, 200_000)
        assert q.enqueue(pkt()) and q.enqueue(pkt())
        assert not q.enqueue(pkt())

    def test_midway_probability(self):
        q = RedQueue(1e9, 5_000, 7_500, rng=random.Random(4))
        drops = 0
        n = 40_000
        for _ in range(n):
            q.q.clear()
            q.avg = q.bytes = 6_250
            drops += not q.enqueue(pkt())
        assert drops / n == pytest.approx(0.05, abs=0.005)

    def test_thresholds_from_params(self):
        q = RedQueue.for_link(10e6, P)
        assert (q.limit, q.min_th, q.max_th) == (250_000, 125_000, 187_500)


class TestDetection:
    def test_ewma_stays_nop(self):
        m = LinkMonitorState(P)
        m.drop_rate_ewma = 0.01
        assert not m.check_packet_loss(5, 100, 1.0)
        assert m.drop_rate_ewma == pytest.approx(0.014)
        assert m.mode is NOP_STATE

    def test_ewma_enters_mon(self):
        m = LinkMonitorState(P)
        m.drop_rate_ewma = 0.019
        assert m.check_packet_loss(5, 100, 3.0)
        assert m.drop_rate_ewma == pytest.approx(0.0221)
        assert m.mode is MON_STATE and m.mon_started_ts == 3.0

    def test_zero_dequeues_leaves_ewma(self):
        m = LinkMonitorState(P)
        m.drop_rate_ewma = 0.5
        m.check_packet_loss(10, 0, 1.0)
        assert m.drop_rate_ewma == 0.5

    def test_exit_after_t_b(self):
        m = LinkMonitorState(P.replace(t_b=10.0))
        m.drop_rate_ewma = 1.0
        m.check_packet_loss(100, 100, 0.0)
        m.drop_rate_ewma = 0.0
        for t in range(1, 11):
            m.check_packet_loss(0, 100, float(t))
            assert m.mode is MON_STATE
        m.check_packet_loss(0, 100, 10.5)
        assert m.mode is NOP_STATE
        assert [s for _, s in m.transitions] == ["mon", "nop"]

    def test_utilization_mode(self):
        m = LinkMonitorState(P)
        for t in range(60):
            m.check_utilization(1.0, float(t))
        assert m.mode is MON_STATE

    def test_port_enters_mon_under_overload(self):
        w = Wire(1e6)
        w.offer((i * 0.006, pkt()) for i in range(2000))
        w.sim.run(12.0)
        start = w.port.mon.transitions[0][0]
        assert w.port.mode is MON_STATE and start <= 3.0


class TestUpdateFeedback:
    def _mon(self, congested_at=None):
        m = LinkMonitorState(P)
        m.mode = MON_STATE
        if congested_at is not None:
            m.note_congestion(congested_at)
        return m

    def test_nop_becomes_decr(self):
        p = pkt(fb=stamp_nop(1, 9, 10, ACCESS))
        update_feedback(p, LINK, self._mon(), BNECK, 10.0)
        assert (p.fb.mode, p.fb.action, p.fb.link) == (Mode.MON, Action.DECR, LINK)

    def test_upstream_decr_unchanged(self):
        fb = stamp_decr(stamp_nop(1, 9, 10, ACCESS), 1, 9, 3, BNECK, 1)
        p = pkt(fb=fb)
        update_feedback(p, LINK, self._mon(congested_at=10.0), BNECK, 10.0)
        assert p.fb is fb

    def test_incr_in_window(self):
        p = pkt(fb=stamp_incr(1, 9, 13, LINK, ACCESS))
        update_feedback(p, LINK, self._mon(congested_at=10.0), BNECK, 13.0)
        assert p.fb.action == Action.DECR

    def test_incr_after_window(self):
        fb = stamp_incr(1, 9, 14, LINK, ACCESS)
        p = pkt(fb=fb)
        update_feedback(p, LINK, self._mon(congested_at=10.0), BNECK, 14.0)
        assert p.fb is fb

    def test_no_feedback_left_alone(self):
        p = pkt()
        update_feedback(p, LINK, self._mon(congested_at=0.0), BNECK, 0.0)
        assert p.fb is None

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0, 50), max_size=6), st.lists(st.floats(0, 60), min_size=1, max_size=40))
    def test_hysteresis_guarantee(self, congestion, sends):
        """An L-up crossing the link within 2*I_lim of any congestion leaves as L-down."""
        events = sorted([(t, "c") for t in congestion] + [(t, "s") for t in sends])
        m = self._mon()
        stamped = []
        for t, what in events:
            if what == "c":
                m.note_congestion(t)
                continue
            p = pkt(fb=stamp_incr(1, 9, t, LINK, ACCESS))
            update_feedback(p, LINK, m, BNECK, t)
            assert p.fb.action == Action.DECR or p.fb.mode == Mode.MON
            stamped.append((t, p.fb.action))
        for t, action in stamped:
            covered = any(c <= t < c + 2 * P.i_lim for c in congestion)
            assert (action == Action.DECR) == covered


class TestChannels:
    def test_higher_level_first(self):
        w = Wire()
        w.port.busy = True
        w.port.arrive(pkt(Kind.REQUEST, 92, priority=2))
        w.port.arrive(pkt(Kind.REQUEST, 92, priority=5))
        assert w.port.schedule_channels(0.0).priority == 5

    def test_request_only_backlog_capped(self):
        w = Wire(10e6)
        w.offer((i * 0.0001, pkt(Kind.REQUEST, 92, priority=1)) for i in range(100_000))
        w.sim.run(10.0)
        sent = sum(p.size for t, p in w.out if 1.0 <= t < 10.0)
        assert sent * 8 / 9.0 <= 0.5e6 * 1.01

    def test_legacy_starved_by_regular(self):
        w = Wire(1e6)
        # the first regular packet occupies the link; legacy then waits for all the rest
        w.offer([(0.0, pkt()), (0.0, pkt(Kind.LEGACY))] + [(0.0, pkt()) for _ in range(9)])
        w.sim.run(1.0)
        kinds = [p.kind for _, p in w.out]
        assert kinds.index(Kind.LEGACY) == 10

    def test_request_share_under_regular_backlog(self):
        w = Wire(2e6)
        w.offer((i * 0.003, pkt()) for i in range(3000))
        w.offer((i * 0.001, pkt(Kind.REQUEST, 92, priority=3)) for i in range(9000))
        w.sim.run(9.0)
        per_second = Counter(int(t) for t, p in w.out if p.kind == Kind.REQUEST)
        cap = 0.05 * 2e6 / 8
        for sec in range(1, 8):
            assert per_second[sec] * 92 <= cap + 1500

    def test_never_stamps_incr(self):
        w = Wire(1e6)
        w.port.mon.mode = MON_STATE
        seen = []
        w.port.on_stamp = lambda p, t: seen.append(p.fb)
        w.offer((i * 0.01, pkt(fb=stamp_nop(1, 9, i * 0.01, ACCESS))) for i in range(200))
        w.sim.run(5.0)
        assert seen and all(fb.action == Action.DECR for fb in seen)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 2), st.sampled_from(list(Kind)), st.integers(40, 1500)),
                    max_size=400))
    def test_byte_conservation(self, arrivals):
        w = Wire(1e6)
        w.offer((t, pkt(kind, size, priority=3 if kind == Kind.REQUEST else 0)) for t, kind, size in arrivals)
        w.sim.run(2.0)
        p = w.port
        in_flight = sum(q.size for _, q in w.out) - p.bytes_tx
        assert in_flight == 0
        on_wire = 1500 if p.busy else 0
        assert p.bytes_tx + p.bytes_dropped + p.queued_bytes <= p.bytes_in <= (
            p.bytes_tx + p.bytes_dropped + p.queued_bytes + on_wire)
        w.sim.run(100.0)
        assert p.bytes_in == p.bytes_tx + p.bytes_dropped + p.queued_bytes
        assert not p.busy and p.queued_bytes == 0


class TestDrr:
    def test_round_robin_equal_bytes(self):
        q = DrrQueue(1e9, key=lambda p: p.src_as)
        for _ in range(100):
            q.enqueue(pkt(src_as=1))
            q.enqueue(pkt(src_as=2, size=500))
            q.enqueue(pkt(src_as=2, size=500))
            q.enqueue(pkt(src_as=2, size=500))
        served = Counter()
        for _ in range(150):
            p = q.dequeue()
            served[p.src_as] += p.size
        assert served[1] == pytest.approx(served[2], rel=0.02)

    def test_push_out_from_longest(self):
        q = DrrQueue(6000, key=lambda p: p.src_as)
        evicted = []
        q.on_evict = evicted.append
        for _ in range(4):
            assert q.enqueue(pkt(src_as=1))
        assert q.enqueue(pkt(src_as=2))
        assert len(evicted) == 1 and evicted[0].src_as == 1
        assert q.bytes == 6000

    def test_drain_empties(self):
        q = DrrQueue(1e6, key=lambda p: p.src)
        for i in range(10):
            q.enqueue(pkt(src=i % 3))
        assert len(q.drain()) == 10 and len(q) == 0 and q.bytes == 0


class TestPerAsFallback:
    def _run(self, fallback):
        w = Wire(1e6, per_as_fallback=False)
        if fallback:
            w.port.enable_per_as_fallback()
        # AS 1 floods at 4x the link, AS 2 at 1x
        w.offer((i * 0.003, pkt(src=1, src_as=1)) for i in range(6000))
        w.offer((i * 0.012, pkt(src=2, src_as=2)) for i in range(1500))
        w.sim.run(18.0)
        got = Counter()
        for t, p in w.out:
            if t >= 2.0:
                got[p.src_as] += p.size
        return got

    def test_each_as_gets_half(self):
        got = self._run(True)
        share = got[2] / (got[1] + got[2])
        assert share == pytest.approx(0.5, abs=0.05)

    def test_without_fallback_flooder_dominates(self):
        got = self._run(False)
        assert got[2] / (got[1] + got[2]) < 0.35

    def test_enabled_by_persistent_congestion(self):
        w = Wire(1e6, per_as_fallback=True)
        w.offer((i * 0.004, pkt(src_as=1 + i % 2)) for i in range(5000))
        w.sim.run(19.0)
        assert w.port.fallback_active
        assert [s for _, s in w.port.mon.transitions][:2] == ["mon", "per_as_fallback"]

    def test_congestion_blamed_on_overflowing_as(self):
        w = Wire(1e6)
        w.port.mon.mode = MON_STATE
        w.port.enable_per_as_fallback()
        w.offer((i * 0.003, pkt(src=1, src_as=1)) for i in range(1000))
        w.offer((i * 0.05, pkt(src=2, src_as=2, fb=stamp_incr(2, 9, i * 0.05, LINK, ACCESS)))
                for i in range(60))
        w.sim.run(3.0)
        assert w.port.as_decr_until.get(1, 0) > 0 and 2 not in w.port.as_decr_until
        assert all(p.fb.action == Action.INCR for _, p in w.out if p.src_as == 2)

    def test_disable_restores_red(self):
        w = Wire(1e6)
        w.port.enable_per_as_fallback()
        w.port.disable_per_as_fallback()
        assert isinstance(w.port.regular, RedQueue) and not w.port.as_decr_until

    def test_state_linear_in_as_count(self):
        q = DrrQueue(1e9, key=lambda p: p.src_as)
        for a in range(35_000):
            q.enqueue(pkt(src_as=a, size=40))
        assert len(q.queues) == 35_000


def test_fq_drr_baseline_splits_evenly():
    w = Wire(1e6, discipline="fq-drr")
    w.offer((i * 0.004, pkt(src=1)) for i in range(4000))
    w.offer((i * 0.004, pkt(src=2)) for i in range(4000))
    w.sim.run(15.0)
    got = Counter(p.src for t, p in w.out if t > 1.0)
    assert got[1] == pytest.approx(got[2], rel=0.05)


def test_link_id_zero_reserved():
    with pytest.raises(ValueError):
        BottleneckPort(0, 1e6, P, Simulator())
