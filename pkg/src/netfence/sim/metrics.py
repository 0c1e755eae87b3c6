"""Throughput accounting, fairness measures and acceptance-check evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import fmean
from typing import Optional, Sequence


def jain_index(x: Sequence[float]) -> float:
    """(sum x)^2 / (n * sum x^2); 1.0 means perfectly equal shares."""
    if not x:
        raise ValueError("fairness index needs at least one value")
    if any(v < 0 for v in x):
        raise ValueError("throughputs must be non-negative")
    sq = math.fsum(v * v for v in x)
    if sq == 0:
        raise ValueError("fairness index is undefined when every throughput is zero")
    return math.fsum(x) ** 2 / (len(x) * sq)


def theorem_bound(G: int, B: int, C: float, nu: float, delta_md: float) -> float:
    """Guaranteed per-sender rate: nu * (1 - delta)^3 * C / (G + B)."""
    if G + B <= 0:
        raise ValueError("need at least one sender")
    return nu * (1.0 - delta_md) ** 3 * C / (G + B)


def tva_share_ratio(G: int, B: int, n_colluders: int) -> float:
    """Attacker-to-legitimate share ratio under per-destination fair queuing.

    Each attacker spreads over ``n_colluders`` destinations while each
    legitimate sender talks to one, so the ratio is ``n_colluders * G / B``.
    """
    if B <= 0:
        raise ValueError("need at least one attacker")
    return n_colluders * G / B


def throughput_ratio(legit: Sequence[float], attackers: Sequence[float]) -> Optional[float]:
    if not legit or not attackers:
        return None
    a = fmean(attackers)
    if a == 0:
        return math.inf if fmean(legit) > 0 else None
    return fmean(legit) / a


@dataclass
class SenderRecord:
    index: int
    group: str
    role: str
    as_id: int
    throughput: float = 0.0


@dataclass
class LinkRecord:
    name: str
    capacity: float
    utilization: float
    bytes_tx: int
    bytes_dropped: int
    mon_fraction: float
    first_mon_ts: Optional[float] = None


@dataclass
class Metrics:
    scenario: str
    policy: str
    seed: int
    t_start: float
    t_end: float
    senders: list = field(default_factory=list)
    links: list = field(default_factory=list)
    transfer_times: list = field(default_factory=list)
    transfers_ok: int = 0
    transfers_failed: int = 0
    delta_md: float = 0.1
    events: int = 0
    attack_start: Optional[float] = None

    # -- derived views -------------------------------------------------------

    def _of(self, role: str) -> list[float]:
        return [s.throughput for s in self.senders if s.role == role]

    @property
    def throughputs(self) -> list[float]:
        return [s.throughput for s in self.senders]

    @property
    def legit(self) -> list[float]:
        return self._of("legit")

    @property
    def attackers(self) -> list[float]:
        return self._of("attacker")

    @property
    def G(self) -> int:
        return len(self.legit)

    @property
    def B(self) -> int:
        return len(self.attackers)

    @property
    def C(self) -> float:
        """Capacity of the tightest monitored link."""
        return min((l.capacity for l in self.links), default=0.0)

    @property
    def rho(self) -> float:
        return (1.0 - self.delta_md) ** 3

    @property
    def throughput_ratio(self) -> Optional[float]:
        return throughput_ratio(self.legit, self.attackers)

    @property
    def fairness_index(self) -> Optional[float]:
        legit = self.legit
        if not legit or not any(legit):
            return None
        return jain_index(legit)

    @property
    def utilization(self) -> float:
        return self.links[0].utilization if self.links else 0.0

    @property
    def fair_share(self) -> float:
        n = self.G + self.B
        return self.C / n if n else 0.0

    def detection_latency(self, link: LinkRecord) -> Optional[float]:
        """Seconds from the first attacker starting to the link first being monitored."""
        if self.attack_start is None or link.first_mon_ts is None:
            return None
        return max(0.0, link.first_mon_ts - self.attack_start)

    def bound(self, nu: float) -> float:
        return theorem_bound(self.G, self.B, self.C, nu, self.delta_md)

    def group_mean(self, name: str) -> float:
        vals = [s.throughput for s in self.senders if s.group == name]
        return fmean(vals) if vals else 0.0

    @property
    def completion_ratio(self) -> Optional[float]:
        n = self.transfers_ok + self.transfers_failed
        return self.transfers_ok / n if n else None

    @property
    def mean_transfer_time(self) -> Optional[float]:
        return fmean(self.transfer_times) if self.transfer_times else None

    # -- export --------------------------------------------------------------

    def rows(self) -> list[tuple]:
        """``(entity_id, metric, t_start, t_end, value)`` rows in a stable order."""
        a, b = self.t_start, self.t_end
        out = []
        for s in self.senders:
            out.append((f"sender{s.index}", "throughput_bps", a, b, s.throughput))
        groups = sorted({s.group for s in self.senders})
        for g in groups:
            out.append((g, "mean_throughput_bps", a, b, self.group_mean(g)))
        for role, vals in (("legit", self.legit), ("attacker", self.attackers)):
            if vals:
                out.append((role, "mean_throughput_bps", a, b, fmean(vals)))
                out.append((role, "min_throughput_bps", a, b, min(vals)))
                out.append((role, "count", a, b, len(vals)))
        for l in self.links:
            out.append((l.name, "utilization", a, b, l.utilization))
            out.append((l.name, "bytes_tx", a, b, l.bytes_tx))
            out.append((l.name, "bytes_dropped", a, b, l.bytes_dropped))
            out.append((l.name, "mon_fraction", a, b, l.mon_fraction))
            lat = self.detection_latency(l)
            if lat is not None:
                out.append((l.name, "detection_latency_s", a, b, lat))
        opt = [
            ("throughput_ratio", self.throughput_ratio),
            ("fairness_index", self.fairness_index),
            ("fair_share_bps", self.fair_share if self.G + self.B else None),
            ("completion_ratio", self.completion_ratio),
            ("mean_transfer_time", self.mean_transfer_time),
        ]
        for name, value in opt:
            if value is not None:
                out.append(("all", name, a, b, value))
        if self.transfers_ok or self.transfers_failed:
            out.append(("all", "transfers_completed", a, b, self.transfers_ok))
            out.append(("all", "transfers_failed", a, b, self.transfers_failed))
        return out


def fmt(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.9g}"
    return str(value)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def evaluate_checks(m: Metrics, checks: dict, baseline: Optional[Metrics] = None) -> list[CheckResult]:
    """Compare a run against the thresholds named in a scenario's ``[checks]`` table."""
    out: list[CheckResult] = []

    def add(name, ok, detail):
        out.append(CheckResult(name, bool(ok), detail))

    legit = m.legit
    if "legit_min_bps" in checks:
        lo = min(legit) if legit else 0.0
        add("legit_min_bps", legit and lo >= checks["legit_min_bps"],
            f"min legit {lo:.0f} bps vs {checks['legit_min_bps']:.0f}")
    if "legit_min_theorem_nu" in checks:
        nu = checks["legit_min_theorem_nu"]
        bound = m.bound(nu) if m.G + m.B else 0.0
        lo = min(legit) if legit else 0.0
        add("legit_min_theorem", legit and lo >= bound,
            f"min legit {lo:.0f} bps vs bound {bound:.0f} (nu={nu})")
    if "legit_mean_min_bps" in checks:
        mean = fmean(legit) if legit else 0.0
        add("legit_mean_min_bps", mean >= checks["legit_mean_min_bps"],
            f"mean legit {mean:.0f} bps vs {checks['legit_mean_min_bps']:.0f}")
    if "legit_mean_min_factor" in checks:
        mean = fmean(legit) if legit else 0.0
        need = checks["legit_mean_min_factor"] * m.fair_share
        add("legit_mean_vs_fair_share", mean >= need,
            f"mean legit {mean:.0f} bps vs {checks['legit_mean_min_factor']} x {m.fair_share:.0f}")
    ratio = m.throughput_ratio
    if "ratio_min" in checks:
        add("ratio_min", ratio is not None and ratio >= checks["ratio_min"],
            f"ratio {fmt(ratio) if ratio is not None else 'n/a'} vs >= {checks['ratio_min']}")
    if "ratio_max" in checks:
        add("ratio_max", ratio is not None and ratio <= checks["ratio_max"],
            f"ratio {fmt(ratio) if ratio is not None else 'n/a'} vs <= {checks['ratio_max']}")
    if "jain_min" in checks:
        j = m.fairness_index
        add("jain_min", j is not None and j > checks["jain_min"],
            f"fairness {fmt(j) if j is not None else 'n/a'} vs > {checks['jain_min']}")
    if "utilization_min" in checks:
        add("utilization_min", m.utilization >= checks["utilization_min"],
            f"utilization {m.utilization:.3f} vs {checks['utilization_min']}")
    if "completion_min" in checks:
        c = m.completion_ratio
        add("completion_min", c is not None and c >= checks["completion_min"],
            f"completion {fmt(c) if c is not None else 'n/a'} "
            f"({m.transfers_ok} ok, {m.transfers_failed} failed) vs {checks['completion_min']}")
    if "mean_transfer_time_max" in checks:
        t = m.mean_transfer_time
        add("mean_transfer_time_max", t is not None and t <= checks["mean_transfer_time_max"],
            f"mean transfer {fmt(t) if t is not None else 'n/a'} s vs {checks['mean_transfer_time_max']}")
    if "extra_delay_max" in checks:
        t = m.mean_transfer_time
        t0 = baseline.mean_transfer_time if baseline is not None else None
        if t is None or t0 is None:
            add("extra_delay_max", False, "no completed transfers to compare")
        else:
            add("extra_delay_max", t - t0 <= checks["extra_delay_max"],
                f"extra delay {t - t0:.3f} s ({t:.3f} vs baseline {t0:.3f}) vs {checks['extra_delay_max']}")
    for gc in checks.get("group", []):
        name = gc["name"]
        mean = m.group_mean(name)
        if "mean_min_bps" in gc:
            add(f"{name}.mean_min_bps", mean >= gc["mean_min_bps"],
                f"{name} mean {mean:.0f} bps vs >= {gc['mean_min_bps']:.0f}")
        if "mean_max_bps" in gc:
            add(f"{name}.mean_max_bps", mean <= gc["mean_max_bps"],
                f"{name} mean {mean:.0f} bps vs <= {gc['mean_max_bps']:.0f}")
    return out
