"""Protocol parameters shared by access routers, bottleneck routers and the simulator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class Parameters:
    """Tunable constants. Rates are in bits/second, times in seconds.

    The request limiter refills ``l1`` tokens per second; a level-k request
    costs ``2**(k-1)`` tokens.
    """

    l1: float = 1000.0
    request_depth: float = 100.0
    i_lim: float = 2.0
    w: float = 4.0
    delta_ai: float = 12_000.0
    delta_md: float = 0.1
    p_th: float = 0.02
    q_lim_seconds: float = 0.2
    red_min_frac: float = 0.5
    red_max_frac: float = 0.75
    w_q: float = 0.1
    red_max_p: float = 0.1
    t_a: float = 600.0
    t_b: float = 600.0
    request_channel_frac: float = 0.05
    request_window: float = 0.1
    detect_interval: float = 1.0
    detection: str = "loss"
    util_threshold: float = 0.95
    initial_rate: float = 64_000.0
    rate_floor: float = 1_000.0
    max_cache_delay: float = 1.0
    key_period: float = 16.0
    inference_staleness: float = 20.0
    fallback_grace: float = 10.0
    max_priority: int = 15
    multi_max_entries: int = 8

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in ("detection",):
                continue
            if f.name == "delta_md":
                if not 0.0 <= value < 1.0:
                    raise ValueError(f"delta_md must lie in [0, 1), got {value}")
                continue
            if value <= 0:
                raise ValueError(f"{f.name} must be strictly positive, got {value}")
        if self.detection not in ("loss", "utilization"):
            raise ValueError(f"detection must be 'loss' or 'utilization', got {self.detection!r}")
        if not self.red_min_frac < self.red_max_frac <= 1.0:
            raise ValueError("need red_min_frac < red_max_frac <= 1")
        if self.w_q > 1.0 or self.red_max_p > 1.0 or self.request_channel_frac > 1.0:
            raise ValueError("w_q, red_max_p and request_channel_frac must be <= 1")

    def q_lim(self, capacity_bps: float) -> float:
        """Maximum regular-channel queue length in bytes for a link."""
        return self.q_lim_seconds * capacity_bps / 8.0

    def red_thresholds(self, capacity_bps: float) -> tuple[float, float]:
        q = self.q_lim(capacity_bps)
        return self.red_min_frac * q, self.red_max_frac * q

    def replace(self, **overrides) -> "Parameters":
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise KeyError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **overrides)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


DEFAULTS = Parameters()
