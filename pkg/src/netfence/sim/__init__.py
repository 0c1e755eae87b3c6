"""Discrete-event simulation of hosts, access routers and bottleneck links."""

from .engine import CausalityError, Simulator, derive_rng
from .metrics import Metrics, jain_index, theorem_bound, tva_share_ratio
from .network import Network, Route, build, run

__all__ = [
    "CausalityError", "Simulator", "derive_rng", "Metrics", "jain_index", "theorem_bound",
    "tva_share_ratio", "Network", "Route", "build", "run",
]
