"""Declarative experiment descriptions loaded from TOML."""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .params import Parameters

PRESET_DIR = Path(__file__).with_name("presets")

POLICIES = ("netfence-core", "netfence-b1", "netfence-b2", "fq-drr", "droptail")
TOPOLOGIES = ("dumbbell", "parking_lot")
ROLES = ("legit", "attacker")
TRAFFIC = ("tcp", "files", "web", "cbr", "onoff", "request_flood")
RECEIVERS = ("honest", "colluder", "victim")
STRATEGIES = ("honest", "hide_decr", "stale_incr", "silent")
PATHS = ("A", "B", "C")


class ConfigError(ValueError):
    """A scenario file is malformed; carries the file, line and field at fault."""

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None,
                 field: Optional[str] = None):
        self.message = message
        self.path = path
        self.line = line
        self.field = field
        where = path or "<scenario>"
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: " + (f"{field}: " if field else "")
        super().__init__(prefix + message)


@dataclass
class TopologySpec:
    kind: str
    link_delay: float = 0.010
    bottleneck_bps: Optional[float] = None
    l1_bps: Optional[float] = None
    l2_bps: Optional[float] = None
    source_ases: int = 10
    ases_per_group: int = 5
    colluders: int = 9
    per_as_fallback: bool = False
    compromised_ases: list = field(default_factory=list)


@dataclass
class GroupSpec:
    name: str
    role: str
    traffic: str
    count: Optional[int] = None
    per_as: Optional[int] = None
    path: str = "A"
    receiver: str = "honest"
    rate_bps: float = 1e6
    strategy: str = "honest"
    t_on: Optional[float] = None
    t_off: Optional[float] = None
    phase: float = 0.0
    level: int = 9
    file_bytes: int = 20_000
    # web-like file size mixture
    web_pareto_prob: float = 0.2
    web_pareto_shape: float = 1.2
    web_pareto_scale: float = 10_000.0
    web_exp_mean: float = 8_000.0
    max_file_bytes: int = 150_000
    start: float = 0.0
    start_jitter: float = 1.0
    send_jitter: float = 0.0
    ases: Optional[list] = None


@dataclass
class Scenario:
    name: str
    duration: float
    topology: TopologySpec
    groups: list
    description: str = ""
    seed: int = 1
    warmup: float = 0.0
    bucket: float = 10.0
    policy: str = "netfence-core"
    fast_forward: bool = True
    trace: bool = False
    params: Parameters = field(default_factory=Parameters)
    checks: dict = field(default_factory=dict)
    source: Optional[str] = None

    @property
    def legit_count(self) -> int:
        return sum(self.group_size(g) for g in self.groups if g.role == "legit")

    @property
    def attacker_count(self) -> int:
        return sum(self.group_size(g) for g in self.groups if g.role == "attacker")

    def group_size(self, g: GroupSpec) -> int:
        if g.count is not None:
            return g.count
        return g.per_as * len(self.group_ases(g))

    def source_as_ids(self) -> list[int]:
        t = self.topology
        if t.kind == "dumbbell":
            return list(range(1, t.source_ases + 1))
        return list(range(1, 3 * t.ases_per_group + 1))

    def group_ases(self, g: GroupSpec) -> list[int]:
        if g.ases:
            return list(g.ases)
        t = self.topology
        if t.kind == "dumbbell":
            return list(range(1, t.source_ases + 1))
        k = t.ases_per_group
        base = PATHS.index(g.path) * k
        return list(range(base + 1, base + k + 1))

    def with_overrides(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def without_attackers(self) -> "Scenario":
        return dataclasses.replace(self, groups=[g for g in self.groups if g.role != "attacker"],
                                   name=self.name + "-baseline")


# -- line locator ---------------------------------------------------------------

_HDR_ARRAY = re.compile(r"^\s*\[\[\s*([A-Za-z0-9_.\-]+)\s*\]\]")
_HDR_TABLE = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\"]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _key_lines(text: str) -> dict:
    out: dict = {}
    counts: dict = {}
    current: tuple = ("", None)
    for lineno, raw in enumerate(text.splitlines(), 1):
        m = _HDR_ARRAY.match(raw)
        if m:
            name = m.group(1)
            idx = counts.get(name, 0)
            counts[name] = idx + 1
            current = (name, idx)
            out.setdefault((current, None), lineno)
            continue
        m = _HDR_TABLE.match(raw)
        if m:
            current = (m.group(1), None)
            out.setdefault((current, None), lineno)
            continue
        m = _KEY.match(raw)
        if m:
            out.setdefault((current, m.group(1)), lineno)
    return out


class _Reader:
    def __init__(self, text: str, path: Optional[str]):
        self.path = path
        self.lines = _key_lines(text)

    def error(self, msg: str, section: str, key: Optional[str] = None, index=None) -> ConfigError:
        line = self.lines.get(((section, index), key)) or self.lines.get(((section, index), None))
        fieldname = section + (f"[{index}]" if index is not None else "") + (f".{key}" if key else "")
        return ConfigError(msg, path=self.path, line=line, field=fieldname or None)

    def get(self, table: dict, key: str, kind, section: str, default=None, *, index=None,
            required=False, choices=None, positive=False, nonneg=False):
        if key not in table:
            if required:
                raise self.error(f"missing required field '{key}'", section, None, index)
            return default
        value = table[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is list:
            ok = isinstance(value, list)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
        if not ok:
            raise self.error(f"expected {kind.__name__}, got {type(value).__name__}", section, key, index)
        if choices is not None and value not in choices:
            raise self.error(f"must be one of {', '.join(choices)}; got {value!r}", section, key, index)
        if positive and value <= 0:
            raise self.error(f"must be > 0, got {value}", section, key, index)
        if nonneg and value < 0:
            raise self.error(f"must be >= 0, got {value}", section, key, index)
        return value

    def unknown(self, table: dict, allowed, section: str, index=None) -> None:
        for key in table:
            if key not in allowed:
                raise self.error(f"unknown field '{key}'", section, key, index)


_TOPO_FIELDS = {f.name for f in dataclasses.fields(TopologySpec)}
_GROUP_FIELDS = {f.name for f in dataclasses.fields(GroupSpec)}
_SCEN_FIELDS = {"name", "description", "seed", "duration", "warmup", "bucket", "policy",
                "fast_forward", "trace"}
CHECK_KEYS = {"legit_min_bps", "legit_min_theorem_nu", "legit_mean_min_bps", "legit_mean_min_factor",
              "ratio_min", "ratio_max", "jain_min", "utilization_min", "completion_min",
              "mean_transfer_time_max", "extra_delay_max", "group"}
_GROUP_CHECK_KEYS = {"name", "mean_min_bps", "mean_max_bps"}


def parse_scenario(text: str, path: Optional[str] = None) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", path=path,
                          line=int(m.group(1)) if m else None) from None
    r = _Reader(text, path)
    for top in doc:
        if top not in ("scenario", "parameters", "topology", "groups", "checks"):
            raise r.error(f"unknown section '{top}'", top)
    if "scenario" not in doc:
        raise ConfigError("missing [scenario] section", path=path, field="scenario")
    if "topology" not in doc:
        raise ConfigError("missing [topology] section", path=path, field="topology")
    if not doc.get("groups"):
        raise ConfigError("at least one [[groups]] entry is required", path=path, field="groups")

    s = doc["scenario"]
    r.unknown(s, _SCEN_FIELDS, "scenario")
    default_name = Path(path).stem if path else "scenario"
    name = r.get(s, "name", str, "scenario", default_name)
    duration = r.get(s, "duration", float, "scenario", required=True, positive=True)
    warmup = r.get(s, "warmup", float, "scenario", 0.0, nonneg=True)
    if warmup >= duration:
        raise r.error("warmup must be shorter than duration", "scenario", "warmup")
    scen_kw = dict(
        name=name, duration=duration, warmup=warmup,
        description=r.get(s, "description", str, "scenario", ""),
        seed=r.get(s, "seed", int, "scenario", 1),
        bucket=r.get(s, "bucket", float, "scenario", 10.0, positive=True),
        policy=r.get(s, "policy", str, "scenario", "netfence-core", choices=POLICIES),
        fast_forward=r.get(s, "fast_forward", bool, "scenario", True),
        trace=r.get(s, "trace", bool, "scenario", False),
    )

    overrides = doc.get("parameters", {})
    fields = {f.name: f for f in dataclasses.fields(Parameters)}
    clean = {}
    for key, value in overrides.items():
        if key not in fields:
            raise r.error(f"unknown parameter '{key}'", "parameters", key)
        kind = type(getattr(Parameters(), key))
        clean[key] = r.get(overrides, key, kind, "parameters")
    try:
        params = Parameters(**clean)
    except ValueError as exc:
        bad = next((k for k in clean if k in str(exc)), None)
        raise r.error(str(exc), "parameters", bad) from None

    t = doc["topology"]
    r.unknown(t, _TOPO_FIELDS, "topology")
    kind = r.get(t, "kind", str, "topology", required=True, choices=TOPOLOGIES)
    topo = TopologySpec(
        kind=kind,
        link_delay=r.get(t, "link_delay", float, "topology", 0.010, positive=True),
        bottleneck_bps=r.get(t, "bottleneck_bps", float, "topology", None, positive=True,
                             required=kind == "dumbbell"),
        l1_bps=r.get(t, "l1_bps", float, "topology", None, positive=True, required=kind == "parking_lot"),
        l2_bps=r.get(t, "l2_bps", float, "topology", None, positive=True, required=kind == "parking_lot"),
        source_ases=r.get(t, "source_ases", int, "topology", 10, positive=True),
        ases_per_group=r.get(t, "ases_per_group", int, "topology", 5, positive=True),
        colluders=r.get(t, "colluders", int, "topology", 9, positive=True),
        per_as_fallback=r.get(t, "per_as_fallback", bool, "topology", False),
        compromised_ases=r.get(t, "compromised_ases", list, "topology", []),
    )

    if kind == "dumbbell":
        sources = list(range(1, topo.source_ases + 1))
    else:
        sources = list(range(1, 3 * topo.ases_per_group + 1))
    groups = []
    raw_groups = doc["groups"]
    if not isinstance(raw_groups, list):
        raise r.error("must be an array of tables ([[groups]])", "groups")
    for i, g in enumerate(raw_groups):
        r.unknown(g, _GROUP_FIELDS, "groups", i)
        gs = GroupSpec(
            name=r.get(g, "name", str, "groups", required=True, index=i),
            role=r.get(g, "role", str, "groups", required=True, index=i, choices=ROLES),
            traffic=r.get(g, "traffic", str, "groups", required=True, index=i, choices=TRAFFIC),
            count=r.get(g, "count", int, "groups", None, index=i, nonneg=True),
            per_as=r.get(g, "per_as", int, "groups", None, index=i, nonneg=True),
            path=r.get(g, "path", str, "groups", "A", index=i, choices=PATHS),
            receiver=r.get(g, "receiver", str, "groups", "honest", index=i, choices=RECEIVERS),
            rate_bps=r.get(g, "rate_bps", float, "groups", 1e6, index=i, positive=True),
            strategy=r.get(g, "strategy", str, "groups", "honest", index=i, choices=STRATEGIES),
            t_on=r.get(g, "t_on", float, "groups", None, index=i, positive=True),
            t_off=r.get(g, "t_off", float, "groups", None, index=i, nonneg=True),
            phase=r.get(g, "phase", float, "groups", 0.0, index=i, nonneg=True),
            level=r.get(g, "level", int, "groups", 9, index=i, nonneg=True),
            file_bytes=r.get(g, "file_bytes", int, "groups", 20_000, index=i, positive=True),
            web_pareto_prob=r.get(g, "web_pareto_prob", float, "groups", 0.2, index=i, nonneg=True),
            web_pareto_shape=r.get(g, "web_pareto_shape", float, "groups", 1.2, index=i, positive=True),
            web_pareto_scale=r.get(g, "web_pareto_scale", float, "groups", 10_000.0, index=i, positive=True),
            web_exp_mean=r.get(g, "web_exp_mean", float, "groups", 8_000.0, index=i, positive=True),
            max_file_bytes=r.get(g, "max_file_bytes", int, "groups", 150_000, index=i, positive=True),
            start=r.get(g, "start", float, "groups", 0.0, index=i, nonneg=True),
            start_jitter=r.get(g, "start_jitter", float, "groups", 1.0, index=i, nonneg=True),
            send_jitter=r.get(g, "send_jitter", float, "groups", 0.0, index=i, nonneg=True),
            ases=r.get(g, "ases", list, "groups", None, index=i),
        )
        if (gs.count is None) == (gs.per_as is None):
            raise r.error("exactly one of 'count' or 'per_as' must be given", "groups", None, i)
        if gs.web_pareto_prob > 1.0:
            raise r.error("must be a probability in [0, 1]", "groups", "web_pareto_prob", i)
        if gs.send_jitter > 1.0:
            raise r.error("send_jitter is a fraction of the send interval, at most 1", "groups", "send_jitter", i)
        if gs.traffic == "onoff" and gs.t_on is None:
            raise r.error("on-off traffic needs t_on", "groups", "t_on", i)
        if gs.level > params.max_priority:
            raise r.error(f"level exceeds max_priority {params.max_priority}", "groups", "level", i)
        if kind == "dumbbell" and "path" in g:
            raise r.error("paths only apply to the parking_lot topology", "groups", "path", i)
        if gs.ases is not None:
            if not gs.ases:
                raise r.error("must list at least one AS", "groups", "ases", i)
            bad = [a for a in gs.ases if a not in sources]
            if bad:
                raise r.error(f"AS {bad[0]} is not a source AS of this topology", "groups", "ases", i)
        groups.append(gs)
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise r.error("group names must be unique", "groups")

    checks = dict(doc.get("checks", {}))
    for key in checks:
        if key not in CHECK_KEYS:
            raise r.error(f"unknown check '{key}'", "checks", key)
    for i, gc in enumerate(checks.get("group", [])):
        for key in gc:
            if key not in _GROUP_CHECK_KEYS:
                raise r.error(f"unknown group check field '{key}'", "checks.group", key, i)
        if gc.get("name") not in names:
            raise r.error(f"check refers to unknown group {gc.get('name')!r}", "checks.group", "name", i)

    scen = Scenario(topology=topo, groups=groups, params=params, checks=checks, source=path, **scen_kw)
    all_ases = set(scen.source_as_ids())
    for a in topo.compromised_ases:
        if a not in all_ases:
            raise r.error(f"compromised AS {a} is not a source AS", "topology", "compromised_ases")
    if scen.legit_count + scen.attacker_count <= 0:
        raise ConfigError("scenario has no senders (G + B must be > 0)", path=path, field="groups")
    return scen


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def preset_path(name: str) -> Path:
    return PRESET_DIR / f"{name}.toml"


def load_scenario(ref) -> Scenario:
    """Load a scenario from a file path or a bundled preset name."""
    path = Path(ref)
    if not path.exists():
        candidate = preset_path(str(ref))
        if not candidate.exists():
            raise ConfigError(f"no such scenario file or preset: {ref}", path=str(ref))
        path = candidate
    return parse_scenario(path.read_text(), str(path))


def describe_defaults() -> str:
    lines = ["[parameters]"]
    for key, value in Parameters().as_dict().items():
        lines.append(f"{key} = {value!r}" if isinstance(value, str) else f"{key} = {value}")
    return "\n".join(lines) + "\n"

