"""Command-line front end: run scenarios, list presets, print defaults."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .scenario import POLICIES, ConfigError, Scenario, describe_defaults, list_presets, load_scenario
from .sim.metrics import CheckResult, Metrics, evaluate_checks, fmt
from .sim.network import Network, build

OUT_ENV = "NETFENCE_OUT"
CSV_HEADER = ("entity_id", "metric", "t_start", "t_end", "value")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_SIM = 0, 1, 2, 3


@dataclasses.dataclass
class ExperimentResult:
    metrics: Metrics
    checks: list
    baseline: Optional[Metrics]
    out_dir: Path

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _write_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for entity, metric, a, b, value in rows:
            w.writerow((entity, metric, fmt(float(a)), fmt(float(b)), fmt(value)))


def _plot_script(s: Scenario, net: Network) -> str:
    groups = sorted({r.group for r in net.senders})
    links = [p.name for p in net.ports]

    def sel(entity: str, metric: str) -> str:
        return f"\"< awk -F, '$1==\\\"{entity}\\\" && $2==\\\"{metric}\\\"' timeseries.csv\""

    lines = [
        f"# {s.name}: per-group throughput and link state over time",
        "set datafile separator ','",
        "set terminal pngcairo size 1000,700",
        f"set output '{s.name}.png'",
        "set multiplot layout 2,1",
        "set xlabel 'time (s)'",
        "set ylabel 'mean throughput (kbps)'",
        "set key outside right",
    ]
    plots = [f"{sel(g, 'mean_throughput_bps')} using 4:($5/1000) with lines title '{g}'" for g in groups]
    lines.append("plot " + ", \\\n     ".join(plots) if plots else "# no senders")
    lines.append("set ylabel 'utilization'")
    lines.append("set yrange [0:1.05]")
    plots = [f"{sel(l, 'utilization')} using 4:5 with lines title '{l}'" for l in links]
    lines.append("plot " + ", \\\n     ".join(plots) if plots else "# no links")
    lines.append("unset multiplot")
    return "\n".join(lines) + "\n"


def _summary(s: Scenario, m: Metrics, checks: list, baseline: Optional[Metrics]) -> str:
    out = [f"scenario: {s.name}", f"policy: {s.policy}", f"seed: {s.seed}",
           f"window: {m.t_start:g}-{m.t_end:g} s", f"senders: {m.G} legitimate, {m.B} attackers",
           f"events: {m.events}"]
    if m.legit:
        out.append(f"legitimate throughput: mean {sum(m.legit) / m.G:.0f} bps, min {min(m.legit):.0f} bps")
    if m.attackers:
        out.append(f"attacker throughput: mean {sum(m.attackers) / m.B:.0f} bps")
    for label, value in (("throughput ratio", m.throughput_ratio), ("fairness index", m.fairness_index),
                         ("completion ratio", m.completion_ratio),
                         ("mean transfer time", m.mean_transfer_time)):
        if value is not None:
            out.append(f"{label}: {fmt(value)}")
    for l in m.links:
        line = f"link {l.name}: utilization {l.utilization:.3f}, monitored {l.mon_fraction:.0%} of window"
        lat = m.detection_latency(l)
        if lat is not None:
            line += f", attack detected after {lat:.1f} s"
        out.append(line)
    for g in sorted({r.group for r in m.senders}):
        out.append(f"group {g}: mean {m.group_mean(g):.0f} bps")
    if baseline is not None and baseline.mean_transfer_time is not None:
        out.append(f"baseline mean transfer time: {fmt(baseline.mean_transfer_time)}")
    if checks:
        out.append("checks:")
        for c in checks:
            out.append(f"  {'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return "\n".join(out) + "\n"


def default_out_dir(s: Scenario) -> Path:
    return Path(os.environ.get(OUT_ENV, "netfence-out")) / s.name


def run_experiment(s: Scenario, out_dir=None, *, with_checks: bool = True) -> ExperimentResult:
    """Simulate ``s`` and write metrics.csv, timeseries.csv, plot.gp and summary.txt."""
    out = Path(out_dir) if out_dir is not None else default_out_dir(s)
    out.mkdir(parents=True, exist_ok=True)
    net = build(s)
    net.sim.run(s.duration)
    m = net.metrics()
    baseline = None
    checks: list[CheckResult] = []
    if with_checks and s.checks:
        if "extra_delay_max" in s.checks:
            base = build(s.without_attackers())
            base.sim.run(s.duration)
            baseline = base.metrics()
        checks = evaluate_checks(m, s.checks, baseline)
    _write_csv(out / "metrics.csv", m.rows())
    _write_csv(out / "timeseries.csv", net.samples + net.group_timeseries())
    (out / "plot.gp").write_text(_plot_script(s, net))
    (out / "summary.txt").write_text(_summary(s, m, checks, baseline))
    if net.trace is not None:
        (out / "trace.log").write_text("\n".join(net.trace) + "\n")
    return ExperimentResult(m, checks, baseline, out)


def _cmd_run(args) -> int:
    s = load_scenario(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.policy is not None:
        changes["policy"] = args.policy
    if args.duration is not None:
        if args.duration <= 0:
            raise ConfigError(f"must be > 0, got {args.duration}", field="--duration")
        # keep the measured window the same fraction of the run
        changes["duration"] = args.duration
        changes["warmup"] = s.warmup * args.duration / s.duration
    if args.trace:
        changes["trace"] = True
    if changes:
        s = s.with_overrides(**changes)
    res = run_experiment(s, args.out, with_checks=True)
    sys.stdout.write((res.out_dir / "summary.txt").read_text())
    if args.check and not res.passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netfence", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate a scenario file or preset")
    r.add_argument("scenario", help="path to a .toml scenario or a preset name")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<name>)")
    r.add_argument("--check", action="store_true", help="exit non-zero if any scenario check fails")
    r.add_argument("--policy", choices=POLICIES)
    r.add_argument("--duration", type=float,
                   help="override the simulated duration (s); warmup scales with it")
    r.add_argument("--trace", action="store_true", help="also write a per-packet trace.log")
    sub.add_parser("list-presets", help="list bundled scenarios")
    sub.add_parser("dump-defaults", help="print default protocol parameters as TOML")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "list-presets":
            for name in list_presets():
                print(f"{name:22s} {load_scenario(name).description}")
            return EXIT_OK
        if args.command == "dump-defaults":
            sys.stdout.write(describe_defaults())
            return EXIT_OK
        return _cmd_run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any simulation fault as an exit status
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
