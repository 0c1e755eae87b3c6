"""
Colluding flooders on one bottleneck
====================================

Three quarters of the senders flood a colluding receiver at 1 Mbps. The
run is shortened from the preset so the comparison finishes in a couple of
minutes; pass a duration in seconds to change it.
"""

import sys

from netfence.scenario import load_scenario
from netfence.sim.network import run

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 300.0
base = load_scenario("colluding_single")
base = base.with_overrides(duration=duration, warmup=duration / 4)

print(f"{'policy':14s} {'legit kbps':>10s} {'attacker kbps':>13s} {'ratio':>6s} {'jain':>6s} {'util':>5s}")
for policy in ("netfence-core", "fq-drr", "droptail"):
    m = run(base.with_overrides(policy=policy))
    legit = sum(m.legit) / m.G / 1000
    bad = sum(m.attackers) / m.B / 1000
    print(f"{policy:14s} {legit:10.1f} {bad:13.1f} {m.throughput_ratio:6.2f} "
          f"{m.fairness_index:6.3f} {m.utilization:5.2f}")

m = run(base)
print(f"\nguaranteed share at nu=0.8: {m.bound(0.8) / 1000:.1f} kbps, "
      f"slowest legitimate sender: {min(m.legit) / 1000:.1f} kbps")
for link in m.links:
    lat = m.detection_latency(link)
    if lat is not None:
        print(f"{link.name} started monitoring {lat:.1f} s after the first attacker")
