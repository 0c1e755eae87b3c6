"""
Getting a connection through a request flood
============================================

Level-9 request floods fill the request channel while ten users fetch
20 KB files. A user who has been quiet can afford a higher level and so
still gets its SYN through.
"""

from netfence.access import RequestLimiter, request_cost
from netfence.scenario import load_scenario
from netfence.sim.network import run

# the token rule: each level costs twice the one below
lim = RequestLimiter(100.0, 1000.0, 100.0, 0.0)
print("level  cost  sustained/s")
for k in range(1, 11):
    print(f"{k:5d} {request_cost(k):5.0f} {1000.0 / request_cost(k):12.2f}")
print("after 1 s of silence a sender holds", lim.tokens + 1000.0, "tokens")

s = load_scenario("request_flood").with_overrides(duration=120.0)
m = run(s)
quiet = run(s.without_attackers())
print(f"\ntransfers completed: {m.transfers_ok}, failed: {m.transfers_failed}")
print(f"mean transfer time {m.mean_transfer_time:.2f} s under attack, "
      f"{quiet.mean_transfer_time:.2f} s without")
