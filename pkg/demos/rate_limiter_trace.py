"""
Robust AIMD at one access router
================================

One sender pushes a steady 200 kbps through its access router. The
bottleneck reports congestion for the first 20 seconds and then clears.
The rate limit falls multiplicatively and climbs back additively, once per
two-second interval.
"""

from netfence.access import AccessRouter
from netfence.crypto import AccessSecrets, KeyRegistry, derive_as_keys, stamp_decr, stamp_incr, stamp_nop
from netfence.packet import Kind, Packet
from netfence.params import Parameters
from netfence.sim.engine import Simulator

SRC, DST, LINK = 1, 2, 7
params = Parameters()
keys = derive_as_keys(1, [1, 100])
sim = Simulator()
router = AccessRouter(1, params, KeyRegistry(1, AccessSecrets.from_seed(1, 1), keys), {LINK: 100},
                      scheduler=sim, emit=lambda pkt, now: None)
bottleneck = KeyRegistry(100, None, keys)

gap = 1500 * 8 / 200_000
t, last_print = 0.0, -1.0
print(" time   r_lim (kbps)")
while t < 60.0:
    sim.run(t)
    reg = router._reg(t)
    if t < 20.0:
        fb = stamp_decr(stamp_nop(SRC, DST, t, reg), SRC, DST, LINK, bottleneck, 1)
    else:
        fb = stamp_incr(SRC, DST, t, LINK, reg)
    router.classify_and_police(Packet(0, SRC, DST, 1500, Kind.REGULAR, 0, fb), t)
    rl = router.limiters.get((SRC, LINK))
    if rl is not None and t - last_print >= 4.0:
        print(f"{t:5.1f}   {rl.r_lim / 1000:8.1f}")
        last_print = t
    t += gap

print("\nrouter counters:", router.stats)
