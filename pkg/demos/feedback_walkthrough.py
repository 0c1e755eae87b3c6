"""
Stamping, carrying and checking congestion feedback
===================================================

An access router stamps a nop token on a packet, a congested link turns it
into a decrease, and the header bytes carry it back. Any tampering breaks
the MAC.
"""

import dataclasses

from netfence.crypto import AccessSecrets, KeyRegistry, derive_as_keys, stamp_decr, stamp_incr, stamp_nop, validate
from netfence.wire import NetfenceHeader, decode_header, encode_header, hexdump

SRC, DST = 0x0A000001, 0x0B000001
ACCESS_AS, LINK_AS, LINK = 1, 100, 7

# pairwise AS keys, plus the access router's own rotating secret
keys = derive_as_keys(42, [ACCESS_AS, LINK_AS])
access = KeyRegistry(ACCESS_AS, AccessSecrets.from_seed(42, ACCESS_AS), keys)
bottleneck = KeyRegistry(LINK_AS, None, keys)
link_owner = {LINK: LINK_AS}

now = 1000.4
nop = stamp_nop(SRC, DST, now, access)
print("stamped      ", nop.describe(), validate(nop, SRC, DST, now, access, link_owner).name)

# the bottleneck is monitored and congested: it rewrites the feedback
down = stamp_decr(nop, SRC, DST, LINK, bottleneck, ACCESS_AS)
print("after link   ", down.describe(), validate(down, SRC, DST, now + 1, access, link_owner).name)

# an uncongested monitored link would have handed back an increase instead
up = stamp_incr(SRC, DST, now, LINK, access)
print("increase     ", up.describe(), validate(up, SRC, DST, now + 1, access, link_owner).name)

# on the wire
h = NetfenceHeader(fwd_mode=down.mode, fwd_action=down.action, proto=6, fwd_ts=down.ts, fwd_mac=down.mac,
                   fwd_link_id=down.link, token_nop=down.token_nop)
raw = encode_header(h)
print(f"\n{len(raw)} header bytes:\n{hexdump(raw)}")
assert decode_header(raw) == h

# a sender that swaps the decrease for an increase is caught
forged = dataclasses.replace(down, action=up.action)
print("\nforged       ", forged.describe(), validate(forged, SRC, DST, now + 1, access, link_owner).name)

# and feedback goes stale after the validity window
print("stale        ", down.describe(), validate(down, SRC, DST, now + 6, access, link_owner).name)
