"""Map attack-induced error along a route with one landmark-sparse segment.

The sparse segment (a corridor whose only along-axis cue is a pair of
slanted alcoves) should stand out. Takes about a minute.
"""

import numpy as np

from icp_attack.attack import AttackConfig
from icp_attack.data import synthetic_route
from icp_attack.harness import route_map

pairs, polyline = synthetic_route(segments=10, repeats=2, seed=0)
report = route_map(pairs, AttackConfig(lam=0.1, beta=1000), cap=0.3, polyline=polyline)

raw = report.raw_errors()
for e in report.entries:
    bar = "#" * int(40 * e.worst_error / report.cap)
    flag = " (capped)" if e.cap_applied else ""
    print(f"{e.location[0]:6.1f} m  {e.raw_error:.3f}  {bar}{flag}  {e.pair_ids[0].rsplit('-', 1)[0]}")
print(f"90th percentile {np.percentile(raw, 90):.3f}, worst {raw.max():.3f}")
