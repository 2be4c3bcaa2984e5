"""
Whitney cubes of a wavy half-disc
=================================

Dyadic cubes whose distance to the boundary is comparable to their size.
"""

import numpy as np

from w2delta.geom import GraphDomain, HolderGraph
from w2delta.whitney import audit_cover, decompose, dyadic_sum, layers, log2_slope

# the region above y = 0.1 sin(4x) inside the unit disc
domain = GraphDomain(HolderGraph("sinusoid", amplitude=0.1, frequency=4.0), R=1.0)
cover = decompose(domain, s_max=10)
print(f"{len(cover)} cubes, unresolved area {cover.residual_measure:.2e}")

# every cube satisfies diam <= dist <= 4 diam, and none could be merged with its siblings
print(audit_cover(cover))

# cubes whose 6/5-dilation fits inside the quarter-radius region, counted level by level
for layer in layers(cover):
    if len(layer):
        print(f"level {layer.s:2d}: {len(layer):5d} cubes of diameter {layer.diam:.4f}")

# sums of diam^q converge exactly when q > n - 1 = 1
levels = list(range(5, 11))
for q in (1.0, 1.5, 2.0):
    total, per = dyadic_sum(cover, q)
    print(f"q={q}: total {total:.4f}, per-level log2 slope {log2_slope([per[s] for s in levels], levels):+.3f}")

# a point near the boundary belongs to a small cube, a point far from it to a large one
print(cover.sides[cover.locate(np.array([[0.0, 0.02], [0.0, 0.5]]))])
