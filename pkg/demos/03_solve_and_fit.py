"""
Cut-cell solves and boundary affine fits
========================================

Second-order solves on a curved domain, then the C^{1,alpha0} fit at a boundary point.
"""

import numpy as np

from w2delta.estimates import QuasiNormSpec, holder_boundary_fit
from w2delta.geom import GraphDomain, HolderGraph
from w2delta.solutions import CutCellGrid, ManufacturedSolution, sample, solve_linear

domain = GraphDomain(HolderGraph("sinusoid", amplitude=0.1, frequency=4.0), R=1.0)
exact = ManufacturedSolution("smooth-bump", k=(1.0, 2.0), coeffs=(1.0, 2.0))

hs, errors = [1 / 16, 1 / 32, 1 / 64, 1 / 128], []
for h in hs:
    grid = CutCellGrid(domain, h)
    u, f, g = sample(exact, grid)
    sol = solve_linear(domain, (1.0, 2.0), f, g, h, method="direct", grid=grid)
    errors.append(np.max(np.abs(sol.values - u.values)))
    print(f"h = 1/{round(1 / h):3d}: {grid.n_interior:6d} unknowns, max error {errors[-1]:.2e}")
print("observed order", np.polyfit(np.log(hs), np.log(errors), 1)[0])

# sup |u - l| / r^(1 + alpha0) over shrinking half-balls at the boundary point above x = 0
spec = QuasiNormSpec(alpha0=0.15)
x0 = np.array([0.0, 0.0])
fit = holder_boundary_fit(sol, x0, spec, [1 / 8, 1 / 16, 1 / 32])
print("l(x) =", fit.value, "+", fit.slope, ". x ;  ratios", fit.per_radius)

# x_n^(1.5) stays below |x|^(1.5), so its fit constant cannot exceed 1
flat = CutCellGrid(GraphDomain(R=1.0), 1 / 256)
barrier, _, _ = sample(ManufacturedSolution("power-barrier", alpha0=0.5), flat)
print("power barrier C_fit", holder_boundary_fit(barrier, x0, QuasiNormSpec(alpha0=0.5), [1 / 8, 1 / 16, 1 / 32]).C_fit)
