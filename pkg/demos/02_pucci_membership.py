"""
Extremal operators and the solution class
=========================================

M^- and M^+ bracket every linear operator with eigenvalues in [lambda, Lambda].
"""

import numpy as np

from w2delta.geom import GraphDomain, HolderGraph
from w2delta.pucci import Ellipticity, identity_suite, in_S_discrete, pucci_pair
from w2delta.solutions import CutCellGrid, ManufacturedSolution, sample

e = Ellipticity(1.0, 2.0)
print([float(v) for v in pucci_pair(np.diag([1.0, 1.0]), e)])    # [2, 4]
print([float(v) for v in pucci_pair(np.diag([1.0, -1.0]), e)])   # [-1, 1]

# worst violations of duality, homogeneity, additivity, monotonicity
print(identity_suite(count=20_000, n=3, e=e))

# u = sin(x) sin(y) solves u_xx + 2 u_yy = f, so it sits in S(1, 2, f)
grid = CutCellGrid(GraphDomain(HolderGraph("sinusoid", amplitude=0.1), R=1.0), 1 / 64)
u, f, _ = sample(ManufacturedSolution("smooth-bump", coeffs=(1.0, 2.0)), grid)
rep = in_S_discrete(u, f, e, trunc_const=1.0)
print(f"bracket holds at {rep.fraction:.2%} of {len(rep.nodes)} nodes, smallest margin {rep.min_margin:.3f}")
