"""Pucci extremal operators and a discrete membership test for S(lambda, Lambda, f).

All operators accept a single symmetric matrix or a stack of shape (..., n, n).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# eigenvalues below this fraction of ||M|| count as zero
ZERO_RTOL = 1e-12


@dataclass(frozen=True)
class Ellipticity:
    lam: float = 1.0
    Lam: float = 2.0

    def __post_init__(self):
        if not (0 < self.lam <= self.Lam < np.inf):
            raise ConfigError(f"need 0 < lambda <= Lambda < inf, got ({self.lam}, {self.Lam})")

    def widen(self, lam, Lam):
        return Ellipticity(min(lam, self.lam), max(Lam, self.Lam))


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Dense symmetric matrix built from its upper triangle."""

    values: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.values, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("expected a square matrix")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix entries must be finite")
        upper = np.triu(m)
        object.__setattr__(self, "values", upper + np.triu(m, 1).T)

    @classmethod
    def from_upper(cls, n, entries):
        """Build from the row-major upper triangle (n(n+1)/2 numbers)."""
        m = np.zeros((n, n))
        m[np.triu_indices(n)] = entries
        return cls(m)

    @property
    def dim(self):
        return self.values.shape[0]


def _as_stack(M):
    if isinstance(M, SymMatrix):
        M = M.values
    M = np.asarray(M, dtype=float)
    if M.shape[-1] != M.shape[-2]:
        raise ValueError("expected square matrices")
    if M.shape[-1] > 3:
        raise ValueError("dimension must be <= 3")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    return M


def sym_eigenvalues(M):
    """Eigenvalues in nondecreasing order (LAPACK symmetric solver)."""
    M = _as_stack(M)
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))


def _split(M):
    e = sym_eigenvalues(M)
    scale = np.linalg.norm(_as_stack(M), axis=(-2, -1))
    e = np.where(np.abs(e) < ZERO_RTOL * scale[..., None], 0.0, e)
    pos = np.where(e > 0, e, 0.0).sum(axis=-1)
    neg = np.where(e < 0, e, 0.0).sum(axis=-1)
    return pos, neg


def pucci_minus(M, e: Ellipticity):
    pos, neg = _split(M)
    return e.lam * pos + e.Lam * neg


def pucci_plus(M, e: Ellipticity):
    pos, neg = _split(M)
    return e.Lam * pos + e.lam * neg


def pucci_pair(M, e: Ellipticity):
    pos, neg = _split(M)
    return e.lam * pos + e.Lam * neg, e.Lam * pos + e.lam * neg


@dataclass(frozen=True, eq=False)
class MembershipReport:
    """Discrete surrogate of ``M^-(D^2u) <= f <= M^+(D^2u)`` at interior nodes.

    ``lower_margin = f - M^-`` and ``upper_margin = M^+ - f``; a node passes when
    both exceed ``-(tau + roundoff)``.  ``roundoff`` is the per-node floating-point
    floor of the second differences.  This never certifies viscosity-sense membership.
    """

    nodes: np.ndarray
    coords: np.ndarray
    lower_margin: np.ndarray
    upper_margin: np.ndarray
    tau: float
    passed: np.ndarray
    roundoff: np.ndarray = None

    @property
    def fraction(self):
        return float(self.passed.mean()) if len(self.passed) else float("nan")

    @property
    def min_margin(self):
        if not len(self.passed):
            return float("nan")
        return float(min(self.lower_margin.min(), self.upper_margin.min()))

    def to_csv(self, path):
        n = self.coords.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node"] + [f"x{i}" for i in range(n)] + ["lower_margin", "upper_margin", "pass"])
            for k in range(len(self.nodes)):
                w.writerow([int(self.nodes[k])] + [repr(float(v)) for v in self.coords[k]]
                           + [repr(float(self.lower_margin[k])), repr(float(self.upper_margin[k])),
                              int(self.passed[k])])


def in_S_discrete(u, f, e: Ellipticity, report_tol=0.0, trunc_const=0.0, order=2.0,
                  cut_nodes=True) -> MembershipReport:
    """Check the Pucci bracket on the discrete Hessian of a grid function.

    The tolerance is ``tau = report_tol + trunc_const * h**order``.  With
    ``cut_nodes`` the nodes next to the boundary are checked too, using the
    shortened-arm second differences on the diagonal.  Each node also gets a
    rounding allowance ``32 eps max|u| / (h * shortest arm)``, which only matters
    where an arm is tiny.
    """
    from .estimates import discrete_hessian, discrete_hessian_all

    if u.grid is not f.grid:
        raise ValueError("u and f must live on the same grid")
    grid = u.grid
    H, nodes = discrete_hessian_all(u) if cut_nodes else discrete_hessian(u)
    if len(nodes) == 0:
        raise ValueError("no interior node has a full stencil")
    fv = f.values[nodes]
    lo, hi = pucci_pair(H, e)
    tau = report_tol + trunc_const * grid.h**order
    lower = fv - lo
    upper = hi - fv
    scale = float(np.max(np.abs(u.values[u.valid]), initial=0.0))
    roundoff = 32 * np.finfo(float).eps * scale / (grid.h * grid.arm_len[nodes].min(axis=1))
    ok = np.isfinite(fv) & (lower >= -(tau + roundoff)) & (upper >= -(tau + roundoff))
    return MembershipReport(nodes, grid.points[nodes], lower, upper, tau, ok, roundoff)


def random_symmetric(rng, count, n, scale=1.0):
    a = rng.uniform(-scale, scale, size=(count, n, n))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def identity_suite(count=100_000, n=2, e: Ellipticity = Ellipticity(1.0, 2.0), seed=0):
    """Worst violation of each structural identity over random symmetric matrices.

    Values are nonnegative; zero means the identity held exactly.
    """
    rng = np.random.default_rng(seed)
    A = random_symmetric(rng, count, n)
    B = random_symmetric(rng, count, n)
    t = rng.uniform(0.0, 10.0, size=count)
    lo_A, hi_A = pucci_pair(A, e)
    lo_B, hi_B = pucci_pair(B, e)
    lo_AB, hi_AB = pucci_pair(A + B, e)
    lo_neg, hi_neg = pucci_pair(-A, e)
    lo_t, hi_t = pucci_pair(t[:, None, None] * A, e)
    P = B @ np.swapaxes(B, -1, -2)  # positive semidefinite
    lo_P, hi_P = pucci_pair(A + P, e)
    trace = np.trace(A, axis1=-2, axis2=-1)
    flat = Ellipticity(e.lam, e.lam)
    lo_f, hi_f = pucci_pair(A, flat)
    # a random operator with eigenvalues in [lam, Lam] sits between M- and M+
    Q, _ = np.linalg.qr(rng.normal(size=(count, n, n)))
    coef = Q @ (rng.uniform(e.lam, e.Lam, size=(count, n))[..., None] * np.swapaxes(Q, -1, -2))
    lin = np.einsum("kij,kji->k", coef, A)
    return {
        "duality": float(max(np.max(np.abs(lo_A + hi_neg)), np.max(np.abs(hi_A + lo_neg)))),
        "homogeneity": float(max(np.max(np.abs(lo_t - t * lo_A)), np.max(np.abs(hi_t - t * hi_A)))),
        "trace_degeneracy": float(max(np.max(np.abs(lo_f - e.lam * trace)), np.max(np.abs(hi_f - e.lam * trace)))),
        "superadditivity": float(np.max(np.maximum(lo_A + lo_B - lo_AB, 0.0))),
        "subadditivity": float(np.max(np.maximum(hi_AB - hi_A - hi_B, 0.0))),
        "monotonicity": float(max(np.max(np.maximum(lo_A - lo_P, 0.0)), np.max(np.maximum(hi_A - hi_P, 0.0)))),
        "bracket": float(max(np.max(np.maximum(lo_A - lin, 0.0)), np.max(np.maximum(lin - hi_A, 0.0)))),
    }


def hand_examples(e: Ellipticity = Ellipticity(1.0, 2.0)):
    """(M-, M+) of diag(1, 1) and diag(1, -1)."""
    return {"diag(1,1)": pucci_pair(np.diag([1.0, 1.0]), e), "diag(1,-1)": pucci_pair(np.diag([1.0, -1.0]), e)}
