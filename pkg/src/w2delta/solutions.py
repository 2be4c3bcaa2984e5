"""Grid functions in S(lambda, Lambda, f): manufactured families and a linear solver.

The grid is the lattice ``h Z^n`` restricted to the domain, plus the points
where lattice lines leave the domain (Shortley-Weller arms).  Interior nodes
come first in every node array, boundary nodes after them.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, ConvergenceError
from .geom import GraphDomain
from .pucci import Ellipticity

_SNAP = 1e-12


class CutCellGrid:
    """Lattice nodes of a graph domain with boundary-intersection arms.

    Attributes
    ----------
    points : (N + B, n) array
        Interior nodes followed by boundary nodes.
    lattice : (N, n) int array
        Integer lattice coordinates of the interior nodes (x = lattice * h).
    arm_len, arm_nbr : (N, 2n) arrays
        Arm length and neighbour id for directions ordered
        (axis 0 -, axis 0 +, axis 1 -, ...).
    boundary_kind : (B,) array
        ``"graph"`` or ``"sphere"`` for each boundary node.
    """

    def __init__(self, domain: GraphDomain, h: float):
        if h <= 0 or h > domain.R / 2:
            raise ConfigError(f"mesh width {h} is not resolvable on a domain of radius {domain.R}")
        self.domain = domain
        self.h = float(h)
        n = domain.dim
        c = domain.c
        imin = np.floor((c - domain.R) / h).astype(np.int64) - 1
        imax = np.ceil((c + domain.R) / h).astype(np.int64) + 1
        shape = tuple(int(v) for v in imax - imin + 1)
        axes = [np.arange(a, b + 1) for a, b in zip(imin, imax)]
        lat = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        inside = domain.contains(lat * h)
        lat = lat[inside]
        N = len(lat)
        if N == 0:
            raise ValueError("no lattice node lies inside the domain")
        lookup = np.full(shape, -1, dtype=np.int64)
        lookup[tuple((lat - imin).T)] = np.arange(N)
        self._origin = imin
        self._shape = np.array(shape)

        x = lat * h
        arm_len = np.full((N, 2 * n), h)
        arm_nbr = np.full((N, 2 * n), -1, dtype=np.int64)
        bpos, bkind, bsrc = [], [], []
        for i in range(n):
            for k, sign in enumerate((-1, 1)):
                col = 2 * i + k
                nb = lat.copy()
                nb[:, i] += sign
                ids = lookup[tuple((nb - imin).T)]
                arm_nbr[:, col] = ids
                miss = np.flatnonzero(ids < 0)
                if len(miss) == 0:
                    continue
                t, kind = self._exit_length(x[miss], i, sign)
                snapped = np.abs(t - h) <= _SNAP * h
                t = np.where(snapped, h, t)
                arm_len[miss, col] = t
                pos = x[miss].copy()
                pos[:, i] += sign * t
                pos[snapped, i] = (lat[miss[snapped], i] + sign) * h
                bpos.append(pos)
                bkind.append(kind)
                bsrc.append((miss, np.full(len(miss), col)))
        if bpos:
            pos = np.concatenate(bpos)
            kind = np.concatenate(bkind)
            src_node = np.concatenate([m for m, _ in bsrc])
            src_col = np.concatenate([cidx for _, cidx in bsrc])
            key = np.round(pos / (h * _SNAP * 1e3)).astype(np.int64)
            uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
            inv = inv.reshape(-1)
            order = np.argsort(first, kind="stable")
            rank = np.empty_like(order)
            rank[order] = np.arange(len(order))
            bid = rank[inv]
            arm_nbr[src_node, src_col] = N + bid
            first_sorted = first[order]
            bpoints = pos[first_sorted]
            bkind_u = kind[first_sorted]
            # boundary nodes that sit exactly on lattice points join the lookup
            on_lat = np.all(np.abs(bpoints / h - np.round(bpoints / h)) <= _SNAP, axis=1)
            li = np.round(bpoints[on_lat] / h).astype(np.int64) - imin
            okb = np.all((li >= 0) & (li < self._shape), axis=1)
            lookup[tuple(li[okb].T)] = N + np.flatnonzero(on_lat)[okb]
        else:
            bpoints = np.empty((0, n))
            bkind_u = np.empty(0, dtype="<U6")
        self.lattice = lat
        self.n_interior = N
        self.points = np.concatenate([x, bpoints])
        self.boundary_kind = bkind_u
        self.arm_len = arm_len
        self.arm_nbr = arm_nbr
        self._lookup = lookup

    def _exit_length(self, x, axis, sign):
        """First exit distance along ``sign * e_axis`` and the boundary piece hit."""
        d = self.domain
        h = self.h
        rel = x - d.c
        b = sign * rel[:, axis]
        q = np.sum(rel**2, axis=1) - d.R**2
        t_ball = -b + np.sqrt(np.maximum(b * b - q, 0.0))
        n = d.dim
        if axis == n - 1:
            if sign < 0:
                t_graph = d.height(x)
            else:
                t_graph = np.full(len(x), np.inf)
        else:
            end = x.copy()
            end[:, axis] += sign * h
            crosses = d.height(end) <= 0
            t_graph = np.full(len(x), np.inf)
            if np.any(crosses):
                xs = x[crosses]
                a = np.zeros(len(xs))
                c = np.full(len(xs), h)
                for _ in range(64):
                    m = 0.5 * (a + c)
                    p = xs.copy()
                    p[:, axis] += sign * m
                    above = d.height(p) > 0
                    a = np.where(above, m, a)
                    c = np.where(above, c, m)
                t_graph[crosses] = c
        t = np.minimum(np.minimum(t_ball, t_graph), h)
        kind = np.where(t_graph <= t_ball, "graph", "sphere")
        return t, kind

    @property
    def n(self):
        return self.domain.dim

    @property
    def n_nodes(self):
        return len(self.points)

    @property
    def interior(self):
        return slice(0, self.n_interior)

    @property
    def boundary(self):
        return slice(self.n_interior, self.n_nodes)

    def node_at(self, lattice_idx):
        """Node id at integer lattice coordinates, or -1."""
        li = np.asarray(lattice_idx, dtype=np.int64) - self._origin
        ok = np.all((li >= 0) & (li < self._shape), axis=-1)
        out = np.full(li.shape[:-1], -1, dtype=np.int64)
        out[ok] = self._lookup[tuple(li[ok].T)]
        return out

    @cached_property
    def parity(self):
        return (self.lattice.sum(axis=1) % 2).astype(bool)

    @cached_property
    def full_stencil(self):
        """Interior nodes whose axis arms all have length h and whose diagonal
        neighbours exist, so that central Hessian stencils apply."""
        ok = np.all(self.arm_len == self.h, axis=1)
        n = self.n
        for i in range(n):
            for j in range(i + 1, n):
                for si in (-1, 1):
                    for sj in (-1, 1):
                        nb = self.lattice.copy()
                        nb[:, i] += si
                        nb[:, j] += sj
                        ok &= self.node_at(nb) >= 0
        return ok

    def graph_boundary_nodes(self):
        return self.n_interior + np.flatnonzero(self.boundary_kind == "graph")

    def spec(self):
        return {"h": self.h, "domain": self.domain.to_dict(), "n_interior": int(self.n_interior),
                "n_boundary": int(self.n_nodes - self.n_interior)}


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Node values on a CutCellGrid; ``valid`` flags entries that carry data."""

    grid: CutCellGrid
    values: np.ndarray
    valid: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError("values must have one entry per grid node")
        object.__setattr__(self, "values", v)
        valid = np.isfinite(v) if self.valid is None else np.asarray(self.valid, dtype=bool) & np.isfinite(v)
        object.__setattr__(self, "valid", valid)

    def __mul__(self, t):
        return GridFunction(self.grid, self.values * t, self.valid, dict(self.meta))

    __rmul__ = __mul__

    def to_csv(self, path, meta=None):
        n = self.grid.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(n)] + ["value", "valid"])
            for p, v, ok in zip(self.grid.points, self.values, self.valid):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v)), int(ok)])
        side = self.grid.spec()
        side.update(self.meta)
        if meta:
            side.update(meta)
        with open(str(path) + ".json", "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)


def read_grid_function(path):
    """Rebuild the grid from the JSON sidecar and reload the node values."""
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    grid = CutCellGrid(GraphDomain.from_dict(side["domain"]), side["h"])
    vals, valid = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals.append(float(row["value"]))
            valid.append(bool(int(row["valid"])))
    return GridFunction(grid, np.array(vals), np.array(valid))


FAMILIES = ("quadratic", "power-barrier", "smooth-bump")


@dataclass(frozen=True, eq=False)
class ManufacturedSolution:
    """Closed-form member of S(lambda, Lambda, f).

    ``f`` is ``sum_i coeffs[i] * d_ii u`` with coefficients in [lambda, Lambda],
    which sits between M^- and M^+ of the Hessian.

    quadratic:      u = x.A.x / 2 + b.x + c
    power-barrier:  u = x_n^(1 + alpha0)          (flat boundary only)
    smooth-bump:    u = prod_i sin(k_i x_i)
    """

    name: str
    n: int = 2
    A: tuple = None
    b: tuple = None
    c: float = 0.0
    alpha0: float = 0.5
    k: tuple = None
    coeffs: tuple = None
    ellipticity: Ellipticity = field(default_factory=lambda: Ellipticity(1.0, 2.0))

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise ConfigError(f"unknown family {self.name!r}")
        n = self.n
        A = np.eye(n) * 2.0 if self.A is None else np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "b", np.zeros(n) if self.b is None else np.asarray(self.b, dtype=float))
        object.__setattr__(self, "k", np.ones(n) if self.k is None else np.asarray(self.k, dtype=float))
        a = np.ones(n) if self.coeffs is None else np.asarray(self.coeffs, dtype=float)
        e = self.ellipticity
        if np.any(a < e.lam) or np.any(a > e.Lam):
            raise ConfigError("coefficients must lie in [lambda, Lambda]")
        object.__setattr__(self, "coeffs", a)
        if self.name == "power-barrier" and not 0 < self.alpha0 < 1:
            raise ConfigError("power-barrier needs 0 < alpha0 < 1")

    def u(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "quadratic":
            return 0.5 * np.einsum("...i,ij,...j->...", x, self.A, x) + x @ self.b + self.c
        if self.name == "power-barrier":
            xn = x[..., -1]
            with np.errstate(invalid="ignore"):
                return np.where(xn >= 0, np.abs(xn) ** (1 + self.alpha0), np.nan)
        return np.prod(np.sin(self.k * x), axis=-1)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "quadratic":
            return x @ self.A + self.b
        if self.name == "power-barrier":
            g = np.zeros_like(x)
            with np.errstate(invalid="ignore"):
                g[..., -1] = np.where(x[..., -1] >= 0, (1 + self.alpha0) * np.abs(x[..., -1]) ** self.alpha0,
                                      np.nan)
            return g
        s = np.sin(self.k * x)
        cs = np.cos(self.k * x)
        out = np.empty_like(x)
        for i in range(self.n):
            out[..., i] = self.k[i] * cs[..., i] * np.prod(np.delete(s, i, axis=-1), axis=-1)
        return out

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        n = self.n
        H = np.zeros(x.shape[:-1] + (n, n))
        if self.name == "quadratic":
            H[...] = self.A
            return H
        if self.name == "power-barrier":
            xn = x[..., -1]
            with np.errstate(divide="ignore", invalid="ignore"):
                val = self.alpha0 * (1 + self.alpha0) * np.where(xn > 0, xn, np.nan) ** (self.alpha0 - 1)
            H[..., -1, -1] = val
            return H
        s = np.sin(self.k * x)
        cs = np.cos(self.k * x)
        for i in range(n):
            for j in range(n):
                if i == j:
                    H[..., i, i] = -self.k[i] ** 2 * np.prod(s, axis=-1)
                else:
                    rest = np.prod(np.delete(s, [i, j], axis=-1), axis=-1) if n > 2 else 1.0
                    H[..., i, j] = self.k[i] * self.k[j] * cs[..., i] * cs[..., j] * rest
        return H

    def f(self, x):
        H = self.hess(x)
        return np.einsum("i,...ii->...", self.coeffs, H)


def sample(ms: ManufacturedSolution, grid: CutCellGrid):
    """Evaluate (u, f, g) on a grid.  Singular values of f are flagged invalid."""
    if ms.n != grid.n:
        raise ValueError("dimension mismatch between solution and grid")
    if ms.name == "power-barrier" and grid.domain.graph.profile != "flat":
        raise ValueError("power-barrier is defined on flat-boundary domains only")
    x = grid.points
    u = ms.u(x)
    with np.errstate(all="ignore"):
        f = ms.f(x)
    fvalid = np.isfinite(f)
    f = np.where(fvalid, f, np.nan)
    gvalid = np.zeros(grid.n_nodes, dtype=bool)
    gvalid[grid.boundary] = True
    meta = {"family": ms.name}
    return (GridFunction(grid, u, meta=meta), GridFunction(grid, f, fvalid, meta=meta),
            GridFunction(grid, np.where(gvalid, u, np.nan), gvalid, meta=meta))


def _coeff_values(coeffs, x, n):
    if coeffs is None:
        coeffs = [1.0] * n
    if len(coeffs) != n:
        raise ValueError("need one coefficient field per axis")
    out = np.empty((len(x), n))
    for i, a in enumerate(coeffs):
        out[:, i] = a(x) if callable(a) else a
    return out


def _node_values(data, grid, where):
    if isinstance(data, GridFunction):
        return data.values[where]
    if callable(data):
        return np.asarray(data(grid.points[where]), dtype=float) * np.ones(len(grid.points[where]))
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        return np.full(len(grid.points[where]), float(arr))
    if len(arr) == grid.n_nodes:
        return arr[where]
    return arr


def assemble(grid: CutCellGrid, coeffs=None):
    """Shortley-Weller operator split as ``L u = M_I u_I + M_B g - D u_I``.

    Returns (D, M_I, M_B) with D the (positive) diagonal weights.
    """
    N = grid.n_interior
    n = grid.n
    a = _coeff_values(coeffs, grid.points[:N], n)
    rows, cols, vals = [], [], []
    D = np.zeros(N)
    for i in range(n):
        hm, hp = grid.arm_len[:, 2 * i], grid.arm_len[:, 2 * i + 1]
        wm = 2 * a[:, i] / (hm * (hm + hp))
        wp = 2 * a[:, i] / (hp * (hm + hp))
        D += wm + wp
        for w, col in ((wm, 2 * i), (wp, 2 * i + 1)):
            rows.append(np.arange(N))
            cols.append(grid.arm_nbr[:, col])
            vals.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    inner = cols < N
    M_I = sp.csr_matrix((vals[inner], (rows[inner], cols[inner])), shape=(N, N))
    M_B = sp.csr_matrix((vals[~inner], (rows[~inner], cols[~inner] - N)),
                        shape=(N, grid.n_nodes - N))
    return D, M_I, M_B


def apply_operator(grid, u_values, coeffs=None):
    """Shortley-Weller value of sum_i a_i d_ii u at interior nodes."""
    D, M_I, M_B = assemble(grid, coeffs)
    u = np.asarray(u_values, dtype=float)
    return M_I @ u[grid.interior] + M_B @ u[grid.boundary] - D * u[grid.interior]


def solve_linear(domain, coeffs, f, g, h, tol=1e-12, ellipticity=None, method="sor",
                 max_iter=1_000_000, grid=None) -> GridFunction:
    """Solve ``sum_i a_i(x) d_ii u = f`` with ``u = g`` on the cut-cell boundary.

    ``tol`` bounds the max-norm residual of the diagonally scaled system,
    ``|(M u + M_B g - f) / D - u|``, which is in units of u.  ``method`` is
    ``"sor"`` (red-black over-relaxation) or ``"direct"`` (sparse LU).
    """
    if grid is None:
        grid = CutCellGrid(domain, h)
    N = grid.n_interior
    a = _coeff_values(coeffs, grid.points[:N], grid.n)
    if ellipticity is not None and (np.any(a < ellipticity.lam) or np.any(a > ellipticity.Lam)):
        raise ConfigError("coefficients leave [lambda, Lambda]")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ConfigError("coefficients must be positive and finite")
    fv = _node_values(f, grid, grid.interior)
    gv = _node_values(g, grid, grid.boundary)
    if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(gv))):
        raise ValueError("f and g must be finite on the nodes")
    D, M_I, M_B = assemble(grid, coeffs)
    r = M_B @ gv - fv

    def scaled_residual(u):
        return np.max(np.abs((M_I @ u + r) / D - u)) if N else 0.0

    history = []
    if method == "direct":
        u = spla.spsolve((sp.diags(D) - M_I).tocsc(), r)
        res = scaled_residual(u)
        history.append(res)
        if res > tol:
            raise ConvergenceError(f"direct solve residual {res:.3e} exceeds tol {tol:.1e}", history)
    elif method == "sor":
        omega = 2.0 / (1.0 + math.sin(math.pi * grid.h / (2 * grid.domain.R)))
        red = grid.parity
        colors = [np.flatnonzero(red), np.flatnonzero(~red)]
        blocks = [(idx, M_I[idx], D[idx], r[idx]) for idx in colors]
        u = np.full(N, float(np.mean(gv)) if len(gv) else 0.0)
        it = 0
        while True:
            for idx, M, Dc, rc in blocks:
                u[idx] = (1 - omega) * u[idx] + omega * (M @ u + rc) / Dc
            it += 1
            if it % 10 == 0:
                res = scaled_residual(u)
                history.append(res)
                if res <= tol:
                    break
                if it >= max_iter:
                    raise ConvergenceError(f"SOR stalled at residual {res:.3e} after {it} sweeps", history)
    else:
        raise ValueError(f"unknown method {method!r}")
    values = np.empty(grid.n_nodes)
    values[:N] = u
    values[N:] = gv
    if np.all(fv <= 0) and len(gv):
        floor = np.min(gv) - 1e-9 * max(1.0, np.max(np.abs(gv)))
        if np.min(u) < floor:
            raise AssertionError("discrete maximum principle violated")
    return GridFunction(grid, values, meta={"solver": method, "residual": float(history[-1]) if history else 0.0})
