"""Norms, ratios and the per-cube estimate chain on grid functions.

Every quantity here is computed from node data with cell volume ``h**n``.
For ``delta < 1`` the "norms" are quasi-norms; nothing downstream relies on a
triangle inequality.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import beta as beta_fn

from .errors import ConfigError, CoverGapError
from .geom import GraphDomain
from .solutions import CutCellGrid, GridFunction, ManufacturedSolution, sample
from .whitney import WhitneyCover, dyadic_sum, filtered_mask, log2_slope

DELTA0_DEFAULT = 0.05
ALPHA_BAR_DEFAULT = 0.2


@dataclass(frozen=True)
class QuasiNormSpec:
    """Exponents of the estimate.

    Inadmissible combinations are allowed; ``violations`` lists them so that
    runs outside the admissible range can serve as sharpness probes.
    """

    delta: float = 0.05
    p: float = 4.0
    alpha: float = 1.0
    alpha0: float = 0.15
    delta0: float = DELTA0_DEFAULT
    alpha_bar: float = ALPHA_BAR_DEFAULT
    n: int = 2

    def __post_init__(self):
        if not 0 < self.delta <= 2:
            raise ConfigError("delta must lie in (0, 2]")
        if not 0 < self.alpha0 < 1:
            raise ConfigError("alpha0 must lie in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.p <= 0 or self.delta0 <= 0:
            raise ConfigError("p and delta0 must be positive")

    def violations(self):
        out = []
        if not self.p > self.n:
            out.append(f"p={self.p} must exceed n={self.n}")
        bound = min(self.alpha, self.alpha_bar, 1 - self.n / self.p)
        if not self.alpha0 < bound:
            out.append(f"alpha0={self.alpha0} must be below min(alpha, alpha_bar, 1 - n/p)={bound:.6g}")
        if not self.delta <= self.delta0:
            out.append(f"delta={self.delta} exceeds delta0={self.delta0}")
        if not self.delta * (1 - self.alpha0) < 1:
            out.append(f"delta*(1-alpha0)={self.delta * (1 - self.alpha0):.6g} is not below 1")
        return out

    @property
    def admissible(self):
        return not self.violations()

    @property
    def exponents(self):
        """Dyadic-sum exponents (n - (1 - alpha0) delta, n - delta n / p)."""
        return self.n - (1 - self.alpha0) * self.delta, self.n - self.delta * self.n / self.p

    def exponents_summable(self):
        """Both exponents exceed n - 1 (the summability threshold of the dyadic sums)."""
        q1, q2 = self.exponents
        return bool(q1 > self.n - 1 and q2 > self.n - 1)


# ---------------------------------------------------------------------------
# discrete derivatives

def _stencil_ok(u: GridFunction):
    grid = u.grid
    ok = grid.full_stencil.copy()
    ok &= u.valid[: grid.n_interior]
    for col in range(2 * grid.n):
        ok &= u.valid[grid.arm_nbr[:, col]]
    return ok


def discrete_hessian(u: GridFunction):
    """Central second differences at full-stencil nodes.

    Returns (H, nodes) with H of shape (len(nodes), n, n).  Nodes next to a
    cut arm are skipped.
    """
    grid = u.grid
    n, h = grid.n, grid.h
    ok = _stencil_ok(u)
    diag = {}
    for i in range(n):
        for si in (-1, 1):
            for j in range(i + 1, n):
                for sj in (-1, 1):
                    nb = grid.lattice.copy()
                    nb[:, i] += si
                    nb[:, j] += sj
                    ids = grid.node_at(nb)
                    diag[(i, si, j, sj)] = ids
                    ok &= ids >= 0
                    ok &= u.valid[np.maximum(ids, 0)]
    nodes = np.flatnonzero(ok)
    v = u.values
    c = v[nodes]
    H = np.empty((len(nodes), n, n))
    for i in range(n):
        um = v[grid.arm_nbr[nodes, 2 * i]]
        up = v[grid.arm_nbr[nodes, 2 * i + 1]]
        H[:, i, i] = (up - 2 * c + um) / h**2
        for j in range(i + 1, n):
            pp = v[diag[(i, 1, j, 1)][nodes]]
            pm = v[diag[(i, 1, j, -1)][nodes]]
            mp = v[diag[(i, -1, j, 1)][nodes]]
            mm = v[diag[(i, -1, j, -1)][nodes]]
            H[:, i, j] = H[:, j, i] = (pp - pm - mp + mm) / (4 * h**2)
    return H, nodes


def discrete_hessian_all(u: GridFunction):
    """Hessian surrogate at every interior node with valid arm data.

    Full-stencil nodes use the central stencils above.  At cut nodes the
    diagonal is the Shortley-Weller second difference over the shortened
    arms, and mixed entries are taken from the nearest full-stencil node.
    """
    grid = u.grid
    n = grid.n
    N = grid.n_interior
    H_full, full = discrete_hessian(u)
    ok = u.valid[:N].copy()
    for col in range(2 * n):
        ok &= u.valid[grid.arm_nbr[:, col]]
    ids = np.flatnonzero(ok)
    H = np.zeros((len(ids), n, n))
    pos = np.full(N, -1, dtype=np.int64)
    pos[full] = np.arange(len(full))
    p = pos[ids]
    is_full = p >= 0
    H[is_full] = H_full[p[is_full]]
    cut = ids[~is_full]
    if len(cut):
        v = u.values
        Hc = np.zeros((len(cut), n, n))
        for i in range(n):
            a, b = grid.arm_len[cut, 2 * i], grid.arm_len[cut, 2 * i + 1]
            um, up = v[grid.arm_nbr[cut, 2 * i]], v[grid.arm_nbr[cut, 2 * i + 1]]
            Hc[:, i, i] = 2.0 / (a + b) * ((up - v[cut]) / b - (v[cut] - um) / a)
        if len(full) and n > 1:
            _, j = cKDTree(grid.lattice[full]).query(grid.lattice[cut])
            off = ~np.eye(n, dtype=bool)
            Hc[:, off] = H_full[j][:, off]
        H[~is_full] = Hc
    return H, ids


def discrete_gradient(u: GridFunction, nodes=None):
    """Central first differences at the given (full-stencil) nodes."""
    grid = u.grid
    if nodes is None:
        nodes = np.flatnonzero(_stencil_ok(u))
    v = u.values
    G = np.empty((len(nodes), grid.n))
    for i in range(grid.n):
        G[:, i] = (v[grid.arm_nbr[nodes, 2 * i + 1]] - v[grid.arm_nbr[nodes, 2 * i]]) / (2 * grid.h)
    return G


def pointwise_size(field):
    """|.| of scalar, vector (Euclidean) or matrix (Frobenius) node values."""
    a = np.asarray(field, dtype=float)
    if a.ndim == 1:
        return np.abs(a)
    return np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))


def delta_mass(field, delta, cell_volume):
    """Sum of |field|^delta times the cell volume."""
    size = pointwise_size(field)
    if size.size == 0:
        raise ValueError("empty region")
    return math.fsum(size**delta * cell_volume)


def quasi_norm(field, delta, cell_volume):
    """(sum |field|^delta * cell_volume)^(1/delta); delta > 0."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return delta_mass(field, delta, cell_volume) ** (1.0 / delta)


def in_ball(points, center, r):
    return np.sum((points - np.asarray(center)) ** 2, axis=1) < r * r


# ---------------------------------------------------------------------------
# boundary data

def holder_norm_g(g: GridFunction, alpha: float, nodes=None) -> float:
    """||g||_inf + ||Dg||_inf + [Dg]_alpha of the trace in graph coordinates.

    ``nodes`` selects boundary nodes (default: all graph nodes where g is
    valid).  The tangential gradient is the finite-difference derivative of
    x' -> g(x', phi(x')).
    """
    grid = g.grid
    if nodes is None:
        nodes = grid.graph_boundary_nodes()
    nodes = np.asarray(nodes)
    nodes = nodes[g.valid[nodes]]
    if len(nodes) < 3:
        raise ValueError("need at least 3 boundary samples")
    xp = grid.points[nodes, :-1]
    val = g.values[nodes]
    if xp.shape[1] == 1:
        order = np.argsort(xp[:, 0], kind="stable")
        xs, vs = xp[order, 0], val[order]
        keep = np.concatenate([[True], np.diff(xs) > 1e-3 * grid.h])
        xs, vs = xs[keep], vs[keep]
        if len(xs) < 3:
            raise ValueError("need at least 3 distinct boundary samples")
        D = np.gradient(vs, xs, edge_order=2)[:, None]
        pts = xs[:, None]
    else:
        tree = cKDTree(xp)
        k = min(9, len(xp))
        _, nbr = tree.query(xp, k=k)
        D = np.empty_like(xp)
        for i in range(len(xp)):
            A = np.column_stack([np.ones(k), xp[nbr[i]] - xp[i]])
            coef, *_ = np.linalg.lstsq(A, val[nbr[i]], rcond=None)
            D[i] = coef[1:]
        pts, vs = xp, val
    sup = float(np.max(np.abs(vs)))
    grad = float(np.max(np.linalg.norm(D, axis=1)))
    semi = 0.0
    m = len(pts)
    step = max(1, m // 3000)
    sub = np.arange(0, m, step)
    for s in range(0, len(sub), 512):
        a = sub[s:s + 512]
        dx = np.linalg.norm(pts[a, None, :] - pts[None, sub, :], axis=-1)
        dd = np.linalg.norm(D[a, None, :] - D[None, sub, :], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dx > 0, dd / dx**alpha, 0.0)
        semi = max(semi, float(np.max(q)))
    return sup + grad + semi


@dataclass(frozen=True, eq=False)
class BoundaryFit:
    """Affine approximation ``l(x) = value + slope . (x - x0)`` near a boundary point."""

    x0: np.ndarray
    value: float
    slope: np.ndarray
    radii: np.ndarray
    per_radius: np.ndarray
    C_fit: float

    @property
    def grad_norm(self):
        return float(np.linalg.norm(self.slope))

    def __call__(self, x):
        return self.value + (np.asarray(x) - self.x0) @ self.slope


def affine_lsq(points, values, x0):
    A = np.column_stack([np.ones(len(points)), points - x0])
    if len(points) < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
        raise ValueError("degenerate affine fit region")
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return float(coef[0]), coef[1:]


def holder_boundary_fit(u: GridFunction, x0, spec: QuasiNormSpec, radii, check_range=True) -> BoundaryFit:
    """Least-squares affine fit on the smallest radius and the sup-ratio
    ``sup_{Omega_r(x0)} |u - l| / r^(1 + alpha0)`` for each radius."""
    grid = u.grid
    x0 = np.asarray(x0, dtype=float)
    radii = np.sort(np.asarray(radii, dtype=float))
    if check_range and (radii[0] < 4 * grid.h - 1e-15 or radii[-1] > grid.domain.R / 2 + 1e-15):
        raise ValueError(f"radii must lie in [4h, R/2] = [{4 * grid.h}, {grid.domain.R / 2}]")
    ok = u.valid
    pts, vals = grid.points[ok], u.values[ok]
    d2 = np.sum((pts - x0) ** 2, axis=1)
    near = d2 < radii[0] ** 2
    value, slope = affine_lsq(pts[near], vals[near], x0)
    dev = np.abs(vals - value - (pts - x0) @ slope)
    per = np.array([np.max(dev[d2 < r * r]) / r ** (1 + spec.alpha0) for r in radii])
    return BoundaryFit(x0, value, slope, radii, per, float(np.max(per)))


# ---------------------------------------------------------------------------
# combined size H and ratios

def _lp(values, p, cell):
    v = np.abs(values[np.isfinite(values)])
    return float(math.fsum(v**p * cell) ** (1.0 / p)) if len(v) else 0.0


def combined_size(u: GridFunction, f: GridFunction, g: GridFunction | None, spec: QuasiNormSpec,
                  center=None, radius=None):
    """H = ||u||_inf + ||f||_{L^p} + ||g||_{C^{1,alpha}} over Omega ∩ B_radius(center).

    ``g`` defaults to the boundary values of ``u``.
    """
    grid = u.grid
    pts = grid.points
    region = np.ones(grid.n_nodes, dtype=bool)
    if radius is not None:
        region = in_ball(pts, grid.domain.c if center is None else center, radius)
    if g is None:
        gv = np.full(grid.n_nodes, np.nan)
        gv[grid.boundary] = u.values[grid.boundary]
        g = GridFunction(grid, gv)
    uvals = u.values[region & u.valid]
    u_inf = float(np.max(np.abs(uvals))) if len(uvals) else 0.0
    interior = np.zeros(grid.n_nodes, dtype=bool)
    interior[grid.interior] = True
    fvals = f.values[region & interior & f.valid]
    f_p = _lp(fvals, spec.p, grid.h**grid.n)
    gnodes = grid.graph_boundary_nodes()
    gnodes = gnodes[region[gnodes] & g.valid[gnodes]]
    g_norm = holder_norm_g(g, spec.alpha, gnodes) if len(gnodes) >= 3 else 0.0
    return {"u_inf": u_inf, "f_Lp": f_p, "g_C1a": g_norm, "H": u_inf + f_p + g_norm}


def interior_ratio(u: GridFunction, f: GridFunction, center, r, spec: QuasiNormSpec):
    """Scale-invariant interior W^{2,delta0} ratio on B_{r/2} inside B_r.

    Returns (ratio, degenerate); degenerate is True when numerator and
    denominator both vanish, in which case ratio is 0.
    """
    grid = u.grid
    center = np.asarray(center, dtype=float)
    n = grid.n
    if r < 8 * grid.h:
        raise ValueError("ball radius must be at least 8h")
    if not (grid.domain.contains(center) and grid.domain.boundary_dist(center) >= r):
        raise ValueError("ball is not inside the domain")
    w, _, _, Hq = region_quadrature(u, center, r / 2)
    num = quasi_norm(Hq, spec.delta0, w) * r ** (2 - n / spec.delta0)
    N = grid.n_interior
    ball = in_ball(grid.points[:N], center, r)
    uv = u.values[:N][ball]
    fv = f.values[:N][ball]
    den = float(np.max(np.abs(uv))) + r * _lp(fv, n, grid.h**n)
    if den == 0:
        return (0.0, True) if num == 0 else (math.inf, False)
    return num / den, False


def region_quadrature(u: GridFunction, center, radius, exclude=(), resolution=64):
    """Midpoint quadrature of u, Du, D^2u over Omega ∩ B_radius(center) minus excluded balls.

    The region is sampled on a sub-lattice with spacing h/k, fine enough to
    put about ``resolution`` points across the ball.  Each sample takes the
    second-order Taylor expansion of u around the nearest full-stencil node,
    built from the discrete gradient and Hessian there, so quadratics are
    reproduced exactly.  Returns (weight, U, G, H).
    """
    grid = u.grid
    n, h = grid.n, grid.h
    center = np.asarray(center, dtype=float)
    H, nodes = discrete_hessian(u)
    if len(nodes) == 0:
        raise ValueError("no full-stencil nodes")
    G = discrete_gradient(u, nodes)
    k = max(1, int(math.ceil(resolution * h / (2 * radius))))
    step = h / k
    lo = np.floor((center - radius) / step).astype(np.int64)
    hi = np.ceil((center + radius) / step).astype(np.int64)
    axes = [(np.arange(a, b) + 0.5) * step for a, b in zip(lo, hi)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    keep = in_ball(X, center, radius) & grid.domain.contains(X)
    for c, r in exclude:
        keep &= ~in_ball(X, c, r)
    X = X[keep]
    if len(X) == 0:
        raise ValueError("empty region")
    _, j = cKDTree(grid.points[nodes]).query(X)
    dx = X - grid.points[nodes[j]]
    Hj = H[j]
    Gt = G[j] + np.einsum("kij,kj->ki", Hj, dx)
    Ut = u.values[nodes[j]] + np.sum(G[j] * dx, axis=1) + 0.5 * np.einsum("ki,kij,kj->k", dx, Hj, dx)
    return step**n, Ut, Gt, Hj


def w2delta_parts(u: GridFunction, delta, center, radius, exclude=()):
    """Quasi-norms of u, Du, D^2u over Omega ∩ B_radius(center) minus excluded balls."""
    w, U, G, H = region_quadrature(u, center, radius, exclude)
    return quasi_norm(U, delta, w), quasi_norm(G, delta, w), quasi_norm(H, delta, w)


def theorem_ratio(u: GridFunction, f: GridFunction, g, spec: QuasiNormSpec, inner_radius=1 / 12,
                  center=None, H=None) -> float:
    """W^{2,delta}(Omega_inner) quasi-norm of u divided by H."""
    grid = u.grid
    center = grid.domain.c if center is None else np.asarray(center, dtype=float)
    if H is None:
        H = combined_size(u, f, g, spec)["H"]
    if H == 0:
        if np.all(u.values[u.valid] == 0):
            return 0.0
        raise ValueError("H vanishes while u does not")
    return sum(w2delta_parts(u, spec.delta, center, inner_radius)) / H


# ---------------------------------------------------------------------------
# per-cube chain

@dataclass(eq=False)
class EstimateReport:
    """Per-cube and aggregate quantities of the Whitney estimate chain."""

    spec: QuasiNormSpec
    cubes: dict
    per_level: dict
    summary: dict
    verdicts: dict
    flags: list = field(default_factory=list)

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (np.floating, float)):
                v = float(v)
                return v if math.isfinite(v) else repr(v)
            if isinstance(v, np.integer):
                return int(v)
            if isinstance(v, np.bool_):
                return bool(v)
            return v

        return clean({"spec": self.spec.__dict__, "summary": self.summary, "verdicts": self.verdicts,
                      "flags": self.flags, "per_level": self.per_level, "cubes": self.cubes})

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, prefix):
        _write_table(f"{prefix}_cubes.csv", self.cubes)
        _write_table(f"{prefix}_levels.csv", self.per_level)
        with open(f"{prefix}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            for k in sorted(self.summary):
                w.writerow([k, _fmt(self.summary[k])])
            for k in sorted(self.verdicts):
                w.writerow([f"verdict.{k}", _fmt(self.verdicts[k])])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_table(path, table):
    keys = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        rows = len(table[keys[0]]) if keys else 0
        for i in range(rows):
            w.writerow([_fmt(table[k][i]) for k in keys])


def _lattice_box_nodes(grid, lo, hi):
    """Node ids at lattice points inside the closed box [lo, hi]."""
    a = np.ceil(lo / grid.h - 1e-9).astype(np.int64)
    b = np.floor(hi / grid.h + 1e-9).astype(np.int64)
    axes = [np.arange(x, y + 1) for x, y in zip(a, b)]
    lat = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.n)
    ids = grid.node_at(lat)
    return ids[ids >= 0]


def cube_chain_report(u: GridFunction, f: GridFunction, cover: WhitneyCover, spec: QuasiNormSpec,
                      g=None, quarter_radius=None, min_cells=8, fit_radius=None, H=None, min_populated=16) -> EstimateReport:
    """Run the Whitney chain: per-cube affine and Hessian bounds, then the global sum.

    Cubes with d_k < min_cells * h are skipped; their mass is bounded by their
    measure times the largest observed |D^2u|^delta and reported separately.
    """
    grid = u.grid
    n, h = grid.n, grid.h
    m = -math.log2(h)
    if abs(m - round(m)) > 1e-12:
        raise ValueError("cube chain needs a dyadic mesh width h = 2^-m")
    m = int(round(m))
    dom = cover.domain
    if quarter_radius is None:
        quarter_radius = dom.R / 4
    delta, a0, p = spec.delta, spec.alpha0, spec.p
    flags = [f"inadmissible: {v}" for v in spec.violations()]
    if H is None:
        sizes = combined_size(u, f, g, spec)
    else:
        sizes = {"H": float(H)}
    Hc = sizes["H"]
    f_Lp_total = sizes.get("f_Lp", _lp(f.values[: grid.n_interior][f.valid[: grid.n_interior]], p, h**n))

    filt = filtered_mask(cover, quarter_radius)
    diam = cover.diams
    resolved = filt & (diam >= min_cells * h) & (cover.levels <= m)
    skipped = filt & ~resolved

    Hs, hnodes = discrete_hessian(u)
    size_d = pointwise_size(Hs) ** delta
    cell = h**n
    # node -> cube assignment on half-open dyadic cells
    owner = np.full(len(hnodes), -1, dtype=np.int64)
    lat = grid.lattice[hnodes]
    for s in range(min(cover.s_max, m) + 1):
        if not np.any(resolved & (cover.levels == s)):
            continue
        k = cover.find(s, np.right_shift(lat, m - s))
        hit = (k >= 0) & (owner < 0)
        hit[hit] &= resolved[k[hit]]
        owner[hit] = k[hit]
    ids = np.flatnonzero(resolved)
    mass = np.zeros(len(cover))
    np.add.at(mass, owner[owner >= 0], size_d[owner >= 0] * cell)

    # boundary samples for y_k
    bnodes = grid.graph_boundary_nodes()
    bpts = grid.points[bnodes]
    near_half = in_ball(bpts, dom.c, dom.R / 2)
    bnodes, bpts = bnodes[near_half], bpts[near_half]
    if len(bnodes) == 0:
        raise ValueError("no boundary samples in (∂Omega)_{R/2}")
    tree = cKDTree(bpts)
    rho = 4 * h if fit_radius is None else fit_radius
    fits = {}
    vpts, vvals = grid.points[u.valid], u.values[u.valid]
    vtree = cKDTree(vpts)

    rec = {k: [] for k in ("cube", "level", "c", "d_k", "y_k", "aff_sup", "C_aff", "mass", "f_Lp_dilated",
                           "bound_hess", "C_hess")}
    lo_all, hi_all = cover.lo, cover.hi
    for k in ids:
        side = cover.sides[k]
        lo, hi = lo_all[k] - 0.1 * side, hi_all[k] + 0.1 * side
        dk = diam[k]
        centre = 0.5 * (lo + hi)
        # nearest boundary sample to the cube: search around the centre
        cand = tree.query_ball_point(centre, r=dk / 2 + cover.dists[k] * 1.5 + 4 * h)
        if not cand:
            _, j = tree.query(centre)
            cand = [j]
        cand = np.asarray(cand)
        gap = np.maximum(np.maximum(lo_all[k] - bpts[cand], 0.0), bpts[cand] - hi_all[k])
        j = int(cand[np.argmin(np.sum(gap**2, axis=1))])
        if j not in fits:
            near = vtree.query_ball_point(bpts[j], rho * (1 - 1e-12))
            fits[j] = affine_lsq(vpts[near], vvals[near], bpts[j])
        value, slope = fits[j]
        box = _lattice_box_nodes(grid, lo, hi)
        box = box[u.valid[box]]
        dev = float(np.max(np.abs(u.values[box] - value - (grid.points[box] - bpts[j]) @ slope))) if len(box) else 0.0
        fbox = box[(box < grid.n_interior) & f.valid[box]]
        f_loc = _lp(f.values[fbox], p, cell)
        bound = dk ** (n - (1 - a0) * delta) * Hc**delta + dk ** (n - delta * n / p) * f_loc**delta
        rec["cube"].append(int(k))
        rec["level"].append(int(cover.levels[k]))
        rec["c"].append(" ".join(str(int(v)) for v in cover.corners[k]))
        rec["d_k"].append(dk)
        rec["y_k"].append(int(bnodes[j]))
        rec["aff_sup"].append(dev)
        rec["C_aff"].append(dev / (dk ** (1 + a0) * Hc) if Hc > 0 else math.nan)
        rec["mass"].append(mass[k])
        rec["f_Lp_dilated"].append(f_loc)
        rec["bound_hess"].append(bound)
        rec["C_hess"].append(mass[k] / bound if bound > 0 else math.nan)
    cubes = {k: np.asarray(v) for k, v in rec.items()}

    # additivity: union mass computed directly from the owned nodes
    union_mass = math.fsum(size_d[owner >= 0] * cell)
    total_mass = math.fsum(cubes["mass"]) if len(ids) else 0.0

    q1, q2 = spec.exponents
    S1_full, S1_lvl = dyadic_sum(cover, q1, quarter_radius)
    S2_full, S2_lvl = dyadic_sum(cover, q2, quarter_radius)
    S1_res = math.fsum(diam[ids] ** q1)
    S2_res = math.fsum(diam[ids] ** q2)
    rhs_res = Hc**delta * S1_res + f_Lp_total**delta * S2_res
    rhs_full = Hc**delta * S1_full + f_Lp_total**delta * S2_full

    levels = list(range(cover.s_max + 1))
    lvl_mass = [math.fsum(mass[ids][cover.levels[ids] == s]) for s in levels]
    lvl_count = [int(np.sum(cover.levels[ids] == s)) for s in levels]
    per_level = {"s": levels, "resolved_cubes": lvl_count, "mass": lvl_mass,
                 "dyadic_sum_q1": S1_lvl, "dyadic_sum_q2": S2_lvl}

    # levels with few cubes sit where the quarter-radius filter clips the layer
    populated = [s for s in levels if lvl_count[s] >= min_populated and lvl_mass[s] > 0]
    tail = populated[-4:]
    mass_slope = log2_slope([lvl_mass[s] for s in tail], tail) if len(tail) >= 3 else math.nan
    size_max = float(np.max(size_d)) if len(size_d) else 0.0
    skipped_measure = float(np.sum(cover.sides[skipped] ** n))
    summary = {
        "H": Hc, "u_inf": sizes.get("u_inf", math.nan), "f_Lp": f_Lp_total, "g_C1a": sizes.get("g_C1a", math.nan),
        "h": h, "s_max": cover.s_max, "quarter_radius": quarter_radius,
        "resolved_cubes": int(len(ids)), "skipped_cubes": int(skipped.sum()),
        "skipped_measure": skipped_measure, "skipped_mass_bound": skipped_measure * size_max,
        "total_mass": total_mass, "union_mass": union_mass,
        "max_C_aff": float(np.nanmax(cubes["C_aff"])) if len(ids) else math.nan,
        "max_C_hess": float(np.nanmax(cubes["C_hess"])) if len(ids) else math.nan,
        "rhs_resolved": rhs_res, "rhs_full": rhs_full,
        "global_ratio": total_mass / rhs_res if rhs_res > 0 else math.nan,
        "q1": q1, "q2": q2, "mass_level_slope": mass_slope,
    }
    # None: too few populated levels to decide
    diverging = None if not np.isfinite(mass_slope) else bool(mass_slope >= 0)
    finite = all(np.isfinite(summary[k]) for k in ("max_C_aff", "max_C_hess", "global_ratio"))
    verdicts = {"finite": finite, "diverging": diverging, "exponents_summable": spec.exponents_summable(),
                "admissible": spec.admissible}
    if diverging:
        flags.append("per-level Hessian masses do not decay: divergence")
    return EstimateReport(spec, cubes, per_level, summary, verdicts, flags)


# ---------------------------------------------------------------------------
# global patching

@dataclass(frozen=True)
class Chart:
    """Boundary chart ``Omega_r(x_i)`` centred at a graph point."""

    center: tuple
    r: float

    @classmethod
    def at(cls, domain: GraphDomain, xp, r):
        xp = np.atleast_1d(np.asarray(xp, dtype=float))
        return cls(tuple(xp) + (float(domain.graph.phi(xp)),), float(r))


@dataclass(frozen=True, eq=False)
class PatchResult:
    local: list
    interior: float
    value: float
    covered_samples: int


def chart_gaps(domain: GraphDomain, charts, T, samples=10_000, scale=1 / 12):
    """Boundary samples of T = {(x', phi(x')) : T[0] <= x' <= T[1]} outside every B_{r_i*scale}(x_i)."""
    lo, hi = np.atleast_1d(T[0]).astype(float), np.atleast_1d(T[1]).astype(float)
    d = len(lo)
    if d == 1:
        xp = np.linspace(lo[0], hi[0], samples)[:, None]
    else:
        m = int(math.ceil(samples ** (1 / d)))
        axes = [np.linspace(a, b, m) for a, b in zip(lo, hi)]
        xp = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    pts = np.concatenate([xp, domain.graph.phi(xp)[:, None]], axis=1)
    covered = np.zeros(len(pts), dtype=bool)
    for ch in charts:
        covered |= in_ball(pts, ch.center, ch.r * scale)
    return pts[~covered], len(pts)


def global_patch(charts, u: GridFunction, f: GridFunction, spec: QuasiNormSpec, T, omega_prime,
                 g=None, samples=10_000) -> PatchResult:
    """Combine local boundary ratios on Omega_{r_i/12}(x_i) with the interior
    ratio on Omega' minus the half-size chart balls.

    ``omega_prime`` is a (center, radius) ball; Omega' is its intersection
    with the domain.
    """
    grid = u.grid
    dom = grid.domain
    gaps, total = chart_gaps(dom, charts, T, samples)
    if len(gaps):
        raise CoverGapError(f"{len(gaps)} of {total} boundary samples of T are uncovered", gaps)
    local = []
    for ch in charts:
        H = combined_size(u, f, g, spec, center=ch.center, radius=ch.r)["H"]
        local.append(theorem_ratio(u, f, g, spec, inner_radius=ch.r / 12, center=ch.center, H=H))
    # interior part: Omega' away from the chart balls B_{r_i/24}
    c_prime, r_prime = omega_prime
    excl = [(np.asarray(ch.center), ch.r / 24) for ch in charts]
    H = combined_size(u, f, g, spec)["H"]
    try:
        parts = w2delta_parts(u, spec.delta, c_prime, r_prime, exclude=excl)
        interior = sum(parts) / H if H > 0 else 0.0
    except ValueError:
        interior = 0.0  # Omega' lies inside the chart balls
    return PatchResult(local, interior, max(local + [interior]), total)


# ---------------------------------------------------------------------------
# integrability threshold for the power barrier

def barrier_integral(alpha0, delta, radius):
    """Closed form of the integral of |D^2 x_n^(1+a)|^delta over the half disc of given radius."""
    b = (alpha0 - 1) * delta
    if b <= -1:
        return math.inf
    return (alpha0 * (1 + alpha0)) ** delta * radius ** (b + 2) * beta_fn((b + 1) / 2, 1.5)


def barrier_masses(alpha0s, deltas, levels, inner_radius=1 / 12, R=0.25):
    """Discrete Hessian delta-masses of x_n^(1+a) over Omega_inner on flat grids h = 2^-level.

    Returns an array of shape (len(alpha0s), len(deltas), len(levels)).
    """
    dom = GraphDomain(R=R)
    out = np.empty((len(alpha0s), len(deltas), len(levels)))
    for li, lev in enumerate(levels):
        grid = CutCellGrid(dom, 2.0**-lev)
        for ai, a0 in enumerate(alpha0s):
            u, _, _ = sample(ManufacturedSolution("power-barrier", alpha0=a0), grid)
            H, nodes = discrete_hessian(u)
            sel = in_ball(grid.points[nodes], dom.c, inner_radius)
            size = pointwise_size(H[sel])
            cell = grid.h**2
            for di, d in enumerate(deltas):
                out[ai, di, li] = math.fsum(size**d * cell)
    return out


def refinement_verdict(masses, delta, rate=None):
    """Decide refinement stability of a mass sequence on successive halvings.

    Stable when the increments shrink (negative log2 slope against the level).
    The limit is then extrapolated geometrically: with ``rate`` the error is
    modelled as c * h^rate (Richardson on the last two levels), otherwise the
    fitted slope supplies the ratio.  Returns (stable, slope, quasi-norm).
    """
    m = np.asarray(masses, dtype=float)
    inc = np.abs(np.diff(m))
    slope = log2_slope(inc, np.arange(len(inc)))
    stable = bool(np.isfinite(slope) and slope < 0)
    if not stable:
        return False, slope, math.inf
    rho = 2.0 ** (-rate) if rate is not None else 2.0**slope
    limit = m[-1] + (m[-1] - m[-2]) * rho / (1 - rho)
    return True, slope, float(limit ** (1 / delta))


def threshold_table(alpha0s, deltas, levels=(7, 8, 9, 10, 11), inner_radius=1 / 12, R=0.25):
    """Stability verdicts and extrapolated quasi-norms of D^2 x_n^(1+a) on the (alpha0, delta) grid.

    The extrapolation uses the boundary-layer rate 1 - delta (1 - alpha0): the
    first grid rows above the flat boundary carry mass of order h^rate.
    """
    M = barrier_masses(alpha0s, deltas, levels, inner_radius, R)
    rows = []
    for ai, a in enumerate(alpha0s):
        for di, d in enumerate(deltas):
            rate = 1 - d * (1 - a)
            stable, slope, value = refinement_verdict(M[ai, di], d, rate if rate > 0 else None)
            exact = barrier_integral(a, d, inner_radius)
            exact_qn = exact ** (1 / d) if math.isfinite(exact) else math.inf
            rows.append({"alpha0": a, "delta": d, "predicted_stable": rate > 0, "stable": stable,
                         "slope": slope, "value": value, "closed_form": exact_qn,
                         "rel_err": abs(value / exact_qn - 1) if stable and math.isfinite(exact_qn) else math.nan,
                         "masses": M[ai, di].tolist()})
    return rows
