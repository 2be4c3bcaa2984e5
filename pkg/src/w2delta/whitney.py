"""Whitney decompositions of graph domains with exact dyadic bookkeeping.

Cubes are stored as integer lattice data ``(level, corner)``; the cube is
``prod_i [c_i 2^-level, (c_i + 1) 2^-level]``.  Disjointness, ancestry and
diameters are decided with integer arithmetic only.  Distances to the
boundary are floating point (exact formula on flat domains, zoom search on
curved ones).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError
from .geom import GraphDomain, zoom_min

DILATION = Fraction(6, 5)
S_MAX_RANGE = (2, 24)
_CHUNK = 4096


@dataclass(frozen=True)
class DyadicCube:
    level: int
    corner: tuple

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("level must be >= 0")
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))

    @property
    def side(self):
        return Fraction(1, 2**self.level)

    @property
    def diam(self):
        return float(self.side) * math.sqrt(len(self.corner))

    @property
    def bounds(self):
        s = self.side
        return tuple(c * s for c in self.corner), tuple((c + 1) * s for c in self.corner)

    def contains_cube(self, other):
        """True if ``other`` lies inside this cube (integer test)."""
        if other.level < self.level:
            return False
        k = other.level - self.level
        return all((c >> k) == p for c, p in zip(other.corner, self.corner))

    def interiors_overlap(self, other):
        return self.contains_cube(other) or other.contains_cube(self)

    def dilate(self, factor=DILATION):
        return DilatedCube(self, Fraction(factor))


@dataclass(frozen=True)
class DilatedCube:
    base: DyadicCube
    factor: Fraction = DILATION

    @property
    def bounds(self):
        lo, hi = self.base.bounds
        pad = (self.factor - 1) / 2 * self.base.side
        return tuple(v - pad for v in lo), tuple(v + pad for v in hi)

    @property
    def side(self):
        return self.factor * self.base.side

    def contains(self, x):
        lo, hi = self.bounds
        return all(float(a) <= xi <= float(b) for a, b, xi in zip(lo, hi, x))


def _box_dist_graph(domain, lo, hi):
    """Distance from boxes lying above the graph to the graph surface."""
    g = domain.graph
    if g.profile == "flat":
        return lo[:, -1].copy()
    cp = 0.5 * (lo[:, :-1] + hi[:, :-1])
    half = 0.5 * (hi[:, 0] - lo[:, 0])
    upper = lo[:, -1] - g.phi(cp)
    out = np.empty(len(lo))
    for s in range(0, len(lo), _CHUNK):
        l, h = lo[s:s + _CHUNK], hi[s:s + _CHUNK]

        def obj(Y, l=l, h=h):
            P = np.concatenate([Y, g.phi(Y)[..., None]], axis=-1)
            gap = np.maximum(np.maximum(l[:, None] - P, 0.0), P - h[:, None])
            return np.sum(gap**2, axis=-1)

        val, _ = zoom_min(obj, cp[s:s + _CHUNK], half[s:s + _CHUNK] + upper[s:s + _CHUNK],
                          tol=1e-12 * domain.R)
        out[s:s + _CHUNK] = np.sqrt(val)
    return out


def _classify(domain, level, corners, pad=0.0):
    """Box geometry for cubes at one level, optionally dilated by ``pad`` sides.

    Returns (lo, hi, inside, outside) where ``inside`` means the closed box lies
    in the open domain and ``outside`` means it misses the domain.
    """
    side = 2.0 ** -level
    lo = corners * side - pad * side
    hi = (corners + 1) * side + pad * side
    c = domain.c
    far = np.linalg.norm(np.maximum(np.abs(lo - c), np.abs(hi - c)), axis=1)
    near = np.linalg.norm(np.clip(c, lo, hi) - c, axis=1)
    pmin, pmax = domain.graph.phi_range(lo[:, :-1], hi[:, :-1])
    inside = (far < domain.R) & (lo[:, -1] > pmax)
    outside = (near >= domain.R) | (hi[:, -1] <= pmin)
    return lo, hi, inside, outside


def cube_dist(domain, level, corners):
    """dist(Q, ∂Omega) for cubes of one level that lie inside the domain."""
    corners = np.atleast_2d(np.asarray(corners, dtype=np.int64))
    lo, hi, inside, _ = _classify(domain, level, corners)
    if not np.all(inside):
        raise ValueError("cube_dist requires cubes inside the domain")
    far = np.linalg.norm(np.maximum(np.abs(lo - domain.c), np.abs(hi - domain.c)), axis=1)
    return np.minimum(domain.R - far, _box_dist_graph(domain, lo, hi))


class _LevelIndex:
    """Sorted integer keys of the cubes at one level for vectorized lookup."""

    def __init__(self, corners, level, bound):
        self.level = level
        self.off = (2**level) * bound + 2
        self.width = 2 * self.off + 2
        n = corners.shape[1] if corners.ndim == 2 else 0
        if n and self.width**n >= 2**62:
            raise ConfigError("cube keys overflow 64 bits; lower s_max for n = 3")
        self.pow = self.width ** np.arange(n, dtype=np.int64) if n else None
        keys = self.encode(corners) if len(corners) else np.empty(0, dtype=np.int64)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def encode(self, corners):
        return ((corners + self.off) * self.pow).sum(axis=-1)

    def find(self, corners):
        """Index into the original cube list, or -1."""
        if len(self.keys) == 0:
            return np.full(corners.shape[:-1], -1, dtype=np.int64)
        k = self.encode(corners)
        pos = np.clip(np.searchsorted(self.keys, k), 0, len(self.keys) - 1)
        hit = self.keys[pos] == k
        return np.where(hit, self.order[pos], -1)


@dataclass(frozen=True, eq=False)
class WhitneyCover:
    """Truncated Whitney family of a domain (immutable)."""

    domain: GraphDomain
    s_max: int
    levels: np.ndarray
    corners: np.ndarray
    dists: np.ndarray
    residual_measure: float

    def __len__(self):
        return len(self.levels)

    def cube(self, k):
        return DyadicCube(int(self.levels[k]), tuple(self.corners[k]))

    @property
    def n(self):
        return self.domain.dim

    @property
    def sides(self):
        return 2.0 ** -self.levels.astype(float)

    @property
    def diams(self):
        return math.sqrt(self.n) * self.sides

    @property
    def lo(self):
        return self.corners * self.sides[:, None]

    @property
    def hi(self):
        return (self.corners + 1) * self.sides[:, None]

    @cached_property
    def _bound(self):
        return int(math.ceil(np.max(np.abs(self.domain.c)) + self.domain.R)) + 1

    @cached_property
    def _index(self):
        out = {}
        for s in range(self.s_max + 1):
            sel = np.flatnonzero(self.levels == s)
            idx = _LevelIndex(self.corners[sel], s, self._bound)
            out[s] = (sel, idx)
        return out

    def find(self, level, corners):
        """Cover indices of cubes with the given level and corners (-1 if absent)."""
        sel, idx = self._index[level]
        j = idx.find(np.asarray(corners, dtype=np.int64))
        if len(sel) == 0:
            return j
        return np.where(j >= 0, sel[np.maximum(j, 0)], -1)

    def locate(self, points):
        """Index of the cube containing each point (half-open cells), or -1."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(x), -1, dtype=np.int64)
        for s in range(self.s_max + 1):
            if not np.any(self.levels == s):
                continue
            base = np.floor(x * 2.0**s).astype(np.int64)
            k = self.find(s, base)
            out = np.where((out < 0) & (k >= 0), k, out)
        return out


def decompose(domain: GraphDomain, s_max: int) -> WhitneyCover:
    """Top-down Whitney selection with acceptance window diam <= dist <= 4 diam.

    A cube is kept when it lies inside the domain and its distance to the
    boundary falls in the window; cubes that are too close are subdivided.
    Subdividing only rejected cubes makes every kept cube maximal.  Cubes still
    unresolved at ``s_max`` contribute their measure to ``residual_measure``.
    """
    if not isinstance(s_max, (int, np.integer)) or not S_MAX_RANGE[0] <= s_max <= S_MAX_RANGE[1]:
        raise ConfigError(f"s_max must be an integer in {S_MAX_RANGE}, got {s_max!r}")
    n = domain.dim
    c = domain.c
    lo_c = np.floor(c - domain.R).astype(np.int64)
    hi_c = np.ceil(c + domain.R).astype(np.int64)
    axes = [np.arange(a, b) for a, b in zip(lo_c, hi_c)]
    cand = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)

    kept_levels, kept_corners, kept_dists = [], [], []
    residual = 0.0
    any_inside = False
    children = np.array(np.meshgrid(*([[0, 1]] * n), indexing="ij")).reshape(n, -1).T
    for s in range(s_max + 1):
        if len(cand) == 0:
            break
        diam = math.sqrt(n) * 2.0**-s
        lo, hi, inside, outside = _classify(domain, s, cand)
        any_inside |= bool(np.any(~outside))
        far = np.linalg.norm(np.maximum(np.abs(lo - c), np.abs(hi - c)), axis=1)
        sphere = domain.R - far
        # cheap upper bound: vertical gap under the bottom-face centre
        upper = lo[:, -1] - domain.graph.phi(0.5 * (lo[:, :-1] + hi[:, :-1]))
        decided_close = inside & (np.minimum(sphere, upper) < diam)
        need = inside & ~decided_close
        dist = np.full(len(cand), np.nan)
        if np.any(need):
            dist[need] = np.minimum(sphere[need], _box_dist_graph(domain, lo[need], hi[need]))
        keep = need & (dist >= diam) & (dist <= 4 * diam)
        split = ~outside & ~keep
        kept_levels.append(np.full(int(keep.sum()), s, dtype=np.int64))
        kept_corners.append(cand[keep])
        kept_dists.append(dist[keep])
        if s == s_max:
            residual += float(split.sum()) * 2.0 ** (-s * n)
            break
        parents = cand[split]
        cand = (2 * parents[:, None, :] + children[None]).reshape(-1, n)
    if not any_inside:
        raise ValueError("domain has empty interior at the resolved depth")
    levels = np.concatenate(kept_levels) if kept_levels else np.empty(0, np.int64)
    corners = np.concatenate(kept_corners) if kept_corners else np.empty((0, n), np.int64)
    dists = np.concatenate(kept_dists) if kept_dists else np.empty(0)
    return WhitneyCover(domain, int(s_max), levels, corners, dists, residual)


def overlap_count(cover: WhitneyCover, points) -> np.ndarray:
    """Number of 6/5-dilated cubes containing each point."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    n = cover.n
    offsets = np.array(np.meshgrid(*([[-1, 0, 1]] * n), indexing="ij")).reshape(n, -1).T
    count = np.zeros(len(x), dtype=np.int64)
    for s in range(cover.s_max + 1):
        if not np.any(cover.levels == s):
            continue
        side = 2.0**-s
        base = np.floor(x * 2.0**s).astype(np.int64)
        for off in offsets:
            corner = base + off
            k = cover.find(s, corner)
            lo = (corner - 0.1) * side
            hi = (corner + 1.1) * side
            within = np.all((x >= lo) & (x <= hi), axis=1)
            count += (k >= 0) & within
    return count


def filtered_mask(cover: WhitneyCover, quarter_radius: float) -> np.ndarray:
    """Cubes whose 6/5-dilation lies in Omega ∩ B_quarter(center)."""
    mask = np.zeros(len(cover), dtype=bool)
    sub = GraphDomain(cover.domain.graph, R=min(quarter_radius, cover.domain.R),
                      dim=cover.n, center=cover.domain.center)
    for s in range(cover.s_max + 1):
        sel = np.flatnonzero(cover.levels == s)
        if len(sel):
            _, _, inside, _ = _classify(sub, s, cover.corners[sel], pad=0.1)
            mask[sel] = inside
    return mask


@dataclass(frozen=True, eq=False)
class LayerSet:
    """Filtered cubes of one dyadic level ``s`` (side 2^-s)."""

    s: int
    n: int
    indices: np.ndarray
    corners: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def diam(self):
        return math.sqrt(self.n) * 2.0**-self.s


def layers(cover: WhitneyCover, quarter_radius: float = 0.25) -> list[LayerSet]:
    """Partition the filtered family by level, one LayerSet per level 0..s_max."""
    mask = filtered_mask(cover, quarter_radius)
    out = []
    for s in range(cover.s_max + 1):
        sel = np.flatnonzero(mask & (cover.levels == s))
        out.append(LayerSet(s, cover.n, sel, cover.corners[sel]))
    return out


def layer_measure_exact(layer: LayerSet) -> Fraction:
    return Fraction(len(layer), 2 ** (layer.s * layer.n))


def layer_measure(layer: LayerSet) -> float:
    """Total volume of a layer."""
    return float(layer_measure_exact(layer))


def dyadic_sum(cover: WhitneyCover, q: float, quarter_radius: float = 0.25):
    """Sum of d_k^q over the filtered family, with per-level partial sums."""
    if q <= 0:
        raise ValueError("q must be positive")
    per_level = [len(L) * L.diam**q for L in layers(cover, quarter_radius)]
    return math.fsum(per_level), per_level


def log2_slope(values, levels):
    """Least-squares slope of log2(values) against levels (zeros dropped)."""
    v = np.asarray(values, dtype=float)
    s = np.asarray(levels, dtype=float)
    ok = v > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(s[ok], np.log2(v[ok]), 1)[0])


def sample_domain(domain, count, seed=0, radius=None, min_dist=0.0, qmc_points=True):
    """Points of ``Omega ∩ B_radius(center)`` with boundary distance above ``min_dist``."""
    radius = domain.R if radius is None else radius
    c = domain.c
    n = domain.dim
    if qmc_points:
        eng = qmc.Sobol(d=n, scramble=True, seed=seed)
    else:
        rng = np.random.default_rng(seed)
    got = []
    total = 0
    for _ in range(200):
        m = max(2 * count, 1024)
        u = eng.random(1 << int(math.ceil(math.log2(m)))) if qmc_points else rng.random((m, n))
        x = c + radius * (2 * u - 1)
        ok = domain.contains(x) & (np.linalg.norm(x - c, axis=1) < radius)
        x = x[ok]
        if min_dist > 0 and len(x):
            x = x[domain.boundary_dist(x) > min_dist]
        got.append(x)
        total += len(x)
        if total >= count:
            break
    pts = np.concatenate(got) if got else np.empty((0, n))
    if len(pts) < count:
        raise ValueError("could not draw enough sample points from the domain")
    return pts[:count]


def cover_inclusion_failures(cover, inner_radius=1 / 12, quarter_radius=0.25, samples=10_000, seed=0):
    """Sample points of Omega_inner (away from the truncation band) not in the filtered family."""
    if inner_radius > quarter_radius / 3 + 1e-15:
        raise ValueError("inner_radius must not exceed quarter_radius / 3")
    pts = sample_domain(cover.domain, samples, seed=seed, radius=inner_radius,
                        min_dist=2.0 ** (-cover.s_max + 3))
    mask = filtered_mask(cover, quarter_radius)
    k = cover.locate(pts)
    ok = (k >= 0) & mask[np.maximum(k, 0)]
    return pts[~ok]


def verify_cover_inclusion(cover, inner_radius=1 / 12, quarter_radius=0.25, samples=10_000, seed=0) -> bool:
    return len(cover_inclusion_failures(cover, inner_radius, quarter_radius, samples, seed)) == 0


def audit_cover(cover: WhitneyCover, tol=1e-8) -> dict:
    """Check disjointness, maximality and the distance window on every cube."""
    n = cover.n
    # disjointness: no duplicates and no kept proper ancestor
    overlaps = 0
    for s in range(cover.s_max + 1):
        sel = np.flatnonzero(cover.levels == s)
        if len(sel) == 0:
            continue
        corners = cover.corners[sel]
        same = cover.find(s, corners)
        overlaps += int(np.sum(same != sel))
        for t in range(s):
            anc = np.right_shift(corners, s - t)
            overlaps += int(np.sum(cover.find(t, anc) >= 0))
    # distance window recomputed from scratch
    window_fail = 0
    max_violation = 0.0
    non_maximal = 0
    for s in range(cover.s_max + 1):
        sel = np.flatnonzero(cover.levels == s)
        if len(sel) == 0:
            continue
        diam = math.sqrt(n) * 2.0**-s
        d = cube_dist(cover.domain, s, cover.corners[sel])
        viol = np.maximum(diam - d, d - 4 * diam)
        max_violation = max(max_violation, float(np.max(viol)))
        window_fail += int(np.sum(viol > tol * cover.domain.R))
        if s == 0:
            continue
        parents = np.unique(np.right_shift(cover.corners[sel], 1), axis=0)
        _, _, inside, _ = _classify(cover.domain, s - 1, parents)
        pdiam = 2 * diam
        pd = np.full(len(parents), -np.inf)
        if np.any(inside):
            pd[inside] = cube_dist(cover.domain, s - 1, parents[inside])
        admissible = inside & (pd >= pdiam) & (pd <= 4 * pdiam)
        non_maximal += int(admissible.sum())
    return {
        "cubes": len(cover),
        "overlapping_pairs": overlaps,
        "disjoint": overlaps == 0,
        "non_maximal": non_maximal,
        "maximal": non_maximal == 0,
        "window_failures": window_fail,
        "max_window_violation": max_violation,
        "property_iii": window_fail == 0,
        "residual_measure": cover.residual_measure,
    }


def export_cover_csv(cover: WhitneyCover, path, quarter_radius=0.25):
    """One row per cube plus a JSON sidecar holding the domain and truncation."""
    mask = filtered_mask(cover, quarter_radius)
    n = cover.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level"] + [f"c{i}" for i in range(n)] + ["dist", "diam_lo", "diam_hi", "layer"])
        diams = cover.diams
        for k in range(len(cover)):
            w.writerow([int(cover.levels[k])] + [int(v) for v in cover.corners[k]]
                       + [repr(float(cover.dists[k])), repr(float(diams[k])), repr(float(4 * diams[k])),
                          int(cover.levels[k]) if mask[k] else -1])
    with open(str(path) + ".json", "w") as fh:
        json.dump({"domain": cover.domain.to_dict(), "s_max": cover.s_max,
                   "residual_measure": cover.residual_measure}, fh, indent=2, sort_keys=True)


def import_cover_csv(path) -> WhitneyCover:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    domain = GraphDomain.from_dict(meta["domain"])
    n = domain.dim
    levels, corners, dists = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            levels.append(int(row["level"]))
            corners.append([int(row[f"c{i}"]) for i in range(n)])
            dists.append(float(row["dist"]))
    return WhitneyCover(domain, int(meta["s_max"]), np.array(levels, dtype=np.int64),
                        np.array(corners, dtype=np.int64).reshape(-1, n), np.array(dists),
                        float(meta["residual_measure"]))
