"""C^{1,alpha} graph domains.

A domain is ``{x_n > phi(x')} ∩ B_R(center)`` where ``phi`` is one of a few
closed-form profiles whose Lipschitz and gradient-Holder constants are known
exactly.  Everything here is vectorized over leading axes of point arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError

PROFILES = ("flat", "power-cusp", "sinusoid")

# relative tolerance for the zoom minimizer, in units of the domain radius
_DIST_RTOL = 1e-12
_CHUNK = 4096


@dataclass(frozen=True)
class HolderGraph:
    """Closed-form profile ``phi`` of a boundary graph.

    ``flat``: phi = 0.
    ``power-cusp``: phi = amplitude * |x'|^(1 + alpha).
    ``sinusoid``: phi = amplitude * sum_i sin(frequency * x'_i).

    ``extent`` is the radius of the parameter ball on which the constant ``K``
    is certified.  If ``K`` is omitted it is computed from the closed form.
    """

    profile: str = "flat"
    amplitude: float = 1.0
    frequency: float = 4.0
    alpha: float = 1.0
    extent: float = 1.0
    K: float | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.extent <= 0:
            raise ConfigError("extent must be positive")
        bound = self.certified_K(dim=3)
        if self.K is None:
            object.__setattr__(self, "K", bound)
        elif self.K < bound - 1e-12:
            raise ConfigError(f"declared K={self.K} is below the certified bound {bound}")

    def certified_K(self, dim=3):
        """Smallest K this module can certify for both Holder invariants on B'_extent."""
        a, w, al, r = abs(self.amplitude), self.frequency, self.alpha, self.extent
        if self.profile == "flat":
            return 0.0
        if self.profile == "power-cusp":
            lip = a * (1 + al) * r**al
            # v -> |v|^(al-1) v is al-Holder with constant 2^(1-al)
            hol = a * (1 + al) * 2 ** (1 - al)
            return max(lip, hol)
        lip = a * w * math.sqrt(max(dim - 1, 1))
        hol = a * w * w * (2 * r) ** (1 - al) * math.sqrt(max(dim - 1, 1))
        return max(lip, hol)

    def phi(self, xp):
        """Evaluate phi at parameter points ``xp`` of shape (..., n-1)."""
        xp = np.asarray(xp, dtype=float)
        if self.profile == "flat":
            return np.zeros(xp.shape[:-1])
        if self.profile == "power-cusp":
            r = np.linalg.norm(xp, axis=-1)
            return self.amplitude * r ** (1 + self.alpha)
        return self.amplitude * np.sin(self.frequency * xp).sum(axis=-1)

    def grad(self, xp):
        """Gradient of phi, shape (..., n-1)."""
        xp = np.asarray(xp, dtype=float)
        if self.profile == "flat":
            return np.zeros_like(xp)
        if self.profile == "power-cusp":
            r = np.linalg.norm(xp, axis=-1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                g = self.amplitude * (1 + self.alpha) * r ** (self.alpha - 1) * xp
            return np.where(r > 0, g, 0.0)
        return self.amplitude * self.frequency * np.cos(self.frequency * xp)

    def phi_range(self, lo, hi):
        """Exact (min, max) of phi over the boxes ``[lo, hi]`` in parameter space."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if self.profile == "flat":
            z = np.zeros(lo.shape[:-1])
            return z, z.copy()
        if self.profile == "power-cusp":
            near = np.linalg.norm(np.clip(0.0, lo, hi), axis=-1)
            far = np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi)), axis=-1)
            e = 1 + self.alpha
            lo_v, hi_v = self.amplitude * near**e, self.amplitude * far**e
            return np.minimum(lo_v, hi_v), np.maximum(lo_v, hi_v)
        w = self.frequency
        a, b = w * lo, w * hi
        smin = np.minimum(np.sin(a), np.sin(b))
        smax = np.maximum(np.sin(a), np.sin(b))
        # a crest pi/2 + 2 pi k or trough -pi/2 + 2 pi k inside [a, b]
        crest = np.floor((b - np.pi / 2) / (2 * np.pi)) >= np.ceil((a - np.pi / 2) / (2 * np.pi))
        trough = np.floor((b + np.pi / 2) / (2 * np.pi)) >= np.ceil((a + np.pi / 2) / (2 * np.pi))
        smax = np.where(crest, 1.0, smax).sum(axis=-1)
        smin = np.where(trough, -1.0, smin).sum(axis=-1)
        if self.amplitude >= 0:
            return self.amplitude * smin, self.amplitude * smax
        return self.amplitude * smax, self.amplitude * smin


@dataclass(frozen=True)
class GraphDomain:
    """``Omega_R(center) = {x_n > phi(x')} ∩ B_R(center)``."""

    graph: HolderGraph = field(default_factory=HolderGraph)
    R: float = 1.0
    dim: int = 2
    center: tuple = ()

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ConfigError(f"dimension must be 2 or 3, got {self.dim}")
        if not 0 < self.R <= 4:
            raise ConfigError(f"R must lie in (0, 4], got {self.R}")
        c = tuple(float(v) for v in self.center) or (0.0,) * self.dim
        if len(c) != self.dim:
            raise ConfigError("center has wrong dimension")
        object.__setattr__(self, "center", c)

    @property
    def c(self):
        return np.asarray(self.center)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} does not match domain dimension {self.dim}")
        return x

    def height(self, x):
        """Signed vertical gap ``x_n - phi(x')``."""
        x = self._check(x)
        return x[..., -1] - self.graph.phi(x[..., :-1])

    def contains(self, x):
        x = self._check(x)
        inside_ball = np.sum((x - self.c) ** 2, axis=-1) < self.R**2
        return inside_ball & (self.height(x) > 0)

    def dist_to_sphere(self, x):
        return self.R - np.linalg.norm(self._check(x) - self.c, axis=-1)

    def dist_to_graph(self, x):
        """Distance from points above the graph to the full graph surface."""
        x = self._check(x)
        v = self.height(x)
        if self.graph.profile == "flat":
            return v
        flat = x.reshape(-1, self.dim)
        vflat = np.maximum(v.reshape(-1), 0.0)
        out = np.empty(len(flat))
        for s in range(0, len(flat), _CHUNK):
            p = flat[s:s + _CHUNK]
            w = vflat[s:s + _CHUNK]

            def obj(Y, p=p):
                dz = p[:, None, -1] - self.graph.phi(Y)
                return np.sum((Y - p[:, None, :-1]) ** 2, axis=-1) + dz**2

            val, _ = zoom_min(obj, p[:, :-1], w, tol=_DIST_RTOL * self.R)
            out[s:s + _CHUNK] = np.sqrt(val)
        return out.reshape(v.shape)

    def boundary_dist(self, x):
        """Distance to ``∂(Omega ∩ B_R)`` for points inside the domain."""
        x = self._check(x)
        if not np.all(self.contains(x)):
            raise ValueError("boundary_dist requires points inside the domain")
        return np.minimum(self.dist_to_sphere(x), self.dist_to_graph(x))

    def boundary_points(self, count):
        """``count`` graph points over a uniform lattice of B'_{R/2}."""
        if count < 1:
            raise ValueError("count must be >= 1")
        cp = self.c[:-1]
        half = self.R / 2
        if self.dim == 2:
            xp = np.zeros((1, 1)) if count == 1 else np.linspace(-half, half, count)[:, None]
        else:
            m = max(int(math.ceil(math.sqrt(count * 4 / math.pi))), 1)
            while True:
                t = np.linspace(-half, half, m) if m > 1 else np.zeros(1)
                g = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
                r = np.linalg.norm(g, axis=-1)
                keep = r <= half * (1 + 1e-12)
                if keep.sum() >= count:
                    break
                m += 1
            g, r = g[keep], r[keep]
            xp = g[np.argsort(r, kind="stable")[:count]]
        xp = xp + cp
        return np.concatenate([xp, self.graph.phi(xp)[:, None]], axis=1)

    def to_dict(self):
        d = asdict(self.graph)
        d.update(R=self.R, n=self.dim, center=list(self.center))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        R = float(d.pop("R", 1.0))
        n = int(d.pop("n", d.pop("dim", 2)))
        center = tuple(d.pop("center", ()) or ())
        allowed = {"profile", "amplitude", "frequency", "alpha", "extent", "K"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown domain keys: {sorted(unknown)}")
        d.setdefault("extent", R + (float(np.linalg.norm(center[:-1])) if center else 0.0))
        return cls(HolderGraph(**d), R=R, dim=n, center=center)


def load_domain(path):
    """Read a domain specification from a JSON file."""
    with open(path) as fh:
        return GraphDomain.from_dict(json.load(fh))


def zoom_min(obj, x0, halfwidth, tol, coarse=None, fine=None):
    """Minimize ``obj`` over boxes ``x0 ± halfwidth`` by grid search and zooming.

    ``obj`` maps candidates of shape (N, M, d) to values (N, M).  A coarse
    tensor grid locates the basin; each zoom round re-grids the cell around
    the incumbent.  Returns (min value, argmin) per row.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    N, d = x0.shape
    hw = np.broadcast_to(np.asarray(halfwidth, dtype=float), (N,)).copy()
    hw = np.maximum(hw, tol)
    if coarse is None:
        coarse = 65 if d == 1 else 17
    if fine is None:
        fine = 17 if d == 1 else 9

    def grid(k):
        t = np.linspace(-1.0, 1.0, k)
        if d == 1:
            return t[:, None]
        return np.stack(np.meshgrid(*([t] * d), indexing="ij"), axis=-1).reshape(-1, d)

    g = grid(coarse)
    Y = x0[:, None, :] + hw[:, None, None] * g[None]
    vals = obj(Y)
    best = np.argmin(vals, axis=1)
    rows = np.arange(N)
    xb, vb = Y[rows, best], vals[rows, best]
    step = 2 * hw / (coarse - 1)
    gf = grid(fine)
    while np.max(step) > tol:
        Y = xb[:, None, :] + step[:, None, None] * gf[None]
        vals = obj(Y)
        best = np.argmin(vals, axis=1)
        better = vals[rows, best] < vb
        xb = np.where(better[:, None], Y[rows, best], xb)
        vb = np.where(better, vals[rows, best], vb)
        step = 2 * step / (fine - 1)
    return vb, xb
