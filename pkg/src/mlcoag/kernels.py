"""Coagulation kernels, placement kernels and the bounds H and h.

H and h are computed by reducing the sup/inf over mass-normalised measures
to the extreme points delta_(x,m)/m, i.e. to sup/inf of K/(m m').  For the
closed-form variants that reduction is solved exactly; table kernels are
only searched up to their mass cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .measures import ParticleType

KERNEL_VARIANTS = ("constant", "multiplicative", "additive", "spatial_product", "table")
PLACEMENT_VARIANTS = ("weighted_random", "uniform_pair", "fixed_table")


class CutoffExceededError(ValueError):
    pass


def _as_symmetric(name: str, a, ndim: int) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    return arr


@dataclass(frozen=True)
class KernelSpec:
    variant: str
    c: float = 1.0
    phi: Any = None
    table: Any = None
    _phi: np.ndarray = field(default=None, init=False, repr=False, compare=False)
    _table: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "constant" and self.c < 0:
            raise ValueError("constant kernel needs c >= 0")
        if self.variant == "spatial_product":
            phi = _as_symmetric("phi", self.phi, 2)
            if phi.shape[0] != phi.shape[1] or not np.allclose(phi, phi.T, rtol=0, atol=1e-14):
                raise ValueError("phi must be a symmetric square matrix")
            object.__setattr__(self, "_phi", phi)
            object.__setattr__(self, "phi", phi.tolist())
        if self.variant == "table":
            # indexed [site, mass-1, site', mass'-1]
            tab = _as_symmetric("table", self.table, 4)
            if not np.allclose(tab, tab.transpose(2, 3, 0, 1), rtol=0, atol=1e-14):
                raise ValueError("table kernel must be symmetric")
            object.__setattr__(self, "_table", tab)
            object.__setattr__(self, "table", tab.tolist())

    # constructors
    @classmethod
    def constant(cls, c: float = 1.0) -> "KernelSpec":
        return cls("constant", c=float(c))

    @classmethod
    def multiplicative(cls) -> "KernelSpec":
        return cls("multiplicative")

    @classmethod
    def additive(cls) -> "KernelSpec":
        return cls("additive")

    @classmethod
    def spatial_product(cls, phi) -> "KernelSpec":
        return cls("spatial_product", phi=phi)

    @classmethod
    def from_table(cls, table) -> "KernelSpec":
        return cls("table", table=table)

    @property
    def mass_cutoff(self) -> float:
        if self.variant == "table":
            return self._table.shape[1]
        return math.inf

    @property
    def is_product_form(self) -> bool:
        """True when K = g(x, x') a(m) a(m') with a(m) in {1, m}."""
        return self.variant in ("constant", "multiplicative", "spatial_product")

    def site_factor(self, n_sites: int) -> np.ndarray:
        """g(x, x') for product-form kernels."""
        if self.variant == "constant":
            return np.full((n_sites, n_sites), self.c)
        if self.variant == "multiplicative":
            return np.ones((n_sites, n_sites))
        if self.variant == "spatial_product":
            if self._phi.shape[0] < n_sites:
                raise ValueError("phi smaller than the site space")
            return self._phi[:n_sites, :n_sites]
        raise ValueError(f"{self.variant} kernel has no product form")

    def __call__(self, a, b) -> float:
        return kernel_eval(self, a, b)

    def evaluate(self, sa, ma, sb, mb) -> np.ndarray:
        """Vectorised K over broadcastable site/mass arrays."""
        ma = np.asarray(ma, dtype=float)
        mb = np.asarray(mb, dtype=float)
        v = self.variant
        if v == "constant":
            return np.full(np.broadcast(ma, mb).shape, self.c)
        if v == "multiplicative":
            return ma * mb
        if v == "additive":
            return ma + mb
        if v == "spatial_product":
            return self._phi[np.asarray(sa), np.asarray(sb)] * (ma * mb)
        cut = self._table.shape[1]
        if np.any(ma > cut) or np.any(mb > cut):
            raise CutoffExceededError(f"mass beyond table cutoff {cut}")
        return self._table[np.asarray(sa), ma.astype(int) - 1, np.asarray(sb), mb.astype(int) - 1]

    def grid(self, n_sites: int, L: int) -> np.ndarray:
        """K on the full (site, mass<=L) x (site, mass<=L) grid, shape (S, L, S, L)."""
        s = np.arange(n_sites)
        m = np.arange(1, L + 1)
        return self.evaluate(s[:, None, None, None], m[None, :, None, None],
                             s[None, None, :, None], m[None, None, None, :])

    def to_json(self) -> dict:
        d: dict[str, Any] = {"variant": self.variant}
        if self.variant == "constant":
            d["c"] = self.c
        if self.variant == "spatial_product":
            d["phi"] = self.phi
        if self.variant == "table":
            d["table"] = self.table
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "KernelSpec":
        return cls(d["variant"], c=float(d.get("c", 1.0)), phi=d.get("phi"), table=d.get("table"))


def kernel_eval(K: KernelSpec, a, b) -> float:
    a = ParticleType(*a)
    b = ParticleType(*b)
    if K.variant == "table" and max(a.mass, b.mass) > K.mass_cutoff:
        raise CutoffExceededError(f"mass beyond table cutoff {K.mass_cutoff}")
    return float(K.evaluate(a.site, a.mass, b.site, b.mass))


@dataclass(frozen=True)
class PlacementSpec:
    variant: str = "weighted_random"
    table: Any = None
    _table: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in PLACEMENT_VARIANTS:
            raise ValueError(f"unknown placement variant {self.variant!r}")
        if self.variant == "fixed_table":
            # indexed [x, x', z]
            tab = np.asarray(self.table, dtype=float)
            if tab.ndim != 3 or np.any(tab < 0):
                raise ValueError("fixed_table placement needs a nonnegative (S, S, S) array")
            if not np.allclose(tab.sum(axis=2), 1.0, atol=1e-12):
                raise ValueError("placement probabilities must sum to 1")
            if not np.allclose(tab, tab.transpose(1, 0, 2), atol=1e-14):
                raise ValueError("placement table must be symmetric in its two inputs")
            object.__setattr__(self, "_table", tab)
            object.__setattr__(self, "table", tab.tolist())

    def distribution(self, a, b, n_sites: int | None = None) -> dict[int, float]:
        """Target-site distribution Upsilon(a, b, .) as {site: probability}."""
        a = ParticleType(*a)
        b = ParticleType(*b)
        if self.variant == "fixed_table":
            row = self._table[a.site, b.site]
            return {int(z): float(p) for z, p in enumerate(row) if p > 0}
        if a.site == b.site:
            return {a.site: 1.0}
        if self.variant == "weighted_random":
            tot = a.mass + b.mass
            return {a.site: a.mass / tot, b.site: b.mass / tot}
        return {a.site: 0.5, b.site: 0.5}

    def tensor(self, n_sites: int, L: int) -> np.ndarray:
        """Upsilon over the grid, shape (S, L, S, L, S)."""
        S = n_sites
        out = np.zeros((S, L, S, L, S))
        m = np.arange(1, L + 1, dtype=float)
        if self.variant == "fixed_table":
            out[:] = self._table[:S, :S, :S][:, None, :, None, :]
            return out
        if self.variant == "weighted_random":
            wa = m[:, None] / (m[:, None] + m[None, :])
        else:
            wa = np.full((L, L), 0.5)
        for x in range(S):
            for y in range(S):
                out[x, :, y, :, x] += wa
                out[x, :, y, :, y] += 1.0 - wa
        return out

    def to_json(self) -> dict:
        d: dict[str, Any] = {"variant": self.variant}
        if self.variant == "fixed_table":
            d["table"] = self.table
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "PlacementSpec":
        return cls(d["variant"], table=d.get("table"))


def placement_sample(U: PlacementSpec, a, b, rng: np.random.Generator) -> int:
    a = ParticleType(*a)
    b = ParticleType(*b)
    if a.site == b.site and U.variant != "fixed_table":
        return a.site
    if U.variant == "weighted_random":
        return a.site if rng.random() * (a.mass + b.mass) < a.mass else b.site
    if U.variant == "uniform_pair":
        return a.site if rng.random() < 0.5 else b.site
    row = U._table[a.site, b.site]
    return int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right"))


def compute_H(K: KernelSpec, mass_cutoff: int = 64) -> tuple[float, bool]:
    """sup K/(m m'): the structural upper bound H and whether it is exact."""
    if mass_cutoff < 1:
        raise ValueError("mass_cutoff must be >= 1")
    v = K.variant
    if v == "constant":
        return K.c, True
    if v == "multiplicative":
        return 1.0, True
    if v == "additive":
        return 2.0, True
    if v == "spatial_product":
        return float(K._phi.max()), True
    tab = K._table
    L = min(mass_cutoff, tab.shape[1])
    m = np.arange(1, L + 1, dtype=float)
    ratio = tab[:, :L, :, :L] / (m[None, :, None, None] * m[None, None, None, :])
    return float(ratio.max()), False


def compute_h(K: KernelSpec, mass_cutoff: int = 64) -> tuple[float, bool]:
    """inf K/(m m'): the structural lower bound h and whether it is exact."""
    if mass_cutoff < 1:
        raise ValueError("mass_cutoff must be >= 1")
    v = K.variant
    if v in ("constant", "additive"):
        # K/(m m') -> 0 as masses grow
        return 0.0, True
    if v == "multiplicative":
        return 1.0, True
    if v == "spatial_product":
        return float(K._phi.min()), True
    tab = K._table
    L = min(mass_cutoff, tab.shape[1])
    m = np.arange(1, L + 1, dtype=float)
    ratio = tab[:, :L, :, :L] / (m[None, :, None, None] * m[None, None, None, :])
    return float(ratio.min()), False


def bilinear(K: KernelSpec, v: Mapping, w: Mapping) -> float:
    """<v, K w> for finite measures given as {(site, mass): weight}."""
    if not v or not w:
        return 0.0
    va = list(v.items())
    wa = list(w.items())
    sv = np.array([p[0] for p, _ in va])
    mv = np.array([p[1] for p, _ in va])
    cv = np.array([c for _, c in va], dtype=float)
    sw = np.array([p[0] for p, _ in wa])
    mw = np.array([p[1] for p, _ in wa])
    cw = np.array([c for _, c in wa], dtype=float)
    Kvw = K.evaluate(sv[:, None], mv[:, None], sw[None, :], mw[None, :])
    return float(cv @ Kvw @ cw)
