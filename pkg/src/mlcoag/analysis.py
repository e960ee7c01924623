"""Euler-Lagrange fixed points, gelation bounds, scans and the Gibbs identity check."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import KernelSpec, PlacementSpec
from .measures import Configuration, SiteSpace
from .reference import (SigmaTable, SizeMassTable, _site_compositions, expected_q_mass,
                        sample_tree)
from .simulator import SimConfig, simulate
from .trajectories import decompose, final_sizes, r_functional, varphi_density

E2 = math.e ** 2


class MaxIterationsExceeded(RuntimeWarning):
    pass


class AbsoluteContinuityError(ValueError):
    pass


class VarianceExplosionWarning(RuntimeWarning):
    pass


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("MLCOAG_WORKERS")
    n = requested if requested is not None else 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def map_replicas(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Order-preserving map; a process pool when more than one worker is allowed."""
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- Euler-Lagrange equation, size-reduced form ------------------------------

@dataclass(frozen=True)
class ElSolution:
    D: float
    nu_n: np.ndarray
    L: int
    T: float
    converged: bool
    iterations: int
    residual: float

    @property
    def second_moment(self) -> float:
        n = np.arange(1, self.L + 1)
        return float(np.sum(n * n * self.nu_n))


def el_map(D: float, M, T: float, log_M=None) -> float:
    """sum_n n M_n exp(-T n D), evaluated from log M_n when given."""
    if log_M is None:
        with np.errstate(divide="ignore"):
            log_M = np.log(np.asarray(M, dtype=float))
    n = np.arange(1, len(log_M) + 1)
    with np.errstate(over="ignore"):
        return float(np.sum(np.exp(log_M + np.log(n) - T * n * D)))


def _bracket_mid(lo, hi):
    # g(0) can overflow, and the bracket may span many decades
    if not math.isfinite(hi):
        return max(2 * lo, 1.0)
    if lo > 0 and hi > 4 * lo:
        return math.sqrt(lo * hi)
    return 0.5 * (lo + hi)


def el_fixed_point(T: float, table: SizeMassTable, L: int, damping: float = 0.5,
                   tol: float = 1e-13, max_iter: int = 100_000, D0: float = 0.0) -> ElSolution:
    """Solve D = sum_{n<=L} n M_n exp(-T n D) by damped iteration.

    The map g is decreasing with slope about -T/(1-T) near the subcritical
    root, so plain iteration diverges once T > 1/2.  The damping is halved
    whenever a step grows.  Since g(D) - D is decreasing, every evaluation
    also tells on which side of the root D lies; a step leaving that
    bracket is replaced by bisection, so the iteration cannot stall.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must be in (0, 1]")
    if L > table.n_max:
        raise ValueError(f"table only covers n <= {table.n_max}, need L = {L}")
    log_M = np.asarray(table.log_M[:L], dtype=float)
    if np.any(np.isnan(log_M)) or np.any(log_M == np.inf):
        raise ValueError("table has non-finite entries below L")
    lam = damping
    D = max(D0, 0.0)
    lo, hi = 0.0, el_map(0.0, None, T, log_M)
    prev_step = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = el_map(D, None, T, log_M) - D
        if step > 0:
            lo = max(lo, D)
        else:
            hi = min(hi, D)
        # stop on the undamped residual or a collapsed bracket, never on a tiny damped step
        if abs(step) < tol or hi - lo < tol * max(1.0, D):
            converged = True
            break
        if abs(step) > prev_step:
            lam = lam / 2
        prev_step = abs(step)
        new = D + lam * step
        if lam < 1e-3 or not lo < new < hi:
            new = _bracket_mid(lo, hi)
        D = new
    n = np.arange(1, L + 1)
    with np.errstate(over="ignore"):
        nu = np.exp(log_M - T * n * D)
    res = abs(el_map(D, None, T, log_M) - D)
    if not converged:
        warnings.warn(f"EL iteration did not converge in {max_iter} steps", MaxIterationsExceeded)
    return ElSolution(float(np.sum(n * nu)), nu, L, T, converged, it, res)


def el_uniqueness_threshold(H: float) -> float:
    if H <= 0:
        raise ValueError("H must be positive")
    return math.pi / (1 + math.pi) / E2 / H


def el_second_moment_bound(T: float, H: float) -> float:
    """e^2 / (2 pi (1 - e^2 T H)); infinite (no constraint) when e^2 T H >= 1."""
    x = E2 * T * H
    if x >= 1:
        return math.inf
    return E2 / (2 * math.pi * (1 - x))


def supercritical_D_bounds(T: float, H: float, h: float) -> dict:
    """The two large-T bounds on D, recorded side by side."""
    if h <= 0:
        return {"two_log_T": math.inf, "log_2THe2": math.inf}
    return {"two_log_T": 2 * math.log(T) / (h * T),
            "log_2THe2": max(math.log(2 * T * H * E2) / (h * T), 1 / (2 * math.pi * H * T))}


# -- gelation bounds ---------------------------------------------------------

def i_lower_bound(T: float, H: float, h: float) -> float:
    """Lower bound on inf I as a function of T; positive means gelation by T."""
    if h <= 0:
        return -math.inf
    return 1 - (math.e / (math.pi * H) + math.log(2 * T * H * E2) ** 2 / h) / (2 * T)


@dataclass(frozen=True)
class GelationReport:
    H: float
    h: float
    t_gel_lower: float
    uniqueness_T: float
    t_gel_upper: float | None
    I_lower: tuple[tuple[float, float], ...] = field(default=())

    def i_lower(self, T: float) -> float:
        return i_lower_bound(T, self.H, self.h)


def gelation_bounds(H: float, h: float, T_max: float = 1e6, tol: float = 1e-9,
                    grid_points: int = 400) -> GelationReport:
    if H <= 0:
        raise ValueError("H must be positive")
    lower = 1 / (H * E2)
    grid = np.geomspace(lower, T_max, grid_points)
    table = tuple((float(t), float(i_lower_bound(t, H, h))) for t in grid)
    upper = None
    if h > 0:
        # first sign change on a log grid, then bisection
        vals = [v for _, v in table]
        for i in range(1, len(grid)):
            if vals[i] > 0 >= vals[i - 1]:
                lo, hi = float(grid[i - 1]), float(grid[i])
                while hi - lo > tol:
                    mid = 0.5 * (lo + hi)
                    if i_lower_bound(mid, H, h) > 0:
                        hi = mid
                    else:
                        lo = mid
                upper = hi
                break
    return GelationReport(H, h, lower, el_uniqueness_threshold(H), upper, table)


# -- rate function -----------------------------------------------------------

def rate_function_reduced(nu_n, table: SizeMassTable, T: float) -> float:
    """I(nu) = sum nu log(nu/M) + T D^2 / 2 + 1 - sum nu, with 0 log 0 = 0."""
    nu = np.asarray(nu_n, dtype=float)
    M = np.asarray(table.M[: len(nu)], dtype=float)
    if len(M) < len(nu):
        raise ValueError("nu is longer than the size-mass table")
    if np.any(nu < 0):
        raise ValueError("nu must be nonnegative")
    bad = (nu > 0) & (M <= 0)
    if np.any(bad):
        raise AbsoluteContinuityError(f"nu charges sizes {np.flatnonzero(bad) + 1} where M vanishes")
    pos = nu > 0
    ent = float(np.sum(nu[pos] * np.log(nu[pos] / M[pos])))
    n = np.arange(1, len(nu) + 1)
    D = float(np.sum(n * nu))
    return ent + 0.5 * T * D * D + 1 - float(nu.sum())


# -- non-gel mass scan -------------------------------------------------------

def _sizes_of(cfg: SimConfig) -> np.ndarray:
    return final_sizes(simulate(cfg))


def ng_scan(kernel: KernelSpec, T_list, N_list, L_list, replicas: int,
            placement: PlacementSpec | None = None, space: SiteSpace | None = None,
            seed: int = 0, workers: int | None = None) -> list[dict]:
    """Mean and standard error of the non-L-gel mass (1/N) sum_{|xi| <= L} |xi| per (T, N, L)."""
    placement = placement or PlacementSpec()
    space = space or SiteSpace((1.0,))
    rows = []
    for ti, T in enumerate(T_list):
        for ni, N in enumerate(N_list):
            base = SimConfig(float(N), float(T), kernel, placement, space,
                             seed=int(np.random.SeedSequence([seed, ti, ni]).generate_state(1)[0]))
            all_sizes = map_replicas(_sizes_of, [base.replica(r) for r in range(replicas)], workers)
            for L in L_list:
                vals = np.array([s[s <= L].sum() / float(N) for s in all_sizes])
                err = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
                rows.append({"T": float(T), "N": float(N), "L": float(L),
                             "mean": float(vals.mean()), "std_err": err, "gel": False})
    # flag gelation at the largest N and L for each T
    Nmax, Lmax = max(N_list), max(L_list)
    for r in rows:
        if r["N"] == Nmax and r["L"] == Lmax:
            r["gel"] = bool(r["mean"] < 1 - 3 * max(r["std_err"], 1e-12))
    return rows


# -- Gibbs / Poisson representation check ------------------------------------

def f_constant(trees, N) -> float:
    return 1.0


def f_max_size(s: int):
    def f(trees, N):
        return float(all(tr.size <= s for tr in trees))
    f.__name__ = f"max_size_le_{s}"
    return f


def f_exp_weight(trees, N) -> float:
    return math.exp(-len(trees) / N)


def functional_from_spec(spec) -> Callable:
    """Build a functional of the tree list from a catalogue entry.

    ``"one"``, ``"exp_weight"`` or ``("max_size", s)`` / ``"max_size:s"``.
    """
    if callable(spec):
        return spec
    if spec in ("one", "const", "constant"):
        return f_constant
    if spec == "exp_weight":
        return f_exp_weight
    if isinstance(spec, str) and spec.startswith("max_size"):
        return f_max_size(int(spec.split(":")[1]))
    if isinstance(spec, (tuple, list)) and spec[0] == "max_size":
        return f_max_size(int(spec[1]))
    raise ValueError(f"unknown test functional {spec!r}")


@dataclass(frozen=True)
class GibbsResult:
    lhs: float
    lhs_err: float
    rhs: float
    rhs_err: float
    reference_mass: float
    truncation_tail: float

    @property
    def z_score(self) -> float:
        s = math.hypot(self.lhs_err, self.rhs_err)
        return abs(self.lhs - self.rhs) / s if s > 0 else (0.0 if self.lhs == self.rhs else math.inf)

    def __iter__(self):
        return iter((self.lhs, self.lhs_err, self.rhs, self.rhs_err))


class _TiltedReference:
    """Exact b-tilted reference measure restricted to trees with at most n_max atoms.

    Size n has mass e^(1-b) b^n / n! E|Q_k|; given n, the site multiset k is
    drawn with probability proportional to its multinomial weight times
    sigma(k), and the tree from Q_k / |Q_k|.
    """

    def __init__(self, K, U, space: SiteSpace, T: float, b: float, n_max: int):
        self.sigma = SigmaTable(K, U)
        self.K, self.U, self.T = K, U, T
        mu = space.as_array()
        self.M = np.zeros(n_max)
        self.choices = []
        for n in range(1, n_max + 1):
            comps, w = [], []
            for comp in _site_compositions(n, len(mu)):
                if any(c and mu[x] <= 0 for x, c in enumerate(comp)):
                    continue
                logp = math.lgamma(n + 1) + sum(c * math.log(mu[x]) - math.lgamma(c + 1)
                                                for x, c in enumerate(comp) if c)
                k = Configuration.atoms([x for x, c in enumerate(comp) for _ in range(c)])
                comps.append(k)
                w.append(math.exp(logp) * self.sigma(k))
            w = np.array(w)
            qn = T ** (n - 1) / math.factorial(n - 1) * w.sum()
            self.M[n - 1] = math.exp(1 - b) * b ** n / math.factorial(n) * qn
            self.choices.append((comps, w / w.sum()))
        self.total = float(self.M.sum())
        self.size_p = self.M / self.total
        # tail estimate from the ratio of the last two terms
        r = self.M[-1] / self.M[-2] if n_max > 1 and self.M[-2] > 0 else 0.0
        self.tail = float(self.M[-1] * r / (1 - r)) if 0 <= r < 1 else math.inf

    def sample(self, rng):
        n = int(rng.choice(len(self.M), p=self.size_p)) + 1
        comps, p = self.choices[n - 1]
        k = comps[int(rng.choice(len(comps), p=p))]
        tr, _ = sample_tree(k, self.T, self.K, self.U, rng, exact=True, sigma=self.sigma)
        return tr


def gibbs_check(cfg: SimConfig, f_spec="one", b: float = 1.0, replicas: int = 20_000,
                n_max: int = 12) -> GibbsResult:
    """Compare E f(V) by direct simulation with its Poisson-tree representation.

    Right side: Y is a Poisson process of trees with intensity N M_b (M_b the
    b-tilted reference measure), each tree weighted by e^(b-1) b^(-|tree|)
    e^(-phi/N), the family by e^(-sum_{i<j} R/N), times e^(N(|M_b| - 1)).
    """
    N, T, K, U = cfg.N, cfg.T, cfg.kernel, cfg.placement
    mu = cfg.space.as_array()
    if N > 5 or N * mu.sum() > 5 or T > 1:
        warnings.warn("gibbs_check is designed for N <= 5 and T <= 1", RuntimeWarning)
    f = functional_from_spec(f_spec)
    ss = np.random.SeedSequence([int(cfg.seed), 0x61bb5])
    seed_l, seed_r = ss.spawn(2)

    sim_seeds = seed_l.generate_state(replicas, np.uint64)
    lhs_vals = np.empty(replicas)
    for i in range(replicas):
        c = SimConfig(N, T, K, U, cfg.space, int(sim_seeds[i]), cfg.engine, cfg.init)
        lhs_vals[i] = f(decompose(simulate(c)).trees, N)

    ref = _TiltedReference(K, U, cfg.space, T, b, n_max)
    rng = np.random.Generator(np.random.PCG64(seed_r))
    log_const = N * (ref.total - 1)
    rhs_vals = np.empty(replicas)
    for i in range(replicas):
        count = rng.poisson(N * ref.total)
        trees = [ref.sample(rng) for _ in range(count)]
        logw = 0.0
        for j, tr in enumerate(trees):
            logw += (b - 1) - tr.size * math.log(b) - varphi_density(tr, K, T) / N
            for l in range(j):
                logw -= r_functional(tr, trees[l], K, T) / N
        rhs_vals[i] = math.exp(logw + log_const) * f(trees, N)

    lhs, rhs = float(lhs_vals.mean()), float(rhs_vals.mean())
    lerr = float(lhs_vals.std(ddof=1) / math.sqrt(replicas))
    rerr = float(rhs_vals.std(ddof=1) / math.sqrt(replicas))
    if rhs != 0 and rerr / abs(rhs) > 0.5:
        warnings.warn(f"rhs relative error {rerr / abs(rhs):.2f} > 0.5", VarianceExplosionWarning)
    return GibbsResult(lhs, lerr, rhs, rerr, ref.total, ref.tail)
