"""Reference one-tree measures: the sigma recursion, total masses and sampling.

``sigma(phi)`` sums the product of merge rates over every merge sequence
that takes ``phi`` down to a single particle; pair rates use the
unordered-pair counting phi(a) phi(b) for a != b and phi(a)(phi(a)-1)/2
for a == b, and placement outcomes are summed over target sites.  The
total mass of the limit tree measure started from n atoms k is
T^(n-1)/(n-1)! * sigma(k).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import KernelSpec, PlacementSpec
from .measures import Configuration, Jump, ParticleType, SiteSpace, Trajectory

MAX_EXACT_SIZE = 12


class SizeLimitExceededError(ValueError):
    pass


def _transitions(phi: Configuration, K: KernelSpec, U: PlacementSpec):
    """(rate, a, b, z) for every unordered type pair and target site."""
    types = sorted(phi)
    out = []
    for i, a in enumerate(types):
        ca = phi[a]
        for b in types[i:]:
            count = ca * (ca - 1) // 2 if a == b else ca * phi[b]
            if count == 0:
                continue
            k = K(a, b)
            if k <= 0:
                continue
            for z, pz in U.distribution(a, b).items():
                out.append((count * k * pz, a, b, z))
    return out


def _merge(phi: Configuration, a: ParticleType, b: ParticleType, z: int) -> Configuration:
    counts = dict(phi.items())
    counts[a] -= 1
    counts[b] -= 1
    new = ParticleType(z, a.mass + b.mass)
    counts[new] = counts.get(new, 0) + 1
    return Configuration(counts)


class SigmaTable:
    """Memoised sigma recursion for one (kernel, placement) pair."""

    def __init__(self, K: KernelSpec, U: PlacementSpec, max_size: int = MAX_EXACT_SIZE):
        self.K = K
        self.U = U
        self.max_size = max_size
        self._memo: dict[Configuration, float] = {}

    def __call__(self, phi: Configuration) -> float:
        n = phi.particle_count
        if n < 1:
            raise ValueError("sigma needs a nonempty configuration")
        if n > self.max_size:
            raise SizeLimitExceededError(f"|phi|={n} exceeds the exact-recursion limit {self.max_size}")
        return self._sigma(phi)

    def _sigma(self, phi: Configuration) -> float:
        if phi.particle_count == 1:
            return 1.0
        v = self._memo.get(phi)
        if v is None:
            v = 0.0
            for rate, a, b, z in _transitions(phi, self.K, self.U):
                v += rate * self._sigma(_merge(phi, a, b, z))
            self._memo[phi] = v
        return v

    def transitions(self, phi: Configuration):
        return _transitions(phi, self.K, self.U)


def _as_atoms(k) -> Configuration:
    if isinstance(k, Configuration):
        return k
    if isinstance(k, (int, np.integer)):
        return Configuration.atoms([0] * int(k))
    return Configuration.atoms(k)


def sigma_recursion(phi: Configuration, K: KernelSpec, U: PlacementSpec | None = None,
                    max_size: int = MAX_EXACT_SIZE) -> float:
    return SigmaTable(K, U or PlacementSpec(), max_size)(phi)


def sigma_closed_form(n: int, K: KernelSpec) -> float | None:
    """sigma for n atoms of a site-independent kernel when a closed form exists.

    Constant c: every step has p(p-1)/2 pairs at rate c.  Additive: the total
    rate with p particles and total mass n is (p - 1) n.  Multiplicative: the
    count of labelled trees times orderings, n^(n-2) (n-1)!.
    """
    v = log_sigma_closed_form(n, K)
    return None if v is None else math.exp(v)


def log_sigma_closed_form(n: int, K: KernelSpec) -> float | None:
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return 0.0
    v = K.variant
    if v == "multiplicative":
        return (n - 2) * math.log(n) + math.lgamma(n)
    if v == "additive":
        return (n - 1) * math.log(n) + math.lgamma(n)
    if v == "constant":
        if K.c <= 0:
            return -math.inf
        return (n - 1) * math.log(K.c) + math.lgamma(n + 1) + math.lgamma(n) - (n - 1) * math.log(2)
    if v == "spatial_product":
        phi = np.asarray(K.phi)
        if np.all(phi == phi.flat[0]) and phi.flat[0] > 0:
            return (n - 1) * math.log(phi.flat[0]) + (n - 2) * math.log(n) + math.lgamma(n)
    return None


def q_mass(k, T: float, K: KernelSpec, U: PlacementSpec | None = None,
           sigma: SigmaTable | None = None) -> float:
    """Total mass of the limit tree measure started from atoms ``k``."""
    phi = _as_atoms(k)
    n = phi.particle_count
    if n > MAX_EXACT_SIZE:
        raise SizeLimitExceededError(f"|k|={n} exceeds the exact-recursion limit {MAX_EXACT_SIZE}")
    table = sigma or SigmaTable(K, U or PlacementSpec())
    return T ** (n - 1) / math.factorial(n - 1) * table(phi)


def q_mass_bound(n: int, T: float, H: float) -> float:
    """(TH)^(n-1)/(n-1)! * n^(2(n-1))."""
    return (T * H) ** (n - 1) / math.factorial(n - 1) * float(n) ** (2 * (n - 1))


def m_moment_bound(n: int, T: float, H: float, b: float) -> float:
    """e^(1-b)/(2 pi T H) * (b T H e^2)^n * n^-2."""
    v = log_m_moment_bound(n, T, H, b)
    return math.exp(v) if v < 709 else math.inf


def log_m_moment_bound(n: int, T: float, H: float, b: float) -> float:
    if not (T > 0 and H > 0 and b > 0):
        raise ValueError("T, H and b must be positive")
    return (1 - b) - math.log(2 * math.pi * T * H) + n * (math.log(b * T * H) + 2) - 2 * math.log(n)


@dataclass(frozen=True)
class SizeMassTable:
    """M_n = mass of the b-tilted reference measure on trees with n atoms, n = 1..n_max."""

    M: np.ndarray
    b: float
    T: float
    method: tuple[str, ...]
    std_err: np.ndarray | None = None
    log_M: np.ndarray | None = None

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        if np.any(M < 0):
            raise ValueError("M_n must be nonnegative")
        object.__setattr__(self, "M", M)
        if self.log_M is None:
            with np.errstate(divide="ignore"):
                object.__setattr__(self, "log_M", np.log(M))

    @property
    def n_max(self) -> int:
        return len(self.M)

    def sizes(self) -> np.ndarray:
        return np.arange(1, self.n_max + 1)


def _site_compositions(n: int, S: int):
    if S == 1:
        yield (n,)
        return
    for c in itertools.combinations(range(n + S - 1), S - 1):
        parts = []
        prev = -1
        for x in c:
            parts.append(x - prev - 1)
            prev = x
        parts.append(n + S - 1 - prev - 1)
        yield tuple(parts)


def expected_q_mass(n: int, T: float, K: KernelSpec, U: PlacementSpec, space: SiteSpace,
                    sigma: SigmaTable | None = None) -> float:
    """E|Q_k| over n atoms with i.i.d. mu-distributed sites, by exact enumeration."""
    mu = space.as_array()
    S = len(mu)
    table = sigma or SigmaTable(K, U)
    total = 0.0
    logfn = math.lgamma(n + 1)
    for comp in _site_compositions(n, S):
        logp = logfn
        ok = True
        for x, c in enumerate(comp):
            if c:
                if mu[x] <= 0:
                    ok = False
                    break
                logp += c * math.log(mu[x]) - math.lgamma(c + 1)
        if not ok:
            continue
        k = Configuration.atoms([x for x, c in enumerate(comp) for _ in range(c)])
        total += math.exp(logp) * table(k)
    return T ** (n - 1) / math.factorial(n - 1) * total


def size_mass_table(K: KernelSpec, U: PlacementSpec, space: SiteSpace, T: float, b: float,
                    n_max: int, exact_max: int = MAX_EXACT_SIZE, mc_samples: int = 2000,
                    seed: int = 0) -> SizeMassTable:
    """M_n = e^(1-b) b^n / n! * E|Q_k| for |k| = n.

    Exact by recursion for n <= exact_max, closed form for site-independent
    kernels with a known sigma, Monte Carlo (sequential importance sampling
    of merge sequences) otherwise.
    """
    M = np.zeros(n_max)
    logM = np.full(n_max, -np.inf)
    err = np.zeros(n_max)
    method = []
    table = SigmaTable(K, U)
    rng = np.random.default_rng(seed)
    site_free = K.variant in ("constant", "multiplicative", "additive") or (
        K.variant == "spatial_product" and log_sigma_closed_form(2, K) is not None)
    for n in range(1, n_max + 1):
        logpre = (1 - b) + n * math.log(b) - math.lgamma(n + 1)
        ls = log_sigma_closed_form(n, K) if site_free else None
        if ls is not None and (n > exact_max or space.site_count == 1):
            logM[n - 1] = logpre + ls + (n - 1) * math.log(T) - math.lgamma(n)
            M[n - 1] = math.exp(logM[n - 1]) if logM[n - 1] < 709 else math.inf
            method.append("closed_form")
            continue
        elif n <= exact_max:
            M[n - 1] = math.exp(logpre) * expected_q_mass(n, T, K, U, space, table)
            method.append("exact")
        else:
            w = np.empty(mc_samples)
            for i in range(mc_samples):
                sites = rng.choice(space.site_count, size=n, p=space.as_array())
                w[i] = sample_tree(Configuration.atoms(sites), T, K, U, rng, exact=False)[1]
            M[n - 1] = math.exp(logpre) * w.mean()
            err[n - 1] = math.exp(logpre) * w.std(ddof=1) / math.sqrt(mc_samples)
            method.append("mc")
        with np.errstate(divide="ignore"):
            logM[n - 1] = math.log(M[n - 1]) if M[n - 1] > 0 else -math.inf
    return SizeMassTable(M, b, T, tuple(method), err, logM)


def sample_tree(k, T: float, K: KernelSpec, U: PlacementSpec, rng: np.random.Generator,
                exact: bool | None = None, sigma: SigmaTable | None = None):
    """Draw a trajectory from the limit tree measure started from atoms ``k``.

    With ``exact`` (default when |k| <= 12) merges are chosen with probability
    rate * sigma(child) / sigma(parent), so the path has law Q/|Q| and the
    returned weight is |Q| itself.  Otherwise merges are chosen proportionally
    to their rates and the weight is T^(n-1)/(n-1)! times the product of the
    total rates, an unbiased estimate of |Q| whose weighted paths integrate
    to Q.  Jump times are sorted uniforms on [0, T].
    """
    phi = _as_atoms(k)
    n = phi.particle_count
    if n < 1:
        raise ValueError("need at least one atom")
    if exact is None:
        exact = n <= MAX_EXACT_SIZE
    table = sigma or SigmaTable(K, U)
    times = np.sort(rng.random(n - 1)) * T
    jumps = []
    cur = phi
    log_w = (n - 1) * math.log(T) - math.lgamma(n) if n > 1 else 0.0
    if exact:
        log_w += math.log(table(phi))
    for step in range(n - 1):
        trans = table.transitions(cur)
        if not trans:
            return Trajectory(phi, tuple(jumps), T), 0.0
        if exact:
            w = np.array([r * table(_merge(cur, a, b, z)) for r, a, b, z in trans])
        else:
            w = np.array([r for r, *_ in trans])
            log_w += math.log(w.sum())
        idx = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
        idx = min(idx, len(trans) - 1)
        _, a, b, z = trans[idx]
        jumps.append(Jump(float(times[step]), a, b, z))
        cur = _merge(cur, a, b, z)
    return Trajectory(phi, tuple(jumps), T), math.exp(log_w)


@dataclass(frozen=True)
class QLimitRow:
    N: float
    estimate: float
    std_err: float
    hits: int
    replicas: int


def _batch_coalescence(sites0: np.ndarray, T: float, K: KernelSpec, U: PlacementSpec,
                       N: float, scale: float, R: int, rng: np.random.Generator):
    """Run R copies of the small system with kernel scale*K/N.

    Returns (coalesced, int_0^T Lambda dt, jumps) per replica, Lambda being
    the total pair rate for the *unscaled* kernel K.
    """
    n = len(sites0)
    site = np.tile(sites0, (R, 1)).astype(np.int64)
    mass = np.ones((R, n), dtype=np.int64)
    alive = np.ones((R, n), dtype=bool)
    t = np.zeros(R)
    integral = np.zeros(R)
    jumps = np.zeros(R, dtype=np.int64)
    running = np.ones(R, dtype=bool)
    iu, ju = np.triu_indices(n, 1)
    rows = np.arange(R)
    for _ in range(n - 1):
        rate = K.evaluate(site[:, iu], mass[:, iu], site[:, ju], mass[:, ju])
        rate = rate * (alive[:, iu] & alive[:, ju])
        lam = rate.sum(axis=1)
        active = running & (lam > 0)
        dt = np.full(R, np.inf)
        e = -np.log1p(-rng.random(R))
        with np.errstate(divide="ignore"):
            dt[active] = e[active] * N / (scale * lam[active])
        fires = active & (t + dt <= T)
        stop = active & ~fires
        integral[stop] += lam[stop] * (T - t[stop])
        integral[fires] += lam[fires] * dt[fires]
        t[fires] += dt[fires]
        running &= fires
        if not fires.any():
            break
        cum = np.cumsum(rate, axis=1)
        u = rng.random(R) * lam
        pick = np.minimum((cum <= u[:, None]).sum(axis=1), len(iu) - 1)
        i = iu[pick]
        j = ju[pick]
        sa, sb = site[rows, i], site[rows, j]
        ma, mb = mass[rows, i], mass[rows, j]
        uz = rng.random(R)
        if U.variant == "weighted_random":
            z = np.where(uz * (ma + mb) < ma, sa, sb)
        elif U.variant == "uniform_pair":
            z = np.where(uz < 0.5, sa, sb)
        else:
            tab = np.cumsum(U._table[sa, sb], axis=1)
            z = (tab <= uz[:, None] * tab[:, -1:]).sum(axis=1)
        f = np.flatnonzero(fires)
        site[f, i[f]] = z[f]
        mass[f, i[f]] = ma[f] + mb[f]
        alive[f, j[f]] = False
        jumps[f] += 1
    coalesced = jumps == n - 1
    return coalesced, integral, jumps


def mc_q_limit(k, T: float, K: KernelSpec, N_list: Sequence[float], replicas: int,
               U: PlacementSpec | None = None, seed: int = 0, method: str = "tilted",
               chunk: int = 200_000) -> list[QLimitRow]:
    """Monte Carlo estimates of N^(|k|-1) P_k(all atoms merge by T) under kernel K/N.

    ``direct`` counts coalescences of the process itself (binomial error);
    it only resolves the probability when it is not too small.  ``tilted``
    runs the process with kernel K instead of K/N and reweights each path by
    its likelihood ratio, N^-(n-1) exp((1 - 1/N) int_0^T Lambda dt) on the
    coalescence event; both estimate the same quantity.
    """
    phi = _as_atoms(k)
    U = U or PlacementSpec()
    sites0 = np.array(sorted(p.site for p, c in phi.items() for _ in range(c)), dtype=np.int64)
    n = len(sites0)
    rng = np.random.default_rng(seed)
    rows = []
    for N in N_list:
        N = float(N)
        if n == 1:
            rows.append(QLimitRow(N, 1.0, 0.0, replicas, replicas))
            continue
        s1 = s2 = 0.0
        hits = 0
        done = 0
        while done < replicas:
            R = min(chunk, replicas - done)
            scale = 1.0 if method == "direct" else N
            coal, integral, _ = _batch_coalescence(sites0, T, K, U, N, scale, R, rng)
            if method == "direct":
                x = coal * N ** (n - 1)
            elif method == "tilted":
                # N^(n-1) * scale^-(n-1) exp((scale-1)/N int Lambda) with scale = N
                x = coal * np.exp((1.0 - 1.0 / N) * integral)
            else:
                raise ValueError(f"unknown method {method!r}")
            s1 += float(x.sum())
            s2 += float((x * x).sum())
            hits += int(coal.sum())
            done += R
        mean = s1 / replicas
        var = max(s2 / replicas - mean * mean, 0.0) * replicas / max(replicas - 1, 1)
        rows.append(QLimitRow(N, mean, math.sqrt(var / replicas), hits, replicas))
    return rows
