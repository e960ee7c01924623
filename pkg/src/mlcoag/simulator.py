"""Exact simulation of the labelled coagulation process with kernel K/N.

Two engines are provided.  ``dense`` works for every kernel: it keeps the
row sums r_i = sum_j K(i, j) of the pair-rate matrix, samples a particle
proportionally to r_i and then its partner from the explicit row, so each
event costs O(n) vector work and O(n) memory.  ``product_fast`` handles
kernels of the form g(x, x') a(m) a(m') with a(m) in {1, m}: candidate
pairs are drawn at the constant dominating rate gmax * W^2 / (2N) (W the
total a-weight) by uniform atom/particle draws and thinned with
probability g/gmax; self-pairs are rejected.  Thinning keeps the law exact.

All randomness comes from numpy's PCG64 generator seeded through
``numpy.random.SeedSequence``; waiting times are drawn by inversion,
-log(1 - U) / rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import KernelSpec, PlacementSpec
from .measures import Configuration, SiteSpace, TimeOutOfRangeError

ENGINES = ("auto", "dense", "product_fast")
_BATCH = 4096


@dataclass(frozen=True)
class SimConfig:
    N: float
    T: float
    kernel: KernelSpec
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    space: SiteSpace = field(default_factory=lambda: SiteSpace((1.0,)))
    seed: int = 0
    engine: str = "auto"
    init: str | tuple[int, ...] = "poisson"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.N >= 1:
            raise ValueError("N must be >= 1")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.engine == "product_fast" and not self.kernel.is_product_form:
            raise ValueError(f"product_fast engine cannot run the {self.kernel.variant} kernel")
        if not isinstance(self.init, str):
            object.__setattr__(self, "init", tuple(int(s) for s in self.init))
        elif self.init != "poisson":
            raise ValueError("init must be 'poisson' or a list of sites")

    def replica(self, index: int) -> "SimConfig":
        """Same config with the seed of replica ``index``."""
        return SimConfig(self.N, self.T, self.kernel, self.placement, self.space,
                         replica_seed(self.seed, index), self.engine, self.init)


def replica_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True, eq=False)
class EventLog:
    """Labelled run record.

    Atom ``i`` carries label i; event ``k`` merges the particles with ids
    ``a[k]`` and ``b[k]`` into a new particle with id ``n0 + k``.  The label
    set of any particle is the set of atoms below it in this merge forest.
    """

    N: float
    T: float
    initial_sites: np.ndarray
    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    site_a: np.ndarray
    mass_a: np.ndarray
    site_b: np.ndarray
    mass_b: np.ndarray
    target: np.ndarray

    @property
    def n0(self) -> int:
        return len(self.initial_sites)

    @property
    def n_events(self) -> int:
        return len(self.times)

    def labels(self, pid: int) -> frozenset[int]:
        """Atom labels contained in particle ``pid``."""
        out = []
        stack = [int(pid)]
        n0 = self.n0
        while stack:
            p = stack.pop()
            if p < n0:
                out.append(p)
            else:
                k = p - n0
                stack.append(int(self.a[k]))
                stack.append(int(self.b[k]))
        return frozenset(out)

    def events(self):
        """Iterate events as dicts with the merging label sets."""
        for k in range(self.n_events):
            yield {
                "t": float(self.times[k]),
                "labels_a": self.labels(self.a[k]),
                "labels_b": self.labels(self.b[k]),
                "type_a": (int(self.site_a[k]), int(self.mass_a[k])),
                "type_b": (int(self.site_b[k]), int(self.mass_b[k])),
                "target_site": int(self.target[k]),
            }

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        return (self.N == other.N and self.T == other.T and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("initial_sites", "times", "a", "b", "site_a", "mass_a",
                      "site_b", "mass_b", "target")))

    def to_jsonl_lines(self):
        import json
        yield json.dumps({"kind": "header", "N": self.N, "T": self.T,
                          "initial_sites": self.initial_sites.tolist()})
        for k in range(self.n_events):
            yield json.dumps({
                "kind": "event", "t": float(self.times[k]),
                "a": int(self.a[k]), "b": int(self.b[k]), "id": self.n0 + k,
                "type_a": [int(self.site_a[k]), int(self.mass_a[k])],
                "type_b": [int(self.site_b[k]), int(self.mass_b[k])],
                "z": int(self.target[k]),
            })

    @classmethod
    def from_jsonl_lines(cls, lines) -> "EventLog":
        import json
        it = iter(lines)
        head = json.loads(next(it))
        if head.get("kind") != "header":
            raise ValueError("event stream must start with a header record")
        rows = [json.loads(line) for line in it if line.strip()]
        return _build_log(
            head["N"], head["T"], head["initial_sites"],
            [r["t"] for r in rows], [r["a"] for r in rows], [r["b"] for r in rows],
            [r["type_a"][0] for r in rows], [r["type_a"][1] for r in rows],
            [r["type_b"][0] for r in rows], [r["type_b"][1] for r in rows],
            [r["z"] for r in rows])


def _build_log(N, T, sites, times, a, b, sa, ma, sb, mb, z) -> EventLog:
    i64 = np.int64
    return EventLog(float(N), float(T), np.asarray(sites, dtype=i64),
                    np.asarray(times, dtype=float), np.asarray(a, dtype=i64),
                    np.asarray(b, dtype=i64), np.asarray(sa, dtype=i64),
                    np.asarray(ma, dtype=i64), np.asarray(sb, dtype=i64),
                    np.asarray(mb, dtype=i64), np.asarray(z, dtype=i64))


def initial_sites(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.init == "poisson":
        n = rng.poisson(cfg.N)
        return rng.choice(cfg.space.site_count, size=n, p=cfg.space.as_array()).astype(np.int64)
    sites = np.asarray(cfg.init, dtype=np.int64)
    if sites.size and (sites.min() < 0 or sites.max() >= cfg.space.site_count):
        raise ValueError("initial site outside the site space")
    return sites


def simulate(cfg: SimConfig) -> EventLog:
    """Run the process on [0, T]; deterministic given ``cfg.seed``."""
    rng = make_rng(cfg.seed)
    sites = initial_sites(cfg, rng)
    engine = cfg.engine
    if engine == "auto":
        engine = "product_fast" if cfg.kernel.is_product_form else "dense"
    if engine == "product_fast":
        return _simulate_product(cfg, sites, rng)
    return _simulate_dense(cfg, sites, rng)


class _Uniforms:
    """Batched uniform stream from one generator."""

    __slots__ = ("rng", "buf", "i")

    def __init__(self, rng):
        self.rng = rng
        self.buf = rng.random(_BATCH).tolist()
        self.i = 0

    def __call__(self) -> float:
        if self.i == _BATCH:
            self.buf = self.rng.random(_BATCH).tolist()
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u


def _placement_target(U: PlacementSpec, sa, ma, sb, mb, u: float) -> int:
    if U.variant == "fixed_table":
        row = U._table[sa, sb]
        return int(np.searchsorted(np.cumsum(row), u * row.sum(), side="right"))
    if sa == sb:
        return sa
    if U.variant == "weighted_random":
        return sa if u * (ma + mb) < ma else sb
    return sa if u < 0.5 else sb


def _simulate_product(cfg: SimConfig, sites: np.ndarray, rng) -> EventLog:
    K = cfg.kernel
    n0 = len(sites)
    S = cfg.space.site_count
    G = K.site_factor(S)
    present = np.unique(sites) if n0 else np.zeros(0, dtype=int)
    gmax = float(G[np.ix_(present, present)].max()) if n0 else 0.0
    G = G.tolist()
    U = cfg.placement
    T = cfg.T
    N = float(cfg.N)
    unif = _Uniforms(rng)
    log = math.log
    out_t, out_a, out_b, out_sa, out_ma, out_sb, out_mb, out_z = ([] for _ in range(8))
    t = 0.0
    if n0 < 2 or gmax <= 0:
        return _build_log(N, T, sites, [], [], [], [], [], [], [], [])

    if K.variant == "constant":
        # a(m) = 1: uniform particle draws over live slots
        p = n0
        slot_site = sites.tolist()
        slot_mass = [1] * n0
        slot_pid = list(range(n0))
        while p > 1:
            rate = gmax * p * p / (2.0 * N)
            t += -log(1.0 - unif()) / rate
            if t > T:
                break
            i = int(unif() * p)
            j = int(unif() * p)
            if i == j:
                continue
            si, sj = slot_site[i], slot_site[j]
            g = G[si][sj]
            if g < gmax and unif() * gmax >= g:
                continue
            mi, mj = slot_mass[i], slot_mass[j]
            z = _placement_target(U, si, mi, sj, mj, unif())
            out_t.append(t)
            out_a.append(slot_pid[i])
            out_b.append(slot_pid[j])
            out_sa.append(si)
            out_ma.append(mi)
            out_sb.append(sj)
            out_mb.append(mj)
            out_z.append(z)
            slot_site[i] = z
            slot_mass[i] = mi + mj
            slot_pid[i] = n0 + len(out_t) - 1
            last = p - 1
            slot_site[j] = slot_site[last]
            slot_mass[j] = slot_mass[last]
            slot_pid[j] = slot_pid[last]
            slot_site.pop()
            slot_mass.pop()
            slot_pid.pop()
            p -= 1
    else:
        # a(m) = m: uniform atom draws, union-find over atoms
        parent = list(range(n0))
        root_site = sites.tolist()
        root_mass = [1] * n0
        root_pid = list(range(n0))
        rate = gmax * n0 * n0 / (2.0 * N)
        remaining = n0

        def find(x):
            r = x
            while parent[r] != r:
                r = parent[r]
            while parent[x] != r:
                parent[x], x = r, parent[x]
            return r

        while remaining > 1:
            t += -log(1.0 - unif()) / rate
            if t > T:
                break
            ru = find(int(unif() * n0))
            rv = find(int(unif() * n0))
            if ru == rv:
                continue
            su, sv = root_site[ru], root_site[rv]
            g = G[su][sv]
            if g < gmax and unif() * gmax >= g:
                continue
            mu, mv = root_mass[ru], root_mass[rv]
            z = _placement_target(U, su, mu, sv, mv, unif())
            out_t.append(t)
            out_a.append(root_pid[ru])
            out_b.append(root_pid[rv])
            out_sa.append(su)
            out_ma.append(mu)
            out_sb.append(sv)
            out_mb.append(mv)
            out_z.append(z)
            if mu < mv:
                ru, rv = rv, ru
            parent[rv] = ru
            root_site[ru] = z
            root_mass[ru] = mu + mv
            root_pid[ru] = n0 + len(out_t) - 1
            remaining -= 1
    return _build_log(N, T, sites, out_t, out_a, out_b, out_sa, out_ma, out_sb, out_mb, out_z)


def _simulate_dense(cfg: SimConfig, sites: np.ndarray, rng) -> EventLog:
    K = cfg.kernel
    U = cfg.placement
    N = float(cfg.N)
    T = cfg.T
    n0 = len(sites)
    site = sites.astype(np.int64).copy()
    mass = np.ones(n0, dtype=np.int64)
    pid = np.arange(n0, dtype=np.int64)
    alive = np.ones(n0, dtype=bool)
    unif = _Uniforms(rng)
    out_t, out_a, out_b, out_sa, out_ma, out_sb, out_mb, out_z = ([] for _ in range(8))
    if n0 < 2:
        return _build_log(N, T, sites, [], [], [], [], [], [], [], [])

    def row(i):
        r = K.evaluate(site[i], mass[i], site, mass)
        r = np.where(alive, r, 0.0)
        r[i] = 0.0
        return r

    def full_rowsums():
        r = np.zeros(n0)
        for i in range(0, n0, 512):
            blk = K.evaluate(site[i:i + 512, None], mass[i:i + 512, None], site[None, :], mass[None, :])
            blk = blk * alive[None, :]
            idx = np.arange(i, min(i + 512, n0))
            blk[idx - i, idx] = 0.0
            r[i:i + 512] = blk.sum(axis=1)
        return np.where(alive, r, 0.0)

    rsum = full_rowsums()
    t = 0.0
    since_refresh = 0
    p = n0
    while p > 1:
        total = rsum.sum() / 2.0  # unordered pair rate with kernel K
        if total <= 0:
            break
        t += -math.log(1.0 - unif()) * N / total
        if t > T:
            break
        cum = np.cumsum(rsum)
        i = int(np.searchsorted(cum, unif() * cum[-1], side="right"))
        i = min(i, n0 - 1)
        ri = row(i)
        cum = np.cumsum(ri)
        j = int(np.searchsorted(cum, unif() * cum[-1], side="right"))
        j = min(j, n0 - 1)
        if not alive[j] or j == i or ri[j] <= 0:
            # round-off at a cumsum boundary; resample from the exact row
            j = int(np.flatnonzero(ri > 0)[-1])
        si, sj, mi, mj = int(site[i]), int(site[j]), int(mass[i]), int(mass[j])
        z = _placement_target(U, si, mi, sj, mj, unif())
        out_t.append(t)
        out_a.append(int(pid[i]))
        out_b.append(int(pid[j]))
        out_sa.append(si)
        out_ma.append(mi)
        out_sb.append(sj)
        out_mb.append(mj)
        out_z.append(z)
        rj = row(j)
        alive[j] = False
        site[i] = z
        mass[i] = mi + mj
        pid[i] = n0 + len(out_t) - 1
        new = row(i)
        rsum += new - ri - rj
        rsum[i] = new.sum()
        rsum[j] = 0.0
        rsum[~alive] = 0.0
        np.maximum(rsum, 0.0, out=rsum)
        p -= 1
        since_refresh += 1
        if since_refresh >= 256:
            rsum = full_rowsums()
            since_refresh = 0
    return _build_log(N, T, sites, out_t, out_a, out_b, out_sa, out_ma, out_sb, out_mb, out_z)


def _alive_types(log: EventLog, t: float):
    """Sites and masses of the particles alive at time t (right-continuous)."""
    if t < 0 or t > log.T:
        raise TimeOutOfRangeError(f"t={t} outside [0, {log.T}]")
    k = int(np.searchsorted(log.times, t, side="right"))
    n0 = log.n0
    alive = np.zeros(n0 + k, dtype=bool)
    alive[:] = True
    alive[log.a[:k]] = False
    alive[log.b[:k]] = False
    site = np.concatenate([log.initial_sites, log.target[:k]])
    mass = np.concatenate([np.ones(n0, dtype=np.int64), log.mass_a[:k] + log.mass_b[:k]])
    return site[alive], mass[alive]


def state_at(log: EventLog, t: float) -> Configuration:
    """Unlabelled configuration at time t."""
    site, mass = _alive_types(log, t)
    if site.size == 0:
        return Configuration()
    keys, counts = np.unique(np.stack([site, mass], axis=1), axis=0, return_counts=True)
    return Configuration(((int(s), int(m)), int(c)) for (s, m), c in zip(keys, counts))


def state_grid(log: EventLog, t: float, n_sites: int, L: int) -> np.ndarray:
    """Particle counts at time t on the (site, mass <= L) grid; heavier particles dropped."""
    site, mass = _alive_types(log, t)
    keep = mass <= L
    out = np.zeros((n_sites, L))
    np.add.at(out, (site[keep], mass[keep] - 1), 1.0)
    return out


def particle_count_at(log: EventLog, t: float) -> int:
    if t < 0 or t > log.T:
        raise TimeOutOfRangeError(f"t={t} outside [0, {log.T}]")
    return log.n0 - int(np.searchsorted(log.times, t, side="right"))


def summary_rows(log: EventLog, times: Sequence[float], L_list: Sequence[int]):
    """Rows (t, particle_count, mass_below_L...) for the summary CSV."""
    rows = []
    for t in times:
        site, mass = _alive_types(log, t)
        rows.append([t, int(site.size)] + [int(mass[mass <= L].sum()) for L in L_list])
    return rows
