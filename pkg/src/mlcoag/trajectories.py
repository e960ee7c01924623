"""History-tree decomposition, the non-coagulation functional and observables."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import KernelSpec, bilinear
from .measures import Configuration, EmpiricalTreeMeasure, Jump, ParticleType, Trajectory
from .simulator import EventLog


@dataclass(frozen=True)
class TreeForest:
    trees: tuple[Trajectory, ...]
    N: float

    def measure(self) -> EmpiricalTreeMeasure:
        return EmpiricalTreeMeasure.uniform(self.trees, self.N)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([tr.size for tr in self.trees], dtype=np.int64)


def final_roots(log: EventLog) -> np.ndarray:
    """For every particle id (atoms and merge products), the id of its particle at T."""
    n0, E = log.n0, log.n_events
    root = np.arange(n0 + E, dtype=np.int64)
    a = log.a.tolist()
    b = log.b.tolist()
    r = root.tolist()
    for k in range(E - 1, -1, -1):
        r[a[k]] = r[n0 + k]
        r[b[k]] = r[n0 + k]
    return np.asarray(r, dtype=np.int64)


def final_sizes(log: EventLog) -> np.ndarray:
    """|xi_0| of every tree, without building the trajectories."""
    root = final_roots(log)[: log.n0]
    _, counts = np.unique(root, return_counts=True)
    return counts


def decompose(log: EventLog) -> TreeForest:
    """Split a run into the history trees of the particles alive at T."""
    n0 = log.n0
    root = final_roots(log)
    atoms: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(root[:n0].tolist()):
        atoms[r].append(int(log.initial_sites[i]))
    jumps: dict[int, list[Jump]] = defaultdict(list)
    for k in range(log.n_events):
        jumps[int(root[n0 + k])].append(Jump(
            float(log.times[k]),
            ParticleType(int(log.site_a[k]), int(log.mass_a[k])),
            ParticleType(int(log.site_b[k]), int(log.mass_b[k])),
            int(log.target[k])))
    trees = tuple(Trajectory(Configuration.atoms(atoms[r]), tuple(jumps[r]), log.T)
                  for r in sorted(atoms))
    return TreeForest(trees, log.N)


def r_functional(xi: Trajectory, eta: Trajectory, K: KernelSpec, T: float | None = None) -> float:
    """R^T(xi, eta) = int_0^T <xi_t, K eta_t> dt, exact over the merged jump grid."""
    T = xi.T if T is None else T
    tx = [j.t for j in xi.jumps]
    te = [j.t for j in eta.jumps]
    grid = sorted(set([0.0, T] + [t for t in tx + te if t < T]))
    cache: dict[tuple[int, int], float] = {}
    total = 0.0
    for lo, hi in zip(grid[:-1], grid[1:]):
        i = _piece_index(tx, lo)
        j = _piece_index(te, lo)
        v = cache.get((i, j))
        if v is None:
            v = cache[(i, j)] = bilinear(K, xi.states[i], eta.states[j])
        total += (hi - lo) * v
    return total


def _piece_index(times: list[float], t: float) -> int:
    # number of jumps at or before t (right-continuous state index)
    lo, hi = 0, len(times)
    while lo < hi:
        mid = (lo + hi) // 2
        if times[mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    return lo


def varphi_density(xi: Trajectory, K: KernelSpec, T: float | None = None) -> float:
    """1/2 int_0^T (<xi_t, K xi_t> - <xi_t, K^diag>) dt."""
    T = xi.T if T is None else T
    total = 0.0
    for lo, hi, phi in xi.pieces():
        hi = min(hi, T)
        if hi <= lo or phi.particle_count < 2:
            continue
        diag = sum(c * K(p, p) for p, c in phi.items())
        total += 0.5 * (hi - lo) * (bilinear(K, phi, phi) - diag)
    return total


def interaction_energy(nu: EmpiricalTreeMeasure, K: KernelSpec, T: float | None = None,
                       include_diagonal: bool = True) -> float:
    """sum_{i,j} w_i w_j R^T(xi_i, xi_j); diagonal optional."""
    entries = nu.entries
    if not entries:
        return 0.0
    T = entries[0][1].T if T is None else T
    w = np.array([e[0] for e in entries])
    if K.variant == "multiplicative":
        n = np.array([e[1].size for e in entries], dtype=float)
        full = T * float(w @ n) ** 2
        return full if include_diagonal else full - T * float(np.sum((w * n) ** 2))
    total = 0.0
    for i in range(len(entries)):
        if include_diagonal:
            total += w[i] * w[i] * r_functional(entries[i][1], entries[i][1], K, T)
        for j in range(i + 1, len(entries)):
            total += 2.0 * w[i] * w[j] * r_functional(entries[i][1], entries[j][1], K, T)
    return float(total)


@dataclass(frozen=True)
class Observables:
    L: tuple[int, ...]
    non_gel_mass: tuple[float, ...]
    size_hist: tuple[tuple[int, int], ...]
    second_moment: float
    N: float


def observables_from_sizes(sizes: Sequence[int], N: float, L_list: Sequence[int]) -> Observables:
    sizes = np.asarray(sizes, dtype=np.int64)
    ng = tuple(float(sizes[sizes <= L].sum()) / N for L in L_list)
    vals, counts = np.unique(sizes, return_counts=True)
    hist = tuple((int(v), int(c)) for v, c in zip(vals, counts))
    m2 = float(np.sum(sizes.astype(float) ** 2)) / N
    return Observables(tuple(int(L) if math.isfinite(L) else L for L in L_list), ng, hist, m2, N)


def observables(forest: TreeForest, L_list: Sequence[int]) -> Observables:
    """Non-L-gel mass per L, the size histogram and the second size moment."""
    return observables_from_sizes(forest.sizes, forest.N, L_list)
