"""Configurations, coagulation trajectories and weighted tree measures.

A configuration is a finite point measure on sites x masses, stored as a
sparse ``{(site, mass): count}`` map.  A trajectory is stored in chart form:
an all-atoms initial configuration plus the ordered list of merge events,
which is exact and makes every time integral a finite sum over pieces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np


class PairNotPresentError(ValueError):
    pass


class TimeOutOfRangeError(ValueError):
    pass


class ParticleType(NamedTuple):
    site: int
    mass: int


@dataclass(frozen=True)
class SiteSpace:
    """Finite site set with a probability vector of initial intensities."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w:
            raise ValueError("site space needs at least one site")
        if any(x < 0 for x in w):
            raise ValueError("site weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"site weights sum to {sum(w)!r}, expected 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, site_count: int) -> "SiteSpace":
        return cls(tuple([1.0 / site_count] * site_count))

    @property
    def site_count(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


class Configuration(Mapping):
    """Immutable finite point measure on (site, mass) pairs."""

    __slots__ = ("_counts", "_hash")

    def __init__(self, counts: Mapping | Iterable = ()):
        items = counts.items() if isinstance(counts, Mapping) else counts
        data: dict[ParticleType, int] = {}
        for key, c in items:
            p = ParticleType(int(key[0]), int(key[1]))
            c = int(c)
            if c < 0:
                raise ValueError(f"negative count for {p}")
            if p.mass < 1:
                raise ValueError(f"mass must be >= 1, got {p}")
            if c:
                data[p] = data.get(p, 0) + c
        self._counts = data
        self._hash = None

    @classmethod
    def atoms(cls, sites: Iterable[int]) -> "Configuration":
        out: dict[tuple[int, int], int] = {}
        for s in sites:
            out[(int(s), 1)] = out.get((int(s), 1), 0) + 1
        return cls(out)

    def __getitem__(self, key) -> int:
        return self._counts.get(ParticleType(*key), 0)

    def __iter__(self) -> Iterator[ParticleType]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def __contains__(self, key) -> bool:
        return ParticleType(*key) in self._counts

    def items(self):
        return self._counts.items()

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._counts.items()))
        return self._hash

    def __eq__(self, other) -> bool:
        if isinstance(other, Configuration):
            return self._counts == other._counts
        return NotImplemented

    def __repr__(self) -> str:
        body = ", ".join(f"({p.site},{p.mass}):{c}" for p, c in sorted(self._counts.items()))
        return f"Configuration({{{body}}})"

    def __add__(self, other: "Configuration") -> "Configuration":
        out = dict(self._counts)
        for p, c in other._counts.items():
            out[p] = out.get(p, 0) + c
        return Configuration(out)

    @property
    def particle_count(self) -> int:
        """|phi|, the number of particles."""
        return sum(self._counts.values())

    @property
    def total_mass(self) -> int:
        """||phi||_1."""
        return sum(p.mass * c for p, c in self._counts.items())

    def key(self) -> tuple:
        """Canonical hashable key (sorted items)."""
        return tuple(sorted(self._counts.items()))

    def to_rows(self) -> list[list[int]]:
        return [[p.site, p.mass, c] for p, c in sorted(self._counts.items())]

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[int]]) -> "Configuration":
        return cls(((r[0], r[1]), r[2]) for r in rows)


def config_apply_step(phi: Configuration, pair, target_site: int) -> Configuration:
    """Merge one particle of each type in ``pair`` into a particle at ``target_site``."""
    a = ParticleType(*pair[0])
    b = ParticleType(*pair[1])
    counts = dict(phi.items())
    need = {a: 2} if a == b else {a: 1, b: 1}
    for p, n in need.items():
        if counts.get(p, 0) < n:
            raise PairNotPresentError(f"configuration lacks {n} particle(s) of type {tuple(p)}")
    for p, n in need.items():
        counts[p] -= n
    new = ParticleType(int(target_site), a.mass + b.mass)
    counts[new] = counts.get(new, 0) + 1
    return Configuration(counts)


def mass_below(phi: Configuration, L: float = math.inf) -> int:
    """||phi||_{1,<=L}: mass carried by particles of mass at most ``L``."""
    return sum(p.mass * c for p, c in phi.items() if p.mass <= L)


class Jump(NamedTuple):
    t: float
    a: ParticleType
    b: ParticleType
    z: int


@dataclass(frozen=True)
class Trajectory:
    """One-particle coagulation trajectory on [0, T] in chart form."""

    initial: Configuration
    jumps: tuple[Jump, ...] = ()
    T: float = 1.0
    _states: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(p.mass != 1 for p in self.initial):
            raise ValueError("initial configuration must consist of atoms")
        jumps = tuple(Jump(float(j[0]), ParticleType(*j[1]), ParticleType(*j[2]), int(j[3]))
                      for j in self.jumps)
        object.__setattr__(self, "jumps", jumps)
        prev = -math.inf
        for j in jumps:
            if j.t < prev:
                raise ValueError("jump times must be nondecreasing")
            if j.t < 0 or j.t > self.T:
                raise ValueError(f"jump at t={j.t} outside [0, {self.T}]")
            prev = j.t
        states = [self.initial]
        for j in jumps:
            states.append(config_apply_step(states[-1], (j.a, j.b), j.z))
        if self.initial.particle_count and states[-1].particle_count != 1:
            raise ValueError("trajectory must end in a single particle")
        object.__setattr__(self, "_states", tuple(states))

    @property
    def size(self) -> int:
        """|xi_0|, the number of atoms."""
        return self.initial.particle_count

    @property
    def states(self) -> tuple[Configuration, ...]:
        """Configurations on consecutive pieces: states[i] holds on [t_i, t_{i+1})."""
        return self._states

    @property
    def final(self) -> Configuration:
        return self._states[-1]

    def pieces(self) -> list[tuple[float, float, Configuration]]:
        """(start, end, configuration) for every piece of positive or zero length."""
        times = [0.0] + [j.t for j in self.jumps] + [self.T]
        return [(times[i], times[i + 1], self._states[i]) for i in range(len(self._states))]

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "initial": self.initial.to_rows(),
            "jumps": [{"t": j.t, "a": list(j.a), "b": list(j.b), "z": j.z} for j in self.jumps],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Trajectory":
        jumps = [(j["t"], tuple(j["a"]), tuple(j["b"]), j["z"]) for j in d["jumps"]]
        return cls(Configuration.from_rows(d["initial"]), tuple(jumps), float(d.get("T", 1.0)))


def trajectory_at(xi: Trajectory, t: float) -> Configuration:
    """Right-continuous evaluation: all jumps at times <= t are applied."""
    if t < 0 or t > xi.T:
        raise TimeOutOfRangeError(f"t={t} outside [0, {xi.T}]")
    k = 0
    for j in xi.jumps:
        if j.t <= t:
            k += 1
        else:
            break
    return xi.states[k]


@dataclass(frozen=True)
class EmpiricalTreeMeasure:
    """Finite weighted collection of trajectories."""

    entries: tuple[tuple[float, Trajectory], ...]

    def __post_init__(self):
        entries = tuple((float(w), tr) for w, tr in self.entries)
        if any(w <= 0 for w, _ in entries):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def uniform(cls, trees: Iterable[Trajectory], N: float) -> "EmpiricalTreeMeasure":
        return cls(tuple((1.0 / N, tr) for tr in trees))

    @property
    def total_weight(self) -> float:
        return sum(w for w, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def marginal(self, t: float) -> dict[ParticleType, float]:
        """Time-t marginal: sum of weight * xi_t over entries."""
        out: dict[ParticleType, float] = {}
        for w, tr in self.entries:
            for p, c in trajectory_at(tr, t).items():
                out[p] = out.get(p, 0.0) + w * c
        return out


def dumps_trajectory(xi: Trajectory) -> str:
    return json.dumps(xi.to_json())


def loads_trajectory(s: str) -> Trajectory:
    return Trajectory.from_json(json.loads(s))
