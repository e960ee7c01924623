import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ks_uniform_statistic
from mlcoag.kernels import KernelSpec, PlacementSpec, compute_H
from mlcoag.measures import Configuration, EmpiricalTreeMeasure, SiteSpace
from mlcoag.reference import (SizeLimitExceededError, expected_q_mass,
                              log_m_moment_bound, log_sigma_closed_form, m_moment_bound, mc_q_limit, q_mass,
                              q_mass_bound, sample_tree, sigma_closed_form, sigma_recursion,
                              size_mass_table)
from mlcoag.simulator import SimConfig, simulate
from mlcoag.trajectories import (decompose, final_sizes, interaction_energy, observables,
                                 r_functional, varphi_density)

MULT = KernelSpec.multiplicative()
ADD = KernelSpec.additive()
CONST = KernelSpec.constant(1.0)


def atoms(n, site=0):
    return Configuration.atoms([site] * n)


# sigma and q_mass

def test_sigma_examples():
    assert sigma_recursion(atoms(1), MULT) == 1
    assert sigma_recursion(atoms(3), MULT) == 6
    assert sigma_recursion(atoms(3), ADD) == 18
    assert sigma_recursion(atoms(3), CONST) == 3


def test_sigma_size_guard():
    with pytest.raises(SizeLimitExceededError):
        sigma_recursion(atoms(13), MULT)
    with pytest.raises(SizeLimitExceededError):
        q_mass(13, 1.0, MULT)


@pytest.mark.parametrize("K", [MULT, ADD, KernelSpec.constant(0.7)])
def test_sigma_closed_forms_match_recursion(K):
    for n in range(1, 9):
        assert sigma_recursion(atoms(n), K) == pytest.approx(sigma_closed_form(n, K), rel=1e-12)


def test_sigma_matches_brute_force_spatial():
    # brute force over labelled particles carrying (site, mass) with a deterministic placement
    phi = np.array([[1.0, 0.4], [0.4, 2.0]])
    K = KernelSpec.spatial_product(phi)
    tab = np.zeros((2, 2, 2))
    tab[0, 0, 0] = tab[1, 1, 1] = 1
    tab[0, 1, 1] = tab[1, 0, 1] = 1
    U = PlacementSpec("fixed_table", tab)

    def total(parts):
        if len(parts) == 1:
            return 1.0
        s = 0.0
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                (x, m), (y, mm) = parts[i], parts[j]
                rest = [p for k, p in enumerate(parts) if k not in (i, j)]
                z = 1 if (x, y) != (0, 0) else 0
                s += phi[x, y] * m * mm * total(rest + [(z, m + mm)])
        return s

    sites = [0, 0, 1, 1]
    assert sigma_recursion(Configuration.atoms(sites), K, U) == pytest.approx(total([(s, 1) for s in sites]))


def test_q_mass_examples():
    T = 0.37
    assert q_mass(1, T, MULT) == 1
    assert q_mass(2, T, MULT) == pytest.approx(T)
    assert q_mass(3, T, MULT) == pytest.approx(3 * T * T)
    assert q_mass(4, T, MULT) == pytest.approx(16 * T ** 3)


def test_q_mass_bound_examples():
    assert q_mass_bound(1, 1, 1) == 1
    assert q_mass_bound(3, 1, 1) == 40.5
    assert q_mass_bound(2, 1, 1) == 4


def test_m_moment_bound_at_unit_parameters():
    assert m_moment_bound(1, 1, 1, 1) == pytest.approx(math.e ** 2 / (2 * math.pi), rel=1e-12)
    assert m_moment_bound(1, 1, 1, 1) == pytest.approx(1.17600, abs=1e-5)


@given(st.floats(0.05, 2), st.floats(0.2, 3), st.floats(0.2, 2))
def test_m_moment_bound_ratio(T, H, b):
    r = log_m_moment_bound(400, T, H, b) - log_m_moment_bound(399, T, H, b)
    assert math.exp(r) == pytest.approx(b * T * H * math.e ** 2 * (399 / 400) ** 2, rel=1e-9)
    assert m_moment_bound(3, T, H, b) == pytest.approx(math.exp(log_m_moment_bound(3, T, H, b)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0.01, 5),
       st.sampled_from([MULT, ADD, CONST, KernelSpec.constant(2.5),
                        KernelSpec.spatial_product([[1.0, 0.3], [0.3, 0.6]])]))
def test_q_mass_below_bound(n, T, K):
    H, _ = compute_H(K)
    sites = [i % 2 for i in range(n)] if K.variant == "spatial_product" else [0] * n
    assert q_mass(sites, T, K) <= q_mass_bound(n, T, H) * (1 + 1e-12)


def test_size_mass_table_entries():
    T = 0.3
    tab = size_mass_table(MULT, PlacementSpec(), SiteSpace((1.0,)), T, 1.0, 30)
    for n in (1, 2, 5, 30):
        assert tab.M[n - 1] == pytest.approx(n ** (n - 2) * T ** (n - 1) / math.factorial(n), rel=1e-10)
    b = 0.6
    tab = size_mass_table(CONST, PlacementSpec(), SiteSpace((1.0,)), T, b, 6)
    for n in range(1, 7):
        assert tab.M[n - 1] == pytest.approx(math.exp(1 - b) * b ** n * (T / 2) ** (n - 1), rel=1e-10)
    assert tab.method[0] == "closed_form"


def test_size_mass_table_spatial_exact_and_mc():
    K = KernelSpec.spatial_product([[1.0, 0.5], [0.5, 1.0]])
    space = SiteSpace((0.5, 0.5))
    tab = size_mass_table(K, PlacementSpec(), space, 0.2, 1.0, 4, exact_max=3, mc_samples=4000, seed=1)
    assert tab.method == ("exact", "exact", "exact", "mc")
    exact4 = expected_q_mass(4, 0.2, K, PlacementSpec(), space) / math.factorial(4)
    assert abs(tab.M[3] - exact4) < 4 * tab.std_err[3]
    H, _ = compute_H(K)
    assert all(M <= m_moment_bound(int(n), 0.2, H, 1.0) for n, M in zip(tab.sizes(), tab.M))


def test_expected_q_mass_two_sites_by_hand():
    # two atoms, sites iid uniform: pair rate phi(x, y), q = T * E phi(X, Y)
    phi = [[1.0, 0.2], [0.2, 3.0]]
    K = KernelSpec.spatial_product(phi)
    want = 0.7 * np.mean(phi)
    assert expected_q_mass(2, 0.7, K, PlacementSpec(), SiteSpace((0.5, 0.5))) == pytest.approx(want)


# Monte Carlo limit

def test_mc_q_limit_single_atom():
    rows = mc_q_limit([0], 1.0, MULT, [10, 100], 100)
    assert all(r.estimate == 1 and r.std_err == 0 for r in rows)


@pytest.mark.parametrize("T", [0.1, 0.5])
@pytest.mark.parametrize("n", [2, 3])
def test_mc_q_limit_consistent_with_q_mass(T, n):
    q = q_mass(n, T, MULT)
    for r in mc_q_limit([0] * n, T, MULT, [50, 5000], 200_000, seed=n):
        lower = q * math.exp(-0.5 * T * n * n / r.N)
        assert lower - 3 * r.std_err <= r.estimate <= q + 3 * r.std_err


def test_direct_and_tilted_estimators_agree():
    # small N where the plain frequency is resolvable
    k = [0, 0, 0]
    d = mc_q_limit(k, 1.0, MULT, [3.0], 200_000, method="direct", seed=1)[0]
    t = mc_q_limit(k, 1.0, MULT, [3.0], 200_000, method="tilted", seed=2)[0]
    assert abs(d.estimate - t.estimate) < 4 * math.hypot(d.std_err, t.std_err)
    # exact finite-N value for N = 3: rates 3/N then 2/N
    a, b_ = 1.0, 2.0 / 3.0
    p = 1 - (b_ * math.exp(-a) - a * math.exp(-b_)) / (b_ - a)
    assert abs(d.estimate - 9 * p) < 4 * d.std_err


def test_mc_q_limit_spatial_direct_vs_tilted():
    K = KernelSpec.spatial_product([[1.0, 0.2], [0.2, 2.0]])
    k = [0, 1, 1]
    d = mc_q_limit(k, 1.0, K, [2.0], 200_000, PlacementSpec("uniform_pair"), method="direct", seed=3)[0]
    t = mc_q_limit(k, 1.0, K, [2.0], 200_000, PlacementSpec("uniform_pair"), method="tilted", seed=4)[0]
    assert abs(d.estimate - t.estimate) < 4 * math.hypot(d.std_err, t.std_err)


# tree sampling

def test_sample_tree_single_atom():
    tr, w = sample_tree([0], 1.0, MULT, PlacementSpec(), np.random.default_rng(0))
    assert tr.size == 1 and tr.jumps == () and w == 1


def test_sample_tree_two_atoms_uniform_time():
    rng = np.random.default_rng(1)
    times = [sample_tree([0, 0], 2.0, MULT, PlacementSpec(), rng)[0].jumps[0].t for _ in range(10_000)]
    # 1% critical value of the KS statistic
    assert ks_uniform_statistic(times, 0.0, 2.0) < 1.63 / math.sqrt(10_000)


def test_sample_tree_first_pair_uniform():
    # three atoms on distinct sites so the first merged pair is identifiable
    K = KernelSpec.spatial_product(np.ones((3, 3)))
    rng = np.random.default_rng(2)
    counts = {}
    reps = 6000
    for _ in range(reps):
        j = sample_tree([0, 1, 2], 1.0, K, PlacementSpec(), rng)[0].jumps[0]
        key = tuple(sorted((j.a.site, j.b.site)))
        counts[key] = counts.get(key, 0) + 1
    chi2 = sum((c - reps / 3) ** 2 / (reps / 3) for c in counts.values())
    assert len(counts) == 3 and chi2 < 9.21


def test_sample_tree_self_normalisation():
    rng = np.random.default_rng(3)
    for K in (MULT, ADD):
        w = np.array([sample_tree([0] * 6, 0.5, K, PlacementSpec(), rng, exact=False)[1] for _ in range(4000)])
        assert abs(w.mean() - q_mass(6, 0.5, K)) < 4 * w.std() / math.sqrt(len(w)) + 1e-9 * q_mass(6, 0.5, K)
        tr, exact_w = sample_tree([0] * 6, 0.5, K, PlacementSpec(), rng)
        assert exact_w == pytest.approx(q_mass(6, 0.5, K))


def test_sample_tree_beyond_exact_range():
    tr, w = sample_tree([0] * 20, 0.5, MULT, PlacementSpec(), np.random.default_rng(4))
    assert tr.size == 20 and 0 < w < math.inf
    assert tr.final.particle_count == 1


# trajectories

def _forest(seed=0):
    cfg = SimConfig(80, 1.2, KernelSpec.spatial_product([[1.0, 0.4], [0.4, 1.5]]),
                    PlacementSpec(), SiteSpace((0.5, 0.5)), seed=seed)
    log = simulate(cfg)
    return log, decompose(log)


def test_decompose_sizes_match_final_state():
    log, forest = _forest()
    assert sorted(forest.sizes.tolist()) == sorted(final_sizes(log).tolist())
    assert forest.sizes.sum() == log.n0


def test_r_functional_multiplicative_closed_form():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = sample_tree([0] * int(rng.integers(1, 6)), 1.3, MULT, PlacementSpec(), rng)[0]
        b = sample_tree([0] * int(rng.integers(1, 6)), 1.3, MULT, PlacementSpec(), rng)[0]
        assert r_functional(a, b, MULT) == pytest.approx(1.3 * a.size * b.size)


def test_r_functional_constant_counts_particles():
    # one tree merging at t = 0.5 against a single atom: 2*0.5 + 1*0.5
    rng = np.random.default_rng(6)
    a = sample_tree([0, 0], 1.0, CONST, PlacementSpec(), rng)[0]
    b = sample_tree([0], 1.0, CONST, PlacementSpec(), rng)[0]
    t = a.jumps[0].t
    assert r_functional(a, b, CONST) == pytest.approx(2 * t + (1 - t))


def test_varphi_bounds_and_value():
    rng = np.random.default_rng(7)
    for K in (MULT, ADD, CONST):
        H, _ = compute_H(K)
        for _ in range(30):
            n = int(rng.integers(1, 8))
            tr = sample_tree([0] * n, 0.8, K, PlacementSpec(), rng)[0]
            v = varphi_density(tr, K)
            assert 0 <= v <= 0.5 * H * 0.8 * n * n + 1e-12
    tr = sample_tree([0, 0], 1.0, CONST, PlacementSpec(), rng)[0]
    assert varphi_density(tr, CONST) == pytest.approx(tr.jumps[0].t)


def test_interaction_energy_matches_pairwise():
    _, forest = _forest(3)
    nu = forest.measure()
    K = KernelSpec.multiplicative()
    trees = [tr for _, tr in nu.entries]
    w = 1 / forest.N
    brute = sum(w * w * r_functional(a, b, K) for a in trees for b in trees)
    assert interaction_energy(nu, K) == pytest.approx(brute)
    off = sum(w * w * r_functional(a, b, K) for i, a in enumerate(trees) for j, b in enumerate(trees) if i != j)
    assert interaction_energy(nu, K, include_diagonal=False) == pytest.approx(off)
    small = EmpiricalTreeMeasure(nu.entries[:6])
    sp = KernelSpec.spatial_product([[1.0, 0.4], [0.4, 1.5]])
    t6 = [tr for _, tr in small.entries]
    assert interaction_energy(small, sp) == pytest.approx(
        sum(w * w * r_functional(a, b, sp) for a in t6 for b in t6))


def test_observables():
    log, forest = _forest(4)
    obs = observables(forest, [1, 2, 10 ** 9])
    assert obs.non_gel_mass[-1] == pytest.approx(log.n0 / log.N)
    assert obs.non_gel_mass[0] <= obs.non_gel_mass[1] <= obs.non_gel_mass[2]
    assert sum(s * c for s, c in obs.size_hist) == log.n0
