import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlcoag.kernels import (CutoffExceededError, KernelSpec, PlacementSpec, bilinear, compute_H,
                            compute_h, kernel_eval, placement_sample)
from mlcoag.measures import (Configuration, EmpiricalTreeMeasure, Jump, PairNotPresentError,
                             ParticleType, SiteSpace, TimeOutOfRangeError, Trajectory,
                             config_apply_step, dumps_trajectory, loads_trajectory, mass_below,
                             trajectory_at)


def test_site_space_validation():
    assert SiteSpace.uniform(4).site_count == 4
    with pytest.raises(ValueError):
        SiteSpace((0.5, 0.6))
    with pytest.raises(ValueError):
        SiteSpace((-0.5, 1.5))


def test_configuration_basics():
    phi = Configuration.atoms([0, 0, 1])
    assert phi[(0, 1)] == 2 and phi[(1, 1)] == 1 and phi[(5, 1)] == 0
    assert (5, 1) not in phi and (0, 1) in phi
    assert phi.particle_count == 3 and phi.total_mass == 3
    assert Configuration.from_rows(phi.to_rows()) == phi
    assert hash(Configuration.atoms([1, 0, 0])) == hash(phi)


def test_apply_step_and_errors():
    phi = Configuration.atoms([0, 0, 1])
    psi = config_apply_step(phi, ((0, 1), (1, 1)), 1)
    assert psi == Configuration({(0, 1): 1, (1, 2): 1})
    same = config_apply_step(phi, ((0, 1), (0, 1)), 0)
    assert same[(0, 2)] == 1 and same.particle_count == 2
    with pytest.raises(PairNotPresentError):
        config_apply_step(Configuration.atoms([0, 1]), ((0, 1), (0, 1)), 0)
    assert mass_below(psi, 1) == 1 and mass_below(psi) == 3


def _path():
    k = Configuration.atoms([0, 0, 1])
    jumps = [Jump(0.2, ParticleType(0, 1), ParticleType(0, 1), 0),
             Jump(0.7, ParticleType(0, 2), ParticleType(1, 1), 1)]
    return Trajectory(k, tuple(jumps), 1.0)


def test_trajectory_evaluation_right_continuous():
    xi = _path()
    assert trajectory_at(xi, 0.0) == Configuration.atoms([0, 0, 1])
    assert trajectory_at(xi, 0.2)[(0, 2)] == 1
    assert trajectory_at(xi, 1.0) == Configuration({(1, 3): 1})
    with pytest.raises(TimeOutOfRangeError):
        trajectory_at(xi, 1.5)
    assert loads_trajectory(dumps_trajectory(xi)) == xi


def test_trajectory_must_end_in_one_particle():
    with pytest.raises(ValueError):
        Trajectory(Configuration.atoms([0, 0]), (), 1.0)
    with pytest.raises(ValueError):
        Trajectory(Configuration.atoms([0, 0]), ((2.0, (0, 1), (0, 1), 0),), 1.0)


def test_empirical_marginal():
    nu = EmpiricalTreeMeasure.uniform([_path(), _path()], 4)
    assert nu.total_weight == pytest.approx(0.5)
    assert nu.marginal(1.0) == {ParticleType(1, 3): 0.5}


def test_kernel_values():
    a, b = (0, 2), (1, 3)
    assert kernel_eval(KernelSpec.constant(2.5), a, b) == 2.5
    assert kernel_eval(KernelSpec.multiplicative(), a, b) == 6
    assert kernel_eval(KernelSpec.additive(), a, b) == 5
    sp = KernelSpec.spatial_product([[1, 0.5], [0.5, 2]])
    assert kernel_eval(sp, a, b) == 3.0
    tab = np.ones((1, 2, 1, 2))
    with pytest.raises(CutoffExceededError):
        kernel_eval(KernelSpec.from_table(tab), (0, 3), (0, 1))
    with pytest.raises(ValueError):
        KernelSpec.spatial_product([[1, 2], [0, 1]])


def test_H_and_h():
    assert compute_H(KernelSpec.multiplicative()) == (1.0, True)
    assert compute_h(KernelSpec.multiplicative()) == (1.0, True)
    assert compute_H(KernelSpec.additive())[0] == 2.0
    assert compute_h(KernelSpec.constant(3.0))[0] == 0.0
    sp = KernelSpec.spatial_product([[1, 0.5], [0.5, 2]])
    assert compute_H(sp)[0] == 2.0 and compute_h(sp)[0] == 0.5
    m = np.arange(1, 4)
    tab = (m[:, None] * m[None, :] * 0.7)[None, :, None, :]
    H, exact = compute_H(KernelSpec.from_table(tab))
    assert H == pytest.approx(0.7) and not exact


def test_placement():
    U = PlacementSpec()
    assert U.distribution((0, 1), (1, 3)) == {0: 0.25, 1: 0.75}
    assert PlacementSpec("uniform_pair").distribution((0, 1), (1, 3)) == {0: 0.5, 1: 0.5}
    assert U.distribution((2, 1), (2, 5)) == {2: 1.0}
    t = np.zeros((2, 2, 2))
    t[:, :, 1] = 1
    F = PlacementSpec("fixed_table", t)
    rng = np.random.default_rng(0)
    assert {placement_sample(F, (0, 1), (0, 1), rng) for _ in range(20)} == {1}
    draws = [placement_sample(U, (0, 1), (1, 3), rng) for _ in range(20000)]
    assert abs(np.mean(draws) - 0.75) < 0.02


def test_tensor_matches_distribution():
    U = PlacementSpec()
    ten = U.tensor(2, 3)
    for x in range(2):
        for y in range(2):
            for m in range(1, 4):
                for mm in range(1, 4):
                    d = U.distribution((x, m), (y, mm))
                    for z in range(2):
                        assert ten[x, m - 1, y, mm - 1, z] == pytest.approx(d.get(z, 0.0))


def test_kernel_json_roundtrip():
    for K in (KernelSpec.constant(2), KernelSpec.spatial_product([[1, 0.2], [0.2, 1]])):
        assert KernelSpec.from_json(K.to_json()) == K


types = st.tuples(st.integers(0, 2), st.integers(1, 30))
sym_phi = st.lists(st.floats(0, 5), min_size=3, max_size=3).map(
    lambda v: [[v[0], v[1], 0.3], [v[1], v[2], 0.1], [0.3, 0.1, 1.0]])


@given(types, types, sym_phi)
def test_kernel_symmetric_and_bounded_by_H(a, b, phi):
    for K in (KernelSpec.constant(1.3), KernelSpec.multiplicative(), KernelSpec.additive(),
              KernelSpec.spatial_product(phi)):
        assert K(a, b) == K(b, a)
        H, _ = compute_H(K)
        assert K(a, b) <= H * a[1] * b[1] + 1e-12


@given(types, types)
def test_placement_is_probability(a, b):
    for U in (PlacementSpec(), PlacementSpec("uniform_pair")):
        d = U.distribution(a, b)
        assert math.isclose(sum(d.values()), 1.0)
        assert set(d) <= {a[0], b[0]}


@given(st.lists(st.integers(0, 3), min_size=2, max_size=12), st.data())
def test_merge_preserves_mass(sites, data):
    phi = Configuration.atoms(sites)
    while phi.particle_count > 1:
        pool = [p for p, c in phi.items() for _ in range(c)]
        i, j = data.draw(st.lists(st.integers(0, len(pool) - 1), min_size=2, max_size=2, unique=True))
        z = data.draw(st.integers(0, 3))
        new = config_apply_step(phi, (pool[i], pool[j]), z)
        assert new.total_mass == phi.total_mass
        assert new.particle_count == phi.particle_count - 1
        phi = new


@settings(max_examples=50)
@given(st.lists(st.tuples(types, st.integers(1, 4)), max_size=5),
       st.lists(st.tuples(types, st.integers(1, 4)), max_size=5))
def test_bilinear_is_symmetric(v, w):
    K = KernelSpec.additive()
    V, W = Configuration(v), Configuration(w)
    assert bilinear(K, V, W) == pytest.approx(bilinear(K, W, V))
