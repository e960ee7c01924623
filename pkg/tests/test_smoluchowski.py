import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import second_moment_ode
from mlcoag.kernels import KernelSpec, PlacementSpec
from mlcoag.measures import SiteSpace
from mlcoag.simulator import SimConfig
from mlcoag.smoluchowski import (DensityGrid, NegativityClampWarning, StabilityWarning, smol_rhs,
                                 smol_solve, smol_vs_simulation)

ONE = SiteSpace((1.0,))
CONST = KernelSpec.constant(1.0)
MULT = KernelSpec.multiplicative()


def constant_kernel_exact(c, t, L):
    # monodisperse start, K = c: rho_n = (ct/2)^(n-1) / (1 + ct/2)^(n+1)
    u = c * t / 2
    n = np.arange(1, L + 1)
    return u ** (n - 1) / (1 + u) ** (n + 1)


def test_rhs_two_mass_example():
    rho = np.zeros((1, 3))
    rho[0, 0] = 0.4
    d = smol_rhs(rho, KernelSpec.constant(2.0))
    # gain at mass 2: (1/2) K rho_1^2, loss at mass 1: K rho_1^2
    assert d[0, 1] == pytest.approx(0.5 * 2.0 * 0.16)
    assert d[0, 0] == pytest.approx(-2.0 * 0.16)
    assert d[0, 2] == 0
    assert not smol_rhs(np.zeros((2, 4)), MULT).any()


def test_rhs_rejects_wrong_width():
    with pytest.raises(ValueError):
        smol_rhs(np.ones((1, 3)), CONST, L=4)


def test_zero_kernel_keeps_density():
    g = DensityGrid.monodisperse(SiteSpace((0.3, 0.7)), 5)
    out = smol_solve(g, KernelSpec.constant(0.0), None, 2.0, 0.1)[-1]
    assert np.array_equal(out.rho, g.rho)


def test_constant_kernel_matches_closed_form():
    L, t = 80, 1.0
    out = smol_solve(DensityGrid.monodisperse(ONE, L), CONST, None, t, 0.01)[-1]
    assert np.abs(out.rho[0] - constant_kernel_exact(1.0, t, L)).max() < 1e-10
    assert out.moment(0) == pytest.approx(1 / (1 + t / 2), abs=1e-10)


def test_multiplicative_second_moment():
    t = 0.5
    out = smol_solve(DensityGrid.monodisperse(ONE, 80), MULT, None, t, 0.01)[-1]
    assert out.moment(2) == pytest.approx(second_moment_ode(t), rel=1e-6)
    assert out.moment(2) == pytest.approx(1 / (1 - t), rel=1e-6)


@pytest.mark.filterwarnings("ignore::mlcoag.smoluchowski.StabilityWarning")
def test_rk4_fourth_order():
    L, t = 40, 2.0
    exact = constant_kernel_exact(1.0, t, L)
    g = DensityGrid.monodisperse(ONE, L)
    errs = [np.abs(smol_solve(g, CONST, None, t, dt)[-1].rho[0] - exact).max() for dt in (0.2, 0.1)]
    ratio = errs[0] / errs[1]
    assert 12 < ratio < 20


def test_snapshots_in_order():
    g = DensityGrid.monodisperse(ONE, 10)
    snaps = smol_solve(g, CONST, None, 1.0, 0.1, [0.0, 0.35, 1.0])
    assert [s.T_current for s in snaps] == [0.0, 0.35, 1.0]
    assert np.array_equal(snaps[0].rho, g.rho)
    with pytest.raises(ValueError):
        smol_solve(g, CONST, None, 1.0, 0.1, [2.0])
    with pytest.raises(ValueError):
        smol_solve(g, CONST, None, 1.0, 0.0)


def test_site_swap_symmetry():
    K = KernelSpec.spatial_product([[1.0, 0.3], [0.3, 2.0]])
    Ksw = KernelSpec.spatial_product([[2.0, 0.3], [0.3, 1.0]])
    rng = np.random.default_rng(1)
    rho = rng.uniform(0, 0.2, (2, 6))
    assert np.allclose(smol_rhs(rho, K), smol_rhs(rho[::-1], Ksw)[::-1])


def test_placement_only_moves_mass_between_sites():
    K = KernelSpec.spatial_product([[1.0, 0.5], [0.5, 1.0]])
    rng = np.random.default_rng(2)
    rho = rng.uniform(0, 0.2, (2, 8))
    tab = np.zeros((2, 2, 2))
    tab[..., 0] = 1
    fixed = smol_rhs(rho, K, PlacementSpec("fixed_table", tab))
    weighted = smol_rhs(rho, K, PlacementSpec())
    uniform = smol_rhs(rho, K, PlacementSpec("uniform_pair"))
    # the loss term and the total gain per mass do not depend on where products go
    assert np.allclose(fixed.sum(axis=0), weighted.sum(axis=0))
    assert np.allclose(uniform.sum(axis=0), weighted.sum(axis=0))
    # with every product sent to site 0, site 1 only loses
    assert np.all(fixed[1] <= 0)


@pytest.mark.filterwarnings("ignore::mlcoag.smoluchowski.StabilityWarning")
@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 6), elements=st.floats(0, 1)), st.sampled_from(["const", "mult", "add"]))
def test_mass_balance_with_leak(rho, name):
    K = {"const": CONST, "mult": MULT, "add": KernelSpec.additive()}[name]
    g = DensityGrid(rho * 0.1)
    out = smol_solve(g, K, PlacementSpec(), 0.5, 0.05)[-1]
    total = out.total_mass() + out.leaked_mass - out.clamped_mass
    assert total == pytest.approx(g.total_mass(), rel=1e-12, abs=1e-14)


def test_large_step_warns_and_clamps():
    g = DensityGrid.monodisperse(ONE, 20)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = smol_solve(g, MULT, None, 1.0, 0.5)[-1]
    kinds = {w.category for w in caught}
    assert StabilityWarning in kinds and NegativityClampWarning in kinds
    assert out.clamped_mass > 0 and np.all(out.rho >= 0)
    assert out.total_mass() + out.leaked_mass - out.clamped_mass == pytest.approx(1.0)


def test_divergence_raises():
    with pytest.raises(FloatingPointError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            smol_solve(DensityGrid.monodisperse(ONE, 30), MULT, None, 3.0, 1.0)


def test_density_grid_validation():
    with pytest.raises(ValueError):
        DensityGrid(np.ones(3))
    with pytest.raises(ValueError):
        DensityGrid(-np.ones((1, 3)))


def test_vs_simulation_prefers_half_convention():
    cfg = SimConfig(20000, 0.08, MULT, seed=3)
    rows = smol_vs_simulation(cfg, 20, 0.01, [0.04, 0.08], replicas=4)
    assert [r["t"] for r in rows] == [0.04, 0.08]
    last = rows[-1]
    assert last["distance"] < 5 * last["mc_err"] + 1e-3
    assert last["distance_no_half"] > 2 * last["distance"]
    assert all(math.isfinite(r["distance"]) for r in rows)
