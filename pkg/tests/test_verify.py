import math

import numpy as np
import pytest

from cases import heat_config
from minmove.geometry import RangeError, SpatialMask, cutoff_eta_sigma, inner_parallel_set
from minmove.grid import Field, Lattice, Trajectory, write_field_csv
from minmove.integrand import IntegrandSpec
from minmove.scheme import run
from minmove.verify import (AdmissibilityError, ComparisonMap, TestFunction, check_admissible,
                            check_continuity_chain, continuity_modulus, default_basis, dual_norm_estimate,
                            hardy_check, initial_condition_check, pairing, parabolic_minimizer_residual,
                            step_tolerances, variational_residual)

SPEC = IntegrandSpec()


def three_node_case():
    # one free node, dx = 1/2, h = 1: the step from a = 1 is c = 1/9
    lat = Lattice.box(0, 1, 3)
    vals = np.array([[0.0, 1.0, 0.0], [0.0, 1 / 9, 0.0]])[..., None]
    return Trajectory(vals, lat, 1.0, q=1.0, p=2.0)


def test_variational_residual_hand_case():
    u = three_node_case()
    v = ComparisonMap.stationary(u, Field.zeros(u.lattice))
    c = variational_residual(u, v, 1.0, SPEC)
    # lhs = c^2/dx, rhs = (a^2 - c^2) dx / 2
    assert c.lhs == pytest.approx(2 / 81, rel=1e-14)
    assert c.rhs == pytest.approx(20 / 81, rel=1e-14)
    assert c.passed
    assert variational_residual(u, v, 0.0, SPEC).lhs == 0.0


def test_variational_residual_is_zero_for_stationary_minimizer():
    lat = Lattice.box(0, 1, 5)
    u = Trajectory(np.zeros((4, 5, 1)), lat, 0.25)
    c = variational_residual(u, ComparisonMap.stationary(u, u.step(0)), 0.75, SPEC)
    assert c.margin == 0.0


def test_variational_rejects_non_scheme_time_and_bad_map():
    u = three_node_case()
    v = ComparisonMap.stationary(u, Field.zeros(u.lattice))
    with pytest.raises(RangeError):
        variational_residual(u, v, 0.5, SPEC)
    bad = ComparisonMap.stationary(u, Field(np.ones(3), u.lattice))
    with pytest.raises(AdmissibilityError, match="node"):
        check_admissible(u, bad)
    with pytest.raises(ValueError):
        ComparisonMap("nonsense", u)


@pytest.mark.parametrize("case", ["heat_small", "pme_small"])
def test_three_comparison_maps_at_every_time(case, request):
    cfg, _, traj, led = request.getfixturevalue(case)
    maps = [ComparisonMap.stationary(traj, cfg.u_star),
            ComparisonMap.mollified_initial(traj, cfg.u_star, 4 * max(traj.lattice.spacing)),
            ComparisonMap.landes(traj, traj.T / 8)]
    for v in maps:
        for m in range(traj.ell + 1):
            c = variational_residual(traj, v, m * traj.h, cfg.spec, led.achieved_tol)
            assert c.passed, c.line()


def test_recomputed_tolerances_match_ledger(heat_small):
    cfg, _, traj, led = heat_small
    np.testing.assert_allclose(step_tolerances(traj, cfg.spec, cfg.u_star), led.achieved_tol, rtol=1e-12)


def test_comparison_map_from_slices(tmp_path, heat_small):
    _, _, traj, _ = heat_small
    for i in range(traj.ell + 1):
        write_field_csv(traj.step(i), tmp_path / f"slice_{i}.csv")
    v = ComparisonMap.from_slices(tmp_path, traj)
    np.testing.assert_array_equal(v.trajectory.values, traj.values)


def test_pairing_vanishes_for_stationary_u_and_is_linear(heat_small):
    _, _, traj, _ = heat_small
    basis = default_basis(traj)
    assert len(basis) == 8
    for phi in basis:
        assert phi.norm == pytest.approx(1.0, rel=1e-12)
    still = traj.with_values(np.repeat(traj.values[3:4], traj.ell + 1, axis=0))
    assert abs(pairing(still, basis[0])) < 1e-14
    a, b = basis[0], basis[5]
    combo = TestFunction(traj.with_values(2.5 * a.profile.values - b.profile.values))
    assert pairing(traj, combo) == pytest.approx(2.5 * pairing(traj, a) - pairing(traj, b), abs=1e-12)


def test_parabolic_residual_sign_flip_and_scaling(heat_small):
    cfg, _, traj, led = heat_small
    for phi in default_basis(traj):
        plus = parabolic_minimizer_residual(traj, phi, cfg.spec, led.achieved_tol)
        minus = parabolic_minimizer_residual(traj, -phi, cfg.spec, led.achieved_tol)
        assert plus.passed and minus.passed
        assert plus.margin + minus.margin >= 0
    phi = default_basis(traj)[2]
    ratios = [parabolic_minimizer_residual(traj, phi.scaled(s), cfg.spec).margin / s for s in (1, 0.5, 0.25)]
    assert ratios[0] > ratios[1] > ratios[2] > -1e-9


def test_parabolic_residual_zero_and_support(heat_small):
    cfg, _, traj, _ = heat_small
    zero = TestFunction(traj.with_values(np.zeros_like(traj.values)))
    assert parabolic_minimizer_residual(traj, zero, cfg.spec).margin == 0.0
    bad = np.zeros_like(traj.values)
    bad[1, 0, 0] = 1.0
    with pytest.raises(AdmissibilityError):
        parabolic_minimizer_residual(traj, TestFunction(traj.with_values(bad)), cfg.spec)
    nonzero_end = np.zeros_like(traj.values)
    nonzero_end[-1, 5, 5] = 1.0
    with pytest.raises(AdmissibilityError):
        TestFunction(traj.with_values(nonzero_end))


def test_dual_estimate(heat_small):
    cfg, _, traj, _ = heat_small
    est = dual_norm_estimate(traj, default_basis(traj), cfg.spec)
    assert 0 < est.lower_bound and 0 < est.ratio < math.inf
    with pytest.raises(ValueError):
        dual_norm_estimate(traj, [])


def test_initial_condition(heat_small):
    cfg, _, traj, _ = heat_small
    lat = traj.lattice
    K = inner_parallel_set(SpatialMask(lat, cfg.family.slices[0].cells), 4 * lat.spacing[0])
    T = traj.T
    rep = initial_condition_check(traj, cfg.u_o, K, [T / 4, T / 8, T / 16])
    assert rep.strictly_decreasing
    const = traj.with_values(np.repeat(traj.values[:1], traj.ell + 1, axis=0))
    assert initial_condition_check(const, cfg.u_o, K, [T / 4, T / 8]).values == [0.0, 0.0]
    with pytest.raises(RangeError):
        initial_condition_check(traj, cfg.u_o, cfg.family.slices[0], [T / 4])


def test_continuity_modulus_shrinks_with_ell():
    mods = []
    for ell in (4, 8):
        cfg, _ = heat_config(16, ell)
        traj, _ = run(cfg)
        mods.append(continuity_modulus(traj))
        assert check_continuity_chain(traj).passed
    assert mods[1] < mods[0]
    still = Trajectory(np.ones((3, 4, 1)), Lattice.box(0, 1, 4), 0.1)
    assert continuity_modulus(still) == 0.0


def test_continuity_chain_on_pme(pme_small):
    _, _, traj, _ = pme_small
    assert check_continuity_chain(traj).passed


def test_hardy():
    lat = Lattice.box((0, 0), (1, 1), (33, 33))
    sq = SpatialMask.full(lat)
    eta = cutoff_eta_sigma(sq, 0.1)
    r = hardy_check(Field(eta, lat), sq, 2.0)
    assert math.isfinite(r.ratio) and r.ratio > 0 and not r.flag
    z = hardy_check(Field.zeros(lat), sq, 2.0)
    assert math.isnan(z.ratio) and "degenerate" in z.flag
    with pytest.raises(AdmissibilityError):
        hardy_check(Field(np.ones(lat.dims), lat), sq, 2.0)


def test_hardy_ratio_bounded_under_refinement():
    # distance profile on a square: the ratio stays near the 1D constant p^p/(p-1)^p = 4
    ratios = []
    for n in (17, 33, 65):
        lat = Lattice.box((0, 0), (1, 1), (n, n))
        m = SpatialMask.full(lat)
        d = np.minimum(np.where(m.cells, np.minimum.reduce(
            [lat.coords()[..., 0], 1 - lat.coords()[..., 0], lat.coords()[..., 1], 1 - lat.coords()[..., 1]]), 0), 0.25)
        ratios.append(hardy_check(Field(d, lat), m, 2.0).ratio)
    assert max(ratios) < 2 * min(ratios) and max(ratios) < 10
