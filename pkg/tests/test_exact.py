import math

import numpy as np
import pytest

from cases import PME
from minmove.exact import (ExactSolution, RegimeError, error_norms, evaluate, exact_field, relative_error_norms,
                           sample_trajectory, support_hull_family)
from minmove.geometry import SpatialMask, check_nondecreasing, cylinder
from minmove.grid import Field, Lattice
from minmove.integrand import IntegrandSpec
from minmove.scheme import SchemeConfig, run

PME_SOL = ExactSolution("barenblatt_pme", **PME)
PLAP_SOL = ExactSolution("barenblatt_plaplace", p=3.0, t0=0.1, C=0.2)


def test_heat_initial_profile():
    sol = ExactSolution("heat_separable", C=2.0)
    x = np.array([[0.5, 0.5], [0.25, 0.5], [0.0, 0.3]])
    np.testing.assert_allclose(evaluate(sol, x, 0.0)[:, 0], [2.0, 2 * math.sin(math.pi / 4), 0.0], atol=1e-15)
    assert evaluate(sol, x[:1], 0.1)[0, 0] == pytest.approx(2 * math.exp(-2 * math.pi ** 2 * 0.1))


@pytest.mark.parametrize("sol", [PME_SOL, PLAP_SOL])
def test_zero_outside_support_and_positive_inside(sol):
    t = sol.t0 + 0.3
    R = float(sol.support_radius(t))
    dirs = np.array([[1.0, 0.0], [0.6, 0.8], [-0.28, 0.96]])
    outside = evaluate(sol, dirs * R * 1.001, t)[:, 0]
    inside = evaluate(sol, dirs * R * 0.999, t)[:, 0]
    assert np.all(outside == 0.0) and np.all(inside > 0.0)


@pytest.mark.parametrize("sol", [PME_SOL, PLAP_SOL])
def test_radial_symmetry(sol):
    t = sol.t0 + 0.2
    ang = np.linspace(0, 2 * np.pi, 13)
    x = 0.3 * np.stack([np.cos(ang), np.sin(ang)], -1)
    vals = evaluate(sol, x, t)[:, 0]
    np.testing.assert_allclose(vals, vals[0], rtol=1e-13)


@pytest.mark.parametrize("sol, power", [(PME_SOL, PME["q"]), (PLAP_SOL, 1.0)])
def test_conserved_mass(sol, power):
    # the conserved quantity is int [[u]]^q
    lat = Lattice.box((-1.5, -1.5), (1.5, 1.5), (257, 257))
    masses = [float(np.sum(exact_field(sol, lat, sol.t0 + s).values ** power)) * lat.cell_volume
              for s in (0.0, 0.5, 1.0)]
    assert max(masses) / min(masses) - 1 < 5e-3


def _radial_pde_residual(sol, r, t, dr=1e-4, dt=1e-6):
    """(d_t w - radial operator) / |d_t w| at radius r, w = [[u]]^q."""
    def w(rr, tt):
        return evaluate(sol, np.array([[rr, 0.0]]), tt)[0, 0] ** sol.q

    wt = (w(r, t + dt) - w(r, t - dt)) / (2 * dt)
    if sol.kind == "barenblatt_pme":
        g = lambda rr: w(rr, t) ** sol.m  # noqa: E731
        flux = lambda rr: rr * (g(rr + dr / 2) - g(rr - dr / 2)) / dr  # noqa: E731
    else:
        g = lambda rr: w(rr, t)  # noqa: E731

        def flux(rr):
            d = (g(rr + dr / 2) - g(rr - dr / 2)) / dr
            return rr * abs(d) ** (sol.p - 2) * d
    lap = (flux(r + dr / 2) - flux(r - dr / 2)) / dr / r
    return abs(wt - lap) / abs(wt)


@pytest.mark.parametrize("sol", [PME_SOL, PLAP_SOL])
@pytest.mark.parametrize("frac", [0.2, 0.5, 0.8])
def test_profiles_solve_their_equation(sol, frac):
    t = sol.t0 + 0.4
    r = frac * float(sol.support_radius(t))
    assert _radial_pde_residual(sol, r, t) < 1e-4


def test_heat_solves_heat_equation():
    sol = ExactSolution("heat_separable")
    x0, t, d = np.array([0.3, 0.6]), 0.02, 1e-4
    u = lambda x, tt: evaluate(sol, x[None], tt)[0, 0]  # noqa: E731
    ut = (u(x0, t + 1e-6) - u(x0, t - 1e-6)) / 2e-6
    lap = sum((u(x0 + e, t) - 2 * u(x0, t) + u(x0 - e, t)) / d ** 2 for e in np.eye(2) * d)
    assert ut == pytest.approx(lap, rel=1e-5)


def test_support_hull_is_nondecreasing():
    lat = Lattice.box((-1, -1), (1, 1), (49, 49))
    fam = support_hull_family(PME_SOL, 0.1, np.linspace(0, 0.9, 10), lat)
    assert check_nondecreasing(fam)
    x = lat.coords()
    u0 = exact_field(PME_SOL, lat, PME_SOL.t0).values[..., 0]
    assert np.all(u0[~fam.slices[0].cells] == 0)
    with pytest.raises(ValueError):
        support_hull_family(PME_SOL, 0.0, [0.0, 1.0], lat)
    assert x.shape == (49, 49, 2)


@pytest.mark.parametrize("kwargs", [dict(kind="heat_separable", q=0.5), dict(kind="barenblatt_pme", p=3.0),
                                    dict(kind="barenblatt_plaplace", q=0.5)])
def test_regime_errors(kwargs):
    with pytest.raises(RegimeError):
        ExactSolution(**kwargs)


def test_heat_has_no_support_radius_and_fast_diffusion_rejected():
    with pytest.raises(RegimeError):
        ExactSolution("heat_separable").support_radius(1.0)
    with pytest.raises(RegimeError):
        ExactSolution("barenblatt_plaplace", p=1.5).support_radius(1.0)
    with pytest.raises(ValueError):
        evaluate(PME_SOL, np.zeros((1, 2)), 0.05)


def test_sampled_trajectory_has_zero_error():
    lat = Lattice.box((-1, -1), (1, 1), (17, 17))
    tr = sample_trajectory(PME_SOL, lat, 4, 0.4)
    assert error_norms(tr, PME_SOL) == (0.0, 0.0)
    assert relative_error_norms(tr, PME_SOL) == (0.0, 0.0)


def test_scheme_is_first_order_in_time():
    # fine 1D lattice so the time error dominates
    sol = ExactSolution("heat_separable", n=1)
    lat = Lattice.box(0, 1, 101)
    T = 0.1
    errs = []
    for ell in (4, 8, 16):
        cfg = SchemeConfig(ell, T, 1.0, cylinder(SpatialMask.full(lat), T), IntegrandSpec(),
                           exact_field(sol, lat, 0.0), Field.zeros(lat), competitors=0)
        traj, _ = run(cfg)
        errs.append(error_norms(traj, sol)[1])
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders >= 0.7) & (orders <= 1.3)), orders
