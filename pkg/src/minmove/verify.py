"""A-posteriori certificates for a computed trajectory.

Each discrete inequality here is the sum over steps of the per-step
minimality inequality tested with a specific admissible competitor, so it
holds exactly for exact step minimizers; inexact steps contribute
``tol_i * ||competitor_i - u_i||_{L^1}`` per step to the slack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .algebra import boundary_term_b, derive_lemma_constant, power_map
from .checks import Check
from .geometry import (RangeError, SpatialMask, cutoff_eta_sigma, distance_to_complement,
                       inner_parallel_set, measure_density_estimate, mollify_initial_datum,
                       slice_mask)
from .grid import Field, Trajectory, _vec_norm, gradient_array, read_field_csv, vp_norm
from .integrand import IntegrandSpec
from .minimizer import EPS, StepProblem, step_residual
from .mollify import difference_quotient, landes_mollify

COMPARISON_KINDS = ("stationary_u_star", "stationary_mollified_u_o", "landes_of_solution", "user_csv")


class AdmissibilityError(ValueError):
    pass


def _slice_cells(traj: Trajectory, i: int) -> np.ndarray:
    if traj.family is None:
        m = np.zeros(traj.lattice.dims, bool)
        m[tuple(slice(1, d - 1) for d in traj.lattice.dims)] = True
        return m
    return slice_mask(traj.family, i * traj.h).cells


def _f_int(spec: IntegrandSpec, values: np.ndarray, lattice) -> np.ndarray:
    """``int f`` per time entry."""
    xi = gradient_array(values, lattice)
    axes = tuple(range(1, values.ndim - 1))
    return np.sum(spec.density(values, xi), axis=axes) * lattice.cell_volume


def _l1(values: np.ndarray, lattice) -> np.ndarray:
    axes = tuple(range(1, values.ndim - 1))
    return np.sum(_vec_norm(values), axis=axes) * lattice.cell_volume


def step_tolerances(u: Trajectory, spec: IntegrandSpec, u_star: Field) -> np.ndarray:
    """Recompute each step's first-order residual (``achieved_tol``) from the stored steps."""
    tol = np.zeros(u.ell + 1)
    for i in range(1, u.ell + 1):
        prob = StepProblem(spec, u.step(i - 1), u_star, _slice_cells(u, i), u.h, u.q)
        tol[i] = step_residual(prob, u.values[i])
    return tol


# ---------------------------------------------------------------------------
# comparison maps


@dataclass
class ComparisonMap:
    kind: str
    trajectory: Trajectory
    time_derivative: Trajectory = None

    def __post_init__(self):
        if self.kind not in COMPARISON_KINDS:
            raise ValueError(f"unknown comparison kind {self.kind!r}")
        if self.time_derivative is None:
            self.time_derivative = difference_quotient(self.trajectory, 1, backward=True)
        if not np.all(np.isfinite(self.time_derivative.values)):
            raise AdmissibilityError("comparison map has a non-finite time derivative")

    @classmethod
    def stationary(cls, u: Trajectory, value: Field, kind: str = "stationary_u_star") -> "ComparisonMap":
        vals = np.repeat(value.values[None], u.ell + 1, axis=0)
        return cls(kind, u.with_values(vals))

    @classmethod
    def mollified_initial(cls, u: Trajectory, u_star: Field, epsilon: float) -> "ComparisonMap":
        mask0 = SpatialMask(u.lattice, _slice_cells(u, 0))
        return cls.stationary(u, mollify_initial_datum(u.step(0), u_star, mask0, epsilon),
                              "stationary_mollified_u_o")

    @classmethod
    def landes(cls, u: Trajectory, lam: float, v_o: Optional[Field] = None) -> "ComparisonMap":
        """``[u]_lam`` started from ``v_o`` (default ``u(0)``); a convex combination of
        earlier steps, hence equal to ``u_*`` off every later slice."""
        return cls("landes_of_solution", landes_mollify(u, lam, u.step(0) if v_o is None else v_o))

    @classmethod
    def from_slices(cls, directory, u: Trajectory) -> "ComparisonMap":
        """Read ``slice_<i>.csv`` for ``i = 0..ell`` from ``directory``."""
        d = Path(directory)
        vals = [read_field_csv(d / f"slice_{i}.csv", u.lattice).values for i in range(u.ell + 1)]
        return cls("user_csv", u.with_values(np.stack(vals)))


def check_admissible(u: Trajectory, v: ComparisonMap) -> None:
    """``v_i`` must coincide with ``u_i`` (which equals ``u_*``) off slice ``i``."""
    vv = v.trajectory.values
    if vv.shape != u.values.shape:
        raise AdmissibilityError("comparison map and solution have different shapes")
    for i in range(u.ell + 1):
        off = ~_slice_cells(u, i)
        bad = np.any(vv[i][off] != u.values[i][off], axis=-1)
        if bad.any():
            node = tuple(int(k) for k in np.argwhere(off)[int(np.argmax(bad))])
            raise AdmissibilityError(f"comparison map leaves the boundary values at step {i}, node {node}")


def _scheme_index(u: Trajectory, tau: float) -> int:
    m = int(round(tau / u.h))
    if abs(m * u.h - tau) > 1e-9 * u.h or not 0 <= m <= u.ell:
        raise RangeError(f"tau = {tau} is not a scheme time")
    return m


def variational_residual(u: Trajectory, v: ComparisonMap, tau: float, spec: IntegrandSpec,
                         achieved_tol: Optional[np.ndarray] = None) -> Check:
    """Discrete variational inequality at the scheme time ``tau = m h``.

    ``lhs = sum_{i<=m} h int f(u_i)``;
    ``rhs = sum_{i<=m} h [int f(v_i) + int (v_i - v_{i-1})/h . ([[v_i]]^q - [[u_{i-1}]]^q)]
           - int b[u_m, v_m] + int b[u_0, v_0]``.

    ``achieved_tol`` defaults to zero (exact steps); pass the ledger's values.
    """
    check_admissible(u, v)
    m = _scheme_index(u, tau)
    q, h, lat = u.q, u.h, u.lattice
    dv = lat.cell_volume
    U, V = u.values[: m + 1], v.trajectory.values[: m + 1]
    fu = _f_int(spec, U[1:], lat)
    fv = _f_int(spec, V[1:], lat)
    dV = np.diff(V, axis=0)
    cross_t = np.sum(dV * (power_map(V[1:], q) - power_map(U[:-1], q)), axis=-1)
    cross = float(np.sum(cross_t)) * dv
    b_end = float(np.sum(boundary_term_b(U[m], V[m], q))) * dv
    b_start = float(np.sum(boundary_term_b(U[0], V[0], q))) * dv
    lhs = h * float(np.sum(fu))
    rhs = h * float(np.sum(fv)) + cross - b_end + b_start
    tol = np.zeros(u.ell + 1) if achieved_tol is None else np.asarray(achieved_tol)
    l1 = _l1(V[1:] - U[1:], lat)
    scale = lhs + h * float(np.sum(fv)) + float(np.sum(np.abs(cross_t))) * dv + b_end + b_start
    slack = h * float(np.sum(tol[1: m + 1] * l1)) + 64 * EPS * scale
    return Check(f"variational[{v.kind}]", lhs, rhs, slack, 0.0, {"tau": m * h, "m": m})


# ---------------------------------------------------------------------------
# test functions and parabolic minimality


@dataclass
class TestFunction:
    """``phi_i`` at scheme times; zero off slice ``i`` and at ``i = 0`` and ``i = ell``."""
    profile: Trajectory
    label: str = ""

    __test__ = False  # not a pytest class

    def __post_init__(self):
        vals = self.profile.values
        if np.any(vals[0] != 0) or np.any(vals[-1] != 0):
            raise AdmissibilityError("test function must vanish at t = 0 and t = T")

    def scaled(self, s: float) -> "TestFunction":
        return TestFunction(self.profile.with_values(s * self.profile.values), f"{s}*{self.label}")

    def __neg__(self) -> "TestFunction":
        return TestFunction(self.profile.with_values(-self.profile.values), f"-{self.label}")

    @property
    def norm(self) -> float:
        return vp_norm(self.profile)


def _check_support(u: Trajectory, phi: TestFunction) -> None:
    pv = phi.profile.values
    if pv.shape != u.values.shape:
        raise AdmissibilityError("test function and solution have different shapes")
    for i in range(u.ell + 1):
        if np.any(pv[i][~_slice_cells(u, i)] != 0):
            raise AdmissibilityError(f"test function is nonzero off the slice at step {i}")


def pairing(u: Trajectory, phi: TestFunction) -> float:
    """``int int [[u]]^q . d_t phi = sum_{i<ell} int [[u_i]]^q . (phi_{i+1} - phi_i)``."""
    pu = power_map(u.values[:-1], u.q)
    return float(np.sum(pu * np.diff(phi.profile.values, axis=0))) * u.lattice.cell_volume


def parabolic_minimizer_residual(u: Trajectory, phi: TestFunction, spec: IntegrandSpec,
                                 achieved_tol: Optional[np.ndarray] = None) -> Check:
    """``lhs = int int [[u]]^q d_t phi + f(u)``, ``rhs = int int f(u + phi)``."""
    _check_support(u, phi)
    lat, h = u.lattice, u.h
    pv = phi.profile.values
    fu = h * float(np.sum(_f_int(spec, u.values[1:], lat)))
    fp = h * float(np.sum(_f_int(spec, u.values[1:] + pv[1:], lat)))
    pr = pairing(u, phi)
    tol = np.zeros(u.ell + 1) if achieved_tol is None else np.asarray(achieved_tol)
    slack = h * float(np.sum(tol[1:] * _l1(pv[1:], lat))) + 64 * EPS * (fu + fp + abs(pr))
    return Check(f"parabolic[{phi.label}]", pr + fu, fp, slack, 0.0)


def _bump(lattice, center, radius) -> np.ndarray:
    r2 = np.sum((lattice.coords() - center) ** 2, axis=-1) / radius ** 2
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(r2 < 1, np.exp(1.0 - 1.0 / (1.0 - np.minimum(r2, 1 - 1e-300))), 0.0)


def default_basis(u: Trajectory, direction: Optional[Sequence[float]] = None) -> list[TestFunction]:
    """Eight elements: ``{eta_s1, eta_s2, eta_s1 * bump, eta_s2 * bump} x {hat, sin^2}``.

    Spatial parts live on the first slice (contained in all later ones); the
    cutoff widths are 1/8 and 1/4 of its inradius.  Each element is scaled
    to unit ``V^p`` norm.
    """
    lat = u.lattice
    mask0 = SpatialMask(lat, _slice_cells(u, 0))
    d = distance_to_complement(mask0)
    inr = float(d.max())
    if inr <= 2 * max(lat.spacing):
        raise RangeError("first slice is too thin for the default test basis")
    center = lat.coords()[np.unravel_index(int(np.argmax(d)), d.shape)]
    bump = _bump(lat, center, inr)
    spatial = []
    for k, frac in ((1, 1 / 8), (2, 1 / 4)):
        eta = cutoff_eta_sigma(mask0, frac * inr)
        spatial += [(f"eta{k}", eta), (f"eta{k}*bump", eta * bump)]
    t = u.times / u.T
    temporal = [("hat", 1 - np.abs(2 * t - 1)), ("sin2", np.sin(np.pi * t) ** 2)]
    temporal = [(n, np.where((np.arange(len(t)) == 0) | (np.arange(len(t)) == u.ell), 0.0, g))
                for n, g in temporal]
    N = u.values.shape[-1]
    e = np.zeros(N)
    e[0] = 1.0
    if direction is not None:
        e = np.asarray(direction, float) / np.linalg.norm(direction)
    out = []
    for sn, s in spatial:
        for tn, g in temporal:
            vals = g[(slice(None),) + (None,) * (lat.n + 1)] * (s[..., None] * e)[None]
            tf = TestFunction(u.with_values(vals), f"{sn}x{tn}")
            out.append(tf.scaled(1.0 / tf.norm))
            out[-1].label = f"{sn}x{tn}"
    return out


@dataclass
class DualEstimate:
    lower_bound: float
    rhs_bound: float
    ratio: float
    pairings: list = field(default_factory=list)


def dual_norm_estimate(u: Trajectory, basis: Sequence[TestFunction],
                       spec: Optional[IntegrandSpec] = None) -> DualEstimate:
    """Lower bound ``max |pairing|`` over unit-norm basis elements against
    ``[||u||_{V^p}^p + ||G||_{L^1(Omega_T)}]^{(p-1)/p}``."""
    if not basis:
        raise ValueError("empty test basis")
    pr = [pairing(u, phi) / phi.norm for phi in basis]
    low = float(max(abs(x) for x in pr))
    p = u.p
    G1 = 0.0
    if spec is not None:
        G = np.broadcast_to(spec.G, u.lattice.dims)
        G1 = float(np.sum(G)) * u.lattice.cell_volume * u.T
    rhs = (vp_norm(u) ** p + G1) ** ((p - 1) / p)
    return DualEstimate(low, rhs, low / rhs if rhs > 0 else math.inf, pr)


# ---------------------------------------------------------------------------
# initial values, continuity, Hardy


@dataclass
class InitialConditionReport:
    h_list: list
    values: list

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.values[:-1], self.values[1:]))


def initial_condition_check(u: Trajectory, u_o: Field, K: SpatialMask,
                            h_list: Sequence[float]) -> InitialConditionReport:
    """``(1/H) sum_{0 < t_i <= H} h ||u_i - u_o||^{q+1}_{L^{q+1}(K)}`` for each ``H``."""
    lat = u.lattice
    mask0 = SpatialMask(lat, _slice_cells(u, 0))
    if not K <= inner_parallel_set(mask0, min(lat.spacing)):
        raise RangeError("K must lie in the interior of the first slice")
    dev = np.sum(_vec_norm(u.values[1:] - u_o.values)[:, K.cells] ** (u.q + 1), axis=1) * lat.cell_volume
    vals = []
    for H in h_list:
        k = int(math.floor(H / u.h * (1 + 1e-12)))
        if k < 1:
            raise RangeError(f"H = {H} is below one time step")
        vals.append(float(u.h * np.sum(dev[:k]) / H))
    return InitialConditionReport(list(h_list), vals)


def continuity_modulus(u: Trajectory, q: Optional[float] = None) -> float:
    """``max_i ||u_i - u_{i-1}||_{L^{q+1}(Omega)}``."""
    q = u.q if q is None else q
    d = np.diff(u.values, axis=0)
    axes = tuple(range(1, d.ndim - 1))
    s = np.sum(_vec_norm(d) ** (q + 1), axis=axes) * u.lattice.cell_volume
    return float(s.max() ** (1 / (q + 1))) if len(s) else 0.0


def check_continuity_chain(u: Trajectory, c33: Optional[float] = None,
                           c34a: Optional[float] = None) -> Check:
    """Per step, ``int |u_i - u_{i-1}|^{q+1} <= c33 (2(M_i + M_{i-1}))^{1/2} (c34a int b[u_{i-1}, u_i])^{1/2}``
    with ``M_i = int |u_i|^{q+1}``; from the two algebraic bounds and Cauchy-Schwarz.
    Reports the worst step."""
    q, dv = u.q, u.lattice.cell_volume
    N = u.values.shape[-1]
    c33 = derive_lemma_constant("L3.3", q, 10_000, 0, N).c_hat if c33 is None else c33
    c34a = derive_lemma_constant("L3.4a", q, 10_000, 0, N).c_hat if c34a is None else c34a
    axes = tuple(range(1, u.values.ndim - 1))
    M = np.sum(_vec_norm(u.values) ** (q + 1), axis=axes) * dv
    lhs = np.sum(_vec_norm(np.diff(u.values, axis=0)) ** (q + 1), axis=axes) * dv
    B = np.sum(boundary_term_b(u.values[:-1], u.values[1:], q), axis=axes) * dv
    rhs = c33 * np.sqrt(2 * (M[1:] + M[:-1])) * np.sqrt(c34a * B)
    j = int(np.argmin(rhs - lhs))
    return Check("continuity_chain", float(lhs[j]), float(rhs[j]), 0.0, 1e-10, {"i": j + 1})


@dataclass
class HardyReport:
    ratio: float
    flag: str = ""


def hardy_check(field_: Field, mask: SpatialMask, p: float) -> HardyReport:
    """``sum (|u|/d)^p / sum |Du|^p`` with ``d`` the distance to the complement of ``mask``."""
    u = field_.values
    if np.any(u[~mask.cells] != 0):
        raise AdmissibilityError("field must vanish off the mask")
    if not measure_density_estimate(mask).delta_hat > 0:
        raise RangeError("the complement of the mask fails the measure density estimate")
    d = distance_to_complement(mask)
    nu = _vec_norm(u)
    num = float(np.sum((nu[mask.cells] / d[mask.cells]) ** p))
    xi = gradient_array(u, field_.lattice)
    den = float(np.sum(np.sqrt(np.sum(xi * xi, axis=(-2, -1))) ** p))
    if num == 0 and den == 0:
        return HardyReport(math.nan, "degenerate: zero field")
    if den == 0:
        return HardyReport(math.inf, "unbounded: nonzero field with zero gradient")
    return HardyReport(num / den)
