"""Minimizing-movements driver and its energy bookkeeping.

Step ``i`` minimizes the step functional over fields clamped to ``u_star``
off the slice at time ``i h``; the steps are glued into a piecewise-constant
trajectory with ``u(t) = u_i`` on ``((i-1)h, ih]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .algebra import derive_lemma_constant, dissipation_term
from .checks import Check
from .geometry import DomainFamily, RangeError, check_nondecreasing, slice_mask
from .grid import Field, Trajectory, _vec_norm, clamp_to_boundary, gradient_array
from .integrand import IntegrandSpec, self_check
from .minimizer import (EPS, SolverSettings, StepProblem, crucial_sides, gradient_scale,
                        minimize_step, rounding_allowance, verify_step_minimality)


class ShrinkingDomainError(ValueError):
    """The domain family is not nondecreasing; the scheme requires E^s within E^t for s <= t."""


class IntegrandError(ValueError):
    pass


@dataclass
class SchemeConfig:
    ell: int
    T: float
    q: float
    family: DomainFamily
    spec: IntegrandSpec
    u_o: Field
    u_star: Field
    settings: SolverSettings = field(default_factory=SolverSettings)
    competitors: int = 100
    seed: int = 0
    check_integrand: bool = True

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if self.T <= 0 or self.q <= 0:
            raise ValueError("T and q must be positive")
        if abs(self.family.horizon - self.T) > 1e-12 * self.T:
            raise ValueError(f"family horizon {self.family.horizon} differs from T = {self.T}")

    @property
    def h(self) -> float:
        return self.T / self.ell


@dataclass
class EnergyLedger:
    """Per-step bookkeeping; index ``i`` runs over ``0..ell``."""
    h: float
    q: float
    energy_f: np.ndarray
    lq1_mass: np.ndarray
    dissipation: np.ndarray
    achieved_tol: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    step_margin: np.ndarray
    step_slack: np.ndarray
    energy_slack: np.ndarray
    mono_slack: np.ndarray
    f_star: float
    mass_o: float
    mass_star: float
    nu: float
    p: float
    grad_p_norm: float
    coercivity_shift: float

    @property
    def ell(self) -> int:
        return len(self.energy_f) - 1

    @property
    def T(self) -> float:
        return self.h * self.ell

    @property
    def cumulative_energy(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.h * self.energy_f[1:])])

    @property
    def cumulative_dissipation(self) -> np.ndarray:
        return np.cumsum(self.dissipation)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged[1:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "t", "energy_f", "lq1_mass", "dissipation", "step_margin", "converged"])
            for i in range(self.ell + 1):
                w.writerow([i, repr(i * self.h), repr(float(self.energy_f[i])),
                            repr(float(self.lq1_mass[i])), repr(float(self.dissipation[i])),
                            repr(float(self.step_margin[i])), int(bool(self.converged[i]))])


def energy_integral(spec: IntegrandSpec, field_: Field) -> float:
    xi = gradient_array(field_.values, field_.lattice)
    return float(np.sum(spec.density(field_.values, xi))) * field_.lattice.cell_volume


def mass(field_: Field, q: float) -> float:
    return float(np.sum(_vec_norm(field_.values) ** (q + 1))) * field_.lattice.cell_volume


def run(config: SchemeConfig, progress=None):
    """Run all ``ell`` steps; returns ``(Trajectory, EnergyLedger)``."""
    fam = config.family
    if not check_nondecreasing(fam):
        raise ShrinkingDomainError(
            "domain family shrinks in time; the scheme needs nondecreasing slices (E^s within E^t for s <= t)")
    if config.check_integrand:
        rep = self_check(config.spec, 1000, config.seed, N=config.u_o.components, n=config.u_o.lattice.n)
        if not rep.passed:
            bad = [k for k, c in rep.checks.items() if not c.passed]
            raise IntegrandError(f"integrand self-check failed: {', '.join(bad)}")
    spec, q, h, ell = config.spec, config.q, config.h, config.ell
    us = config.u_star
    lat = us.lattice
    dv = lat.cell_volume
    u = clamp_to_boundary(config.u_o, slice_mask(fam, 0.0), us)
    steps = [u.values]
    n1 = ell + 1
    led = dict(energy_f=np.zeros(n1), lq1_mass=np.zeros(n1), dissipation=np.zeros(n1),
               achieved_tol=np.zeros(n1), converged=np.ones(n1, bool), iterations=np.zeros(n1, int),
               step_margin=np.zeros(n1), step_slack=np.zeros(n1), energy_slack=np.zeros(n1),
               mono_slack=np.zeros(n1))
    led["energy_f"][0] = energy_integral(spec, u)
    led["lq1_mass"][0] = mass(u, q)
    for i in range(1, ell + 1):
        mask = slice_mask(fam, i * h)
        prob = StepProblem(spec, u, us, mask, h, q)
        res = minimize_step(prob, config.settings)
        w = res.w
        tol = res.achieved_tol
        gs = gradient_scale(prob, w.values)
        # competitor u_star gives the energy estimates, u_{i-1} the monotonicity
        _, _, l1s, scs = crucial_sides(prob, w.values, us.values)
        _, _, l1p, scp = crucial_sides(prob, w.values, u.values)
        led["energy_slack"][i] = h * (tol * l1s + rounding_allowance(scs, gs, l1s))
        led["mono_slack"][i] = tol * l1p + rounding_allowance(scp, gs, l1p)
        if config.competitors > 0:
            rep = verify_step_minimality(prob, w, config.competitors, config.seed + i, tol)
            led["step_margin"][i] = float(np.min(rep.margins + rep.slacks))
            led["step_slack"][i] = rep.worst_slack
        led["energy_f"][i] = energy_integral(spec, w)
        led["lq1_mass"][i] = mass(w, q)
        led["dissipation"][i] = float(np.sum(dissipation_term(u.values, w.values, q))) * dv
        led["achieved_tol"][i] = tol
        led["converged"][i] = res.converged
        led["iterations"][i] = res.iterations
        steps.append(w.values)
        u = w
        if progress is not None:
            progress(i, res)
    traj = Trajectory(np.stack(steps), lat, h, q=q, p=spec.p, family=fam)
    dxi = gradient_array(traj.values[1:], lat)
    grad_p = float(np.sum(np.sqrt(np.sum(dxi * dxi, axis=(-2, -1))) ** spec.p)) * dv * h
    area = float(np.prod([s * (d - 1) for s, d in zip(lat.spacing, lat.dims)]))
    ledger = EnergyLedger(h=h, q=q, f_star=energy_integral(spec, us),
                          mass_o=mass(Field(steps[0], lat), q), mass_star=mass(us, q),
                          nu=spec.nu, p=spec.p, grad_p_norm=grad_p,
                          coercivity_shift=spec.coercivity_shift * lat.num_nodes * dv,
                          **led)
    return traj, ledger


def interpolant_at(traj: Trajectory, t: float) -> Field:
    """``u(t) = u_i`` for ``t`` in ``((i-1)h, ih]``, and ``u_0`` for ``t <= 0``."""
    h = traj.h
    tol = 1e-9
    if t <= -h * (1 - tol) or t > traj.T * (1 + 1e-12) + 1e-300:
        raise RangeError(f"time {t} outside (-h, T]")
    if t <= 0:
        return traj.step(0)
    i = math.ceil(t / h - tol)
    return traj.step(min(max(i, 1), traj.ell))


def energy_rhs_constants(q: float):
    """Constants of the explicit energy bound: ``(2q/(q+1), (2^q+1)/(q+1))``."""
    return 2 * q / (q + 1), (2 ** q + 1) / (q + 1)


def check_energy_estimates(traj: Trajectory, ledger: EnergyLedger, rtol: float = 1e-8,
                           drop_u_star: bool = False) -> list[Check]:
    """Both explicit-constant energy bounds.

    (i)  ``q/(2(q+1)) int |u_m|^{q+1} <= m h int f(u_*) + c_o int |u_o|^{q+1} + c_* int |u_*|^{q+1}``
         for every ``m``; the reported check is the worst ``m``.
    (ii) ``nu int int |Du|^p <= T int f(u_*) + c_o int |u_o|^{q+1} + c_* int |u_*|^{q+1}``.

    ``drop_u_star`` removes the ``u_*`` terms (used to show they are needed).
    """
    q, h = ledger.q, ledger.h
    c_o, c_s = energy_rhs_constants(q)
    f_star = 0.0 if drop_u_star else ledger.f_star
    m_star = 0.0 if drop_u_star else ledger.mass_star
    slack_cum = np.cumsum(ledger.energy_slack)
    worst = None
    for m in range(1, ledger.ell + 1):
        lhs = q / (2 * (q + 1)) * ledger.lq1_mass[m]
        rhs = m * h * f_star + c_o * ledger.mass_o + c_s * m_star
        c = Check("energy_i", lhs, rhs, slack_cum[m], rtol, {"m": m})
        if worst is None or c.margin + c.slack < worst.margin + worst.slack:
            worst = c
    rhs2 = ledger.T * f_star + c_o * ledger.mass_o + c_s * m_star
    lhs2 = ledger.nu * ledger.grad_p_norm
    c2 = Check("energy_ii", lhs2, rhs2, slack_cum[-1] + ledger.nu * 0 + ledger.T * ledger.coercivity_shift,
               rtol)
    return [worst, c2]


def check_dissipation_bound(traj: Trajectory, ledger: EnergyLedger, epsilon: float,
                            c44a: Optional[float] = None) -> Check:
    """``(1/c) sum_{ih > eps} h int |Delta_{-h} [[u]]^{(q+1)/2}|^2
    <= (T int f(u_*) + c_hat (int |u_o|^{q+1} + int |u_*|^{q+1})) / (eps - 2h)``."""
    T, h, q, ell = ledger.T, ledger.h, ledger.q, ledger.ell
    if not ell > 4 * T / epsilon:
        raise RangeError(f"need ell > 4T/eps = {4 * T / epsilon:.6g}, got ell = {ell}")
    if c44a is None:
        c44a = derive_lemma_constant("L3.4a", q, 10_000, 0, traj.values.shape[-1]).c_hat
    i1 = int(math.floor(epsilon / h * (1 + 1e-12)))
    # sum_i h int |(A_i - A_{i-1})/h|^2 = sum_i dissipation_i / h
    lhs = float(np.sum(ledger.dissipation[i1 + 1:])) / h / c44a
    c_hat = max(energy_rhs_constants(q))
    rhs = (T * ledger.f_star + c_hat * (ledger.mass_o + ledger.mass_star)) / (epsilon - 2 * h)
    slack = float(np.sum(ledger.energy_slack)) / (epsilon - 2 * h) + float(np.sum(ledger.mono_slack[1:]))
    return Check("dissipation", lhs, rhs, slack, 0.0, {"c": 1 / c44a, "i1": i1, "c_hat": c_hat})


def check_monotonicity(ledger: EnergyLedger) -> Check:
    """``int f(u_i) <= int f(u_{i-1}) + slack_i`` for all ``i >= 1``; reports the worst step."""
    diffs = ledger.energy_f[:-1] - ledger.energy_f[1:]
    rel = diffs + ledger.mono_slack[1:]
    j = int(np.argmin(rel))
    return Check("energy_monotone", ledger.energy_f[j + 1], ledger.energy_f[j],
                 ledger.mono_slack[j + 1], 0.0, {"i": j + 1})


def check_boundary_conformance(traj: Trajectory, u_star: Field) -> Check:
    """Count of nodes off slice ``i`` where ``u_i`` differs from ``u_star`` (must be 0)."""
    bad = 0
    for i in range(traj.ell + 1):
        m = slice_mask(traj.family, i * traj.h).cells
        bad += int(np.sum(np.any(traj.values[i][~m] != u_star.values[~m], axis=-1)))
    return Check("boundary_conformance", float(bad), 0.0, 0.0, 0.0)
