"""Closed-form reference solutions.

``heat_separable``
    ``A exp(-n pi^2 t) prod sin(pi x_i)`` on the unit cube (q = 1, p = 2).
``barenblatt_pme``
    ``u = v^m`` with ``v`` the self-similar solution of ``v_t = Lap(v^m)``,
    ``m = 1/q > 1``, so that ``[[u]]^q = v`` (p = 2).
``barenblatt_plaplace``
    self-similar solution of ``u_t = div(|Du|^(p-2) Du)``, ``p > 2`` (q = 1).

Times passed to :func:`evaluate` are profile times; a scheme time ``s``
corresponds to ``t0 + s``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import DomainFamily, ball_mask
from .grid import Field, Lattice, Trajectory, _vec_norm

KINDS = ("heat_separable", "barenblatt_pme", "barenblatt_plaplace")


class RegimeError(ValueError):
    pass


@dataclass(frozen=True)
class ExactSolution:
    kind: str
    q: float = 1.0
    p: float = 2.0
    n: int = 2
    t0: float = 0.0
    C: float = 1.0
    center: tuple = None
    components: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown exact solution {self.kind!r}")
        if self.center is None:
            object.__setattr__(self, "center", (0.0,) * self.n)
        if self.kind == "heat_separable" and (self.q != 1 or self.p != 2):
            raise RegimeError("the separable heat solution needs q = 1, p = 2")
        if self.kind == "barenblatt_pme" and self.p != 2:
            raise RegimeError("the porous-medium profile needs p = 2")
        if self.kind == "barenblatt_plaplace" and self.q != 1:
            raise RegimeError("the p-Laplace profile needs q = 1")

    @property
    def compact(self) -> bool:
        """Slow diffusion (p - 1 > q): finite propagation speed."""
        return self.kind != "heat_separable" and self.p - 1 > self.q

    # exponents -----------------------------------------------------------
    @property
    def m(self) -> float:
        return 1.0 / self.q

    def _pme(self):
        n, m = self.n, self.m
        alpha = n / (n * (m - 1) + 2)
        beta = alpha / n
        k = alpha * (m - 1) / (2 * m * n)
        return alpha, beta, k

    def _plap(self):
        n, p = self.n, self.p
        beta = 1.0 / (n * (p - 2) + p)
        alpha = n * beta
        k = (p - 2) / p * beta ** (1 / (p - 1))
        return alpha, beta, k

    def support_radius(self, t):
        t = np.asarray(t, float)
        if self.kind == "barenblatt_pme":
            if not self.compact:
                raise RegimeError("fast diffusion has no compact support")
            _, beta, k = self._pme()
            return np.sqrt(self.C / k) * t ** beta
        if self.kind == "barenblatt_plaplace":
            if not self.compact:
                raise RegimeError("fast diffusion has no compact support")
            _, beta, k = self._plap()
            return (self.C / k) ** ((self.p - 1) / self.p) * t ** beta
        raise RegimeError("the heat solution is not compactly supported")


def evaluate(sol: ExactSolution, x, t: float) -> np.ndarray:
    """Values at points ``x`` (shape ``(..., n)``); returns shape ``(..., components)``."""
    x = np.asarray(x, float)
    if t < sol.t0 or (sol.kind != "heat_separable" and t <= 0):
        raise ValueError(f"t must be at least t0 = {sol.t0}")
    if sol.kind == "heat_separable":
        val = sol.C * np.exp(-sol.n * np.pi ** 2 * t) * np.prod(np.sin(np.pi * x), axis=-1)
    else:
        r = np.sqrt(np.sum((x - np.asarray(sol.center)) ** 2, axis=-1))
        if sol.kind == "barenblatt_pme":
            if sol.m <= 1:
                raise RegimeError("porous-medium profile needs q < 1")
            alpha, beta, k = sol._pme()
            base = np.maximum(sol.C - k * r ** 2 * t ** (-2 * beta), 0.0)
            v = t ** (-alpha) * base ** (1 / (sol.m - 1))
            val = v ** sol.m
        else:
            if sol.p <= 2:
                raise RegimeError("p-Laplace profile needs p > 2")
            alpha, beta, k = sol._plap()
            p = sol.p
            base = np.maximum(sol.C - k * (r * t ** (-beta)) ** (p / (p - 1)), 0.0)
            val = t ** (-alpha) * base ** ((p - 1) / (p - 2))
    out = np.zeros(val.shape + (sol.components,))
    out[..., 0] = val
    return out


def exact_field(sol: ExactSolution, lattice: Lattice, t: float) -> Field:
    return Field(evaluate(sol, lattice.coords(), t), lattice)


def support_hull_family(sol: ExactSolution, margin: float, times: Sequence[float],
                        lattice: Lattice) -> DomainFamily:
    """Balls of radius ``support_radius(t0 + s) + margin`` at scheme times ``s``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    radii = sol.support_radius(sol.t0 + np.asarray(times, float)) + margin
    return DomainFamily(np.asarray(times, float),
                        tuple(ball_mask(lattice, sol.center, float(r)) for r in radii))


def sample_trajectory(sol: ExactSolution, lattice: Lattice, ell: int, T: float) -> Trajectory:
    h = T / ell
    vals = np.stack([evaluate(sol, lattice.coords(), sol.t0 + i * h) for i in range(ell + 1)])
    return Trajectory(vals, lattice, h, q=sol.q, p=sol.p)


def _errors(traj: Trajectory, sol: ExactSolution):
    q = traj.q
    dv = traj.lattice.cell_volume
    x = traj.lattice.coords()
    err, ref = [], []
    for i, t in enumerate(traj.times):
        ex = evaluate(sol, x, sol.t0 + t)
        err.append(float(np.sum(_vec_norm(traj.values[i] - ex) ** (q + 1))) * dv)
        ref.append(float(np.sum(_vec_norm(ex) ** (q + 1))) * dv)
    return np.array(err), np.array(ref)


def error_norms(traj: Trajectory, sol: ExactSolution):
    """``(L^{q+1}(Omega_T) error, sup-in-time L^{q+1}(Omega) error)`` at scheme times."""
    e, _ = _errors(traj, sol)
    q = traj.q
    st = (traj.h * e[1:].sum()) ** (1 / (q + 1))
    sup = float(e.max() ** (1 / (q + 1)))
    return float(st), sup


def relative_error_norms(traj: Trajectory, sol: ExactSolution):
    """Errors of :func:`error_norms` divided by the matching norms of the exact solution."""
    e, r = _errors(traj, sol)
    q = traj.q
    st = (e[1:].sum() / r[1:].sum()) ** (1 / (q + 1))
    sup = (e.max() / r.max()) ** (1 / (q + 1))
    return float(st), float(sup)
