"""Exponential time mollification and time difference quotients.

For a trajectory that is constant on each ``(t_{i-1}, t_i]`` the mollification

    [v]_h(t) = exp(-t/h) v_o + (1/h) int_0^t exp((s - t)/h) v(s) ds

is computed exactly at scheme times by the recursion
``m_i = m_{i-1} + (1 - exp(-dt/h)) (v_i - m_{i-1})``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .algebra import boundary_term_b, power_map
from .checks import Check
from .geometry import RangeError
from .grid import Field, Trajectory, _vec_norm, gradient_array
from .integrand import IntegrandSpec


@dataclass
class MollifierState:
    """Running value of ``[v]_h``; ``advance`` integrates across one constant piece."""
    h: float
    v_o: Field
    current: Field = None
    t: float = 0.0

    def __post_init__(self):
        if not self.h > 0:
            raise RangeError("mollification parameter h must be positive")
        if self.current is None:
            self.current = self.v_o.copy()

    def advance(self, v: np.ndarray, dt: float) -> Field:
        gain = -math.expm1(-dt / self.h)
        cur = self.current.values
        self.current = Field(cur + gain * (np.asarray(v, float) - cur), self.current.lattice)
        self.t += dt
        return self.current


def landes_mollify(traj: Trajectory, h: float, v_o: Field) -> Trajectory:
    """``[v]_h`` at the scheme times of ``traj``; ``values[0] = v_o``.  Entry 0 of ``traj`` is ignored."""
    if not h > 0:
        raise RangeError("mollification parameter h must be positive")
    st = MollifierState(h, v_o)
    out = [v_o.values.copy()]
    for i in range(1, traj.ell + 1):
        out.append(st.advance(traj.values[i], traj.h).values)
    return traj.with_values(np.stack(out))


def _slice_norms(values: np.ndarray, q: float, dv: float) -> np.ndarray:
    axes = tuple(range(1, values.ndim - 1))
    return (np.sum(_vec_norm(values) ** (q + 1), axis=axes) * dv) ** (1 / (q + 1))


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def check_mollifier_bound(traj: Trajectory, h: float, v_o: Field, r: float,
                          q: Optional[float] = None) -> Check:
    """``||[v]_h||_{L^r(0,t_o;X)} <= ||v||_{L^r(0,t_o;X)} + [(h/r)(1 - e^{-t_o r/h})]^{1/r} ||v_o||_X``
    at every scheme time ``t_o``, with ``X = L^{q+1}(Omega)``; reports the worst ``t_o``.

    ``[v]_h`` relaxes exponentially inside each step, so its time norm is
    integrated by 16-point Gauss-Legendre quadrature per step.
    """
    if not (r >= 1):
        raise RangeError("r must lie in [1, inf]")
    q = traj.q if q is None else q
    dt, dv = traj.h, traj.lattice.cell_volume
    mol = landes_mollify(traj, h, v_o).values
    vnorm = _slice_norms(traj.values[1:], q, dv)
    ov = _slice_norms(v_o.values[None], q, dv)[0]
    s = (_GL_X + 1) / 2
    decay = np.exp(-s * dt / h)
    worst = None
    acc_v = acc_m = 0.0
    for i in range(1, traj.ell + 1):
        start, target = mol[i - 1], traj.values[i]
        pts = np.stack([target + d * (start - target) for d in decay])
        nm = _slice_norms(pts, q, dv)
        # the norm is convex along the segment, so its max is at an endpoint
        if math.isinf(r):
            acc_m = max(acc_m, float(nm.max()), float(_slice_norms(start[None], q, dv)[0]))
            acc_v = max(acc_v, float(vnorm[i - 1]))
            lhs, rhs = acc_m, acc_v + ov
        else:
            acc_m += dt / 2 * float(np.sum(_GL_W * nm ** r))
            acc_v += dt * float(vnorm[i - 1]) ** r
            t_o = i * dt
            bracket = (h / r * -math.expm1(-t_o * r / h)) ** (1 / r)
            lhs, rhs = acc_m ** (1 / r), acc_v ** (1 / r) + bracket * ov
        c = Check("mollifier_bound", lhs, rhs, 0.0, 1e-10, {"t_o": i * dt, "r": r})
        if worst is None or c.margin < worst.margin:
            worst = c
    return worst


def _density_traj(spec: IntegrandSpec, values: np.ndarray, lattice) -> np.ndarray:
    xi = gradient_array(values, lattice)
    return spec.density(values, xi)


def check_mollifier_convexity(traj: Trajectory, h: float, spec: IntegrandSpec, v_o: Field) -> Check:
    """Node- and time-wise ``f(x, [v]_h, D[v]_h) <= [f(x, v, Dv)]_h`` at scheme times."""
    lat = traj.lattice
    mol = landes_mollify(traj, h, v_o).values
    lhs = _density_traj(spec, mol, lat)
    dens = _density_traj(spec, traj.values, lat)[..., None]
    f0 = Field(_density_traj(spec, v_o.values, lat)[..., None], lat)
    rhs = landes_mollify(traj.with_values(dens), h, f0).values[..., 0]
    gap = rhs - lhs
    j = np.unravel_index(int(np.argmin(gap)), gap.shape)
    allowed = 1e-12 * max(1.0, float(np.max(np.abs(rhs))))
    return Check("mollifier_convexity", float(lhs[j]), float(rhs[j]), allowed, 0.0,
                 {"index": tuple(int(k) for k in j)})


def difference_quotient(traj: Trajectory, h_steps: int, backward: bool = False) -> Trajectory:
    """``(v(t + H) - v(t))/H`` with ``H = h_steps * dt`` at scheme times.

    Forward: entries ``i = 0 .. ell - h_steps``.  Backward (``(v(t) - v(t - H))/H``):
    entries ``i = 0 .. ell`` with ``v(t) = v(0)`` for ``t <= 0``.
    """
    ell = traj.ell
    if not 1 <= h_steps <= ell:
        raise RangeError(f"h_steps must lie in [1, {ell}]")
    H = h_steps * traj.h
    v = traj.values
    if backward:
        lag = np.concatenate([np.repeat(v[:1], h_steps, axis=0), v[:-h_steps]])
        return traj.with_values((v - lag) / H)
    return traj.with_values((v[h_steps:] - v[:-h_steps]) / H)


@dataclass
class IntegrationByParts:
    lhs: float
    rhs: float
    delta1: float
    delta2: float
    scale: float

    @property
    def holds(self) -> bool:
        return self.rhs - self.lhs >= -64 * np.finfo(float).eps * self.scale

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.delta1, self.delta2))


def _extended(values: np.ndarray, k: int, ell: int) -> np.ndarray:
    """Cells ``j = -k+1 .. ell+k`` (array index ``j + k - 1``): constant extension at both ends."""
    first = np.repeat(values[:1], k - 1, axis=0)
    last = np.repeat(values[-1:], k, axis=0)
    return np.concatenate([first, values, last])


def check_finite_integration_by_parts(u: Trajectory, v: Trajectory, h_steps: int) -> IntegrationByParts:
    """All terms of the finite integration-by-parts inequality with ``H = h_steps * dt``.

    Time cell ``j`` is ``((j-1) dt, j dt]``; cells ``j <= 0`` carry the value at 0
    and cells ``j > ell`` the value at ``T``.
    """
    if u.values.shape != v.values.shape or u.h != v.h:
        raise ValueError("u and v must share the time grid and lattice")
    ell, dt, q = u.ell, u.h, u.q
    k = h_steps
    if not 1 <= k <= ell:
        raise RangeError(f"h_steps must lie in [1, {ell}]")
    H = k * dt
    dv = u.lattice.cell_volume
    U = _extended(u.values, k, ell)
    V = _extended(v.values, k, ell)
    idx = lambda j: j + k - 1  # noqa: E731
    pu, pv = power_map(U, q), power_map(V, q)
    dot = lambda a, b: float(np.sum(a * b)) * dv * dt  # noqa: E731
    inner = slice(idx(1), idx(ell) + 1)
    lag = slice(idx(1) - k, idx(ell) + 1 - k)
    lead = slice(idx(1) + k, idx(ell) + 1 + k)
    neg = slice(idx(-k + 1), idx(0) + 1)
    neg_lead = slice(idx(-k + 1) + k, idx(0) + 1 + k)
    top = slice(idx(ell - k + 1), idx(ell) + 1)
    top_lead = slice(idx(ell - k + 1) + k, idx(ell) + 1 + k)

    lhs = dot((pu[inner] - pu[lag]) / H, V[inner] - U[inner])
    main = dot((V[lead] - V[inner]) / H, pv[inner] - pu[inner])
    end_b = float(np.sum(boundary_term_b(U[top], V[top_lead], q))) * dv * dt / H
    start_b = float(np.sum(boundary_term_b(U[neg], V[neg], q))) * dv * dt / H
    delta1 = float(np.sum(boundary_term_b(V[inner], V[lead], q))) * dv * dt / H
    delta2 = dot((V[neg_lead] - V[neg]) / H, pv[neg_lead] - pu[neg])
    rhs = main - end_b + start_b + delta1 + delta2
    scale = abs(lhs) + abs(main) + end_b + start_b + delta1 + abs(delta2)
    return IntegrationByParts(lhs, rhs, delta1, delta2, scale)
