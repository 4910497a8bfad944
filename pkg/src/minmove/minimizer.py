"""Per-step minimization of ``F_h[w; u_prev] = sum f(w, Dw) dx^n + (1/h) sum b[u_prev, w] dx^n``
over fields equal to ``u_star`` off the step's slice.

The solver is accelerated proximal gradient (FISTA) with backtracking and
function-value restarts.  ``f`` supplies the gradient step; the node-separable
part ``(1/h)(|w|^(q+1)/(q+1) - [[u_prev]]^q . w)`` is handled by its exact prox,
so iterates may sit at ``w = 0`` for any ``q > 0``.

Residuals are per unit volume: ``g = D^T D_xi f + D_u f + ([[w]]^q - [[u_prev]]^q)/h``
on free nodes, Euclidean norm per node, maximum over nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .algebra import boundary_term_b, power_map
from .grid import Field, gradient_adjoint, gradient_array, _cells
from .integrand import IntegrandSpec

EPS = np.finfo(float).eps


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    tol_obj: float = 1e-10
    tol_step: float = 1e-9
    max_iters: int = 20_000
    backtracking: float = 0.5

    def __post_init__(self):
        if self.tol_obj <= 0 or self.tol_step <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.backtracking < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class StepProblem:
    spec: IntegrandSpec
    u_prev: Field
    u_star: Field
    mask: object
    h: float
    q: float

    def __post_init__(self):
        if self.h <= 0 or self.q <= 0:
            raise ValueError("h and q must be positive")
        if self.u_prev.lattice != self.u_star.lattice:
            raise ContractError("u_prev and u_star live on different lattices")

    @property
    def lattice(self):
        return self.u_star.lattice

    @property
    def free(self) -> np.ndarray:
        return _cells(self.mask)


@dataclass
class StepResult:
    w: Field
    iterations: int
    achieved_tol: float
    converged: bool
    objective: float
    history: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (field, iterations, achieved_tol)
        return iter((self.w, self.iterations, self.achieved_tol))


def smooth_part(prob: StepProblem, w: np.ndarray, need_grad=True):
    """``sum f(w, Dw)`` and its gradient (plain sums, no volume factor)."""
    spec, lat = prob.spec, prob.lattice
    xi = gradient_array(w, lat)
    val = float(np.sum(spec.density(w, xi)))
    if not need_grad:
        return val, None
    g = gradient_adjoint(spec.d_xi(w, xi), lat) + spec.d_u(w, xi)
    return val, g


def _b_sum(prob, w):
    return float(np.sum(boundary_term_b(prob.u_prev.values, w, prob.q)))


def step_objective(prob: StepProblem, w: Field) -> float:
    """Value of the step functional; ``w`` must equal ``u_star`` off the slice."""
    free = prob.free
    if not np.array_equal(w.values[~free], prob.u_star.values[~free]):
        raise ContractError("competitor is not clamped to u_star outside the slice")
    return _objective(prob, w.values)


def _objective(prob, w):
    s, _ = smooth_part(prob, w, need_grad=False)
    return (s + _b_sum(prob, w) / prob.h) * prob.lattice.cell_volume


def residual_field(prob: StepProblem, w: np.ndarray) -> np.ndarray:
    """Per-volume first-order residual, zero on clamped nodes."""
    _, g = smooth_part(prob, w)
    g = g + (power_map(w, prob.q) - power_map(prob.u_prev.values, prob.q)) / prob.h
    g[~prob.free] = 0.0
    return g


def step_residual(prob: StepProblem, w) -> float:
    vals = w.values if isinstance(w, Field) else w
    if not prob.free.any():
        return 0.0
    r = residual_field(prob, vals)
    return float(np.sqrt(np.sum(r * r, axis=-1)).max())


def gradient_scale(prob: StepProblem, w: np.ndarray) -> float:
    """Max over free nodes of the summed magnitudes entering the residual; bounds its rounding."""
    spec, lat = prob.spec, prob.lattice
    xi = gradient_array(w, lat)
    flux = np.abs(spec.d_xi(w, xi))
    pieces = np.zeros(w.shape)
    for ax in range(lat.n):
        g = flux[..., ax] / lat.spacing[ax]
        lo = [slice(None)] * w.ndim
        hi = [slice(None)] * w.ndim
        lo[ax] = slice(0, lat.dims[ax] - 1)
        hi[ax] = slice(1, None)
        pieces[tuple(lo)] += g[tuple(lo)]
        pieces[tuple(hi)] += g[tuple(lo)]
    pieces = pieces + np.abs(spec.d_u(w, xi))
    pieces = pieces + (np.abs(power_map(w, prob.q)) + np.abs(power_map(prob.u_prev.values, prob.q))) / prob.h
    if not prob.free.any():
        return 0.0
    return float(np.sum(pieces, axis=-1)[prob.free].max())


def prox_b(z: np.ndarray, pu: np.ndarray, c: float, q: float) -> np.ndarray:
    """``argmin_w |w - z|^2/2 + c (|w|^(q+1)/(q+1) - pu . w)`` node-wise.

    Solves ``r + c r^q = |z + c pu|`` for ``r = |w|``; Newton runs on a variable in
    which the equation is convex and increasing, started from an upper bound,
    so the iterates decrease monotonically to the root.
    """
    y = z + c * pu
    s = np.sqrt(np.sum(y * y, axis=-1))
    if q == 1:
        return y / (1.0 + c)
    pos = s > 0
    sp = s[pos]
    if q < 1:
        # phi(rho) = rho^(1/q) + c rho - s, r = rho^(1/q)
        k = 1.0 / q
        rho = np.minimum(sp ** q, sp / c)
        for _ in range(100):
            f = rho ** k + c * rho - sp
            step = f / (k * rho ** (k - 1) + c)
            rho_new = np.maximum(rho - step, 0.0)
            if np.all(np.abs(rho_new - rho) <= 4 * EPS * rho_new):
                rho = rho_new
                break
            rho = rho_new
        r = rho ** k
    else:
        r = np.minimum(sp, (sp / c) ** (1.0 / q))
        for _ in range(100):
            f = r + c * r ** q - sp
            step = f / (1.0 + c * q * r ** (q - 1))
            r_new = np.maximum(r - step, 0.0)
            if np.all(np.abs(r_new - r) <= 4 * EPS * r_new):
                r = r_new
                break
            r = r_new
    out = np.zeros_like(y)
    out[pos] = (r / sp)[:, None] * y[pos]
    return out


def _estimate_L(prob: StepProblem) -> float:
    spec, lat = prob.spec, prob.lattice
    lap = sum(4.0 / s ** 2 for s in lat.spacing)
    a = float(np.max(spec.a))
    if spec.p == 2:
        return a * lap + spec.lam + 1e-300
    return a * lap


def minimize_step(prob: StepProblem, settings: Optional[SolverSettings] = None,
                  w0: Optional[Field] = None, record: bool = False) -> StepResult:
    settings = settings or SolverSettings()
    free = prob.free
    ustar = prob.u_star.values
    start = prob.u_prev.values if w0 is None else w0.values
    x = np.where(free[..., None], start, ustar)
    if not free.any():
        return StepResult(Field(x, prob.lattice), 0, 0.0, True, _objective(prob, x))

    h, q = prob.h, prob.q
    pu = power_map(prob.u_prev.values, q)
    fm = free[..., None]
    def total(s_val, w):
        # value and a magnitude scale for judging rounding-level differences
        nw = np.sqrt(np.sum(w * w, axis=-1))
        a = nw ** (q + 1) / (q + 1)
        c = np.sum(pu * w, axis=-1)
        return s_val + float(np.sum(a - c)) / h, abs(s_val) + float(np.sum(a + np.abs(c))) / h

    L = _estimate_L(prob)
    shrink = settings.backtracking
    s_x, grad_x = smooth_part(prob, x)
    F_x, sc_x = total(s_x, x)
    y, s_y, grad_y = x, s_x, grad_x
    t = 1.0
    history = [F_x] if record else []
    converged = False
    it = 0
    resid = np.inf
    for it in range(1, settings.max_iters + 1):
        for _bt in range(80):
            z = prox_b(y - grad_y / L, pu, 1.0 / (L * h), q)
            z = np.where(fm, z, ustar)
            s_z, grad_z = smooth_part(prob, z)
            d = z - y
            bound = s_y + float(np.sum(grad_y * d)) + 0.5 * L * float(np.sum(d * d))
            if s_z <= bound + 1e-15 * abs(s_y) + 1e-300:
                break
            L /= shrink
        F_z, sc_z = total(s_z, z)
        band = 16 * EPS * max(sc_x, sc_z)
        if F_z > F_x + band:
            if y is x:
                # even a plain prox-gradient step fails to decrease: rounding floor
                break
            # momentum overshot; restart from the last accepted point
            y, s_y, grad_y, t = x, s_x, grad_x, 1.0
            continue
        step = float(np.max(np.abs(z - x)))
        dec = (F_x - F_z) / max(abs(F_z), 1e-300)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        beta = (t - 1) / t_new
        x_old = x
        x, s_x, grad_x, F_x, sc_x = z, s_z, grad_z, F_z, sc_z
        t = t_new
        if beta > 0:
            y = np.where(fm, x + beta * (x - x_old), ustar)
            s_y, grad_y = smooth_part(prob, y)
        else:
            y, s_y, grad_y = x, s_x, grad_x
        if record:
            history.append(F_x)
        r = grad_x + (power_map(x, q) - pu) / h
        r[~free] = 0.0
        resid = float(np.sqrt(np.sum(r * r, axis=-1)).max())
        if resid < settings.tol_obj or (dec < settings.tol_obj and step < settings.tol_step):
            converged = True
            break
        L *= shrink ** 0.25  # let the curvature estimate relax
    return StepResult(Field(x, prob.lattice), it, resid, converged,
                      F_x * prob.lattice.cell_volume, history)


@dataclass
class MinimalityReport:
    worst_margin: float
    worst_slack: float
    passed: bool
    margins: np.ndarray
    slacks: np.ndarray
    achieved_tol: float
    labels: list


def crucial_sides(prob: StepProblem, w_star: np.ndarray, w: np.ndarray):
    """Return ``(lhs, rhs, l1_dist, abs_scale)`` of ``int f(w*) <= int f(w) + (1/h) int ([[w*]]^q - [[u_prev]]^q).(w - w*)``."""
    dv = prob.lattice.cell_volume
    f_star, _ = smooth_part(prob, w_star, need_grad=False)
    f_w, _ = smooth_part(prob, w, need_grad=False)
    pw = power_map(w_star, prob.q) - power_map(prob.u_prev.values, prob.q)
    cross = np.sum(pw * (w - w_star), axis=-1)
    lhs = f_star * dv
    rhs = (f_w + float(np.sum(cross)) / prob.h) * dv
    diff = w - w_star
    l1 = float(np.sum(np.sqrt(np.sum(diff * diff, axis=-1)))) * dv
    scale = (abs(f_star) + abs(f_w) + float(np.sum(np.abs(cross))) / prob.h) * dv
    return lhs, rhs, l1, scale


def rounding_allowance(scale: float, gscale: float, l1: float) -> float:
    return 64 * EPS * (scale + gscale * l1)


def verify_step_minimality(prob: StepProblem, w_star: Field, competitors: int = 100,
                           seed: int = 0, achieved_tol: Optional[float] = None) -> MinimalityReport:
    """Check the per-step inequality against sampled admissible competitors.

    Slack is ``achieved_tol * ||w - w*||_{L^1}``: by convexity of the step
    functional, its first-order residual bounds the linear term exactly.
    """
    ws = w_star.values
    free = prob.free
    tol = step_residual(prob, ws) if achieved_tol is None else achieved_tol
    gscale = gradient_scale(prob, ws)
    rng = np.random.default_rng(seed)
    ustar = prob.u_star.values
    cands = [("w_star", ws),
             ("warm_start", np.where(free[..., None], prob.u_prev.values, ustar)),
             ("u_star", ustar.copy())]
    if np.array_equal(prob.u_prev.values[~free], ustar[~free]):
        cands.append(("u_prev", prob.u_prev.values))
    amp0 = max(float(np.max(np.abs(ws))), float(np.max(np.abs(prob.u_prev.values))), 1e-3)
    fm = free[..., None]
    for k in range(competitors):
        amp = amp0 * 10 ** rng.uniform(-4, 0)
        noise = rng.standard_normal(ws.shape)
        if k % 2:
            # smooth perturbation: a few random Fourier modes
            x = prob.lattice.coords()
            noise = np.zeros(ws.shape)
            for _ in range(3):
                kv = rng.integers(1, 5, size=x.shape[-1])
                ph = rng.uniform(0, 2 * np.pi)
                noise += np.sin(np.sum(kv * np.pi * x, axis=-1) + ph)[..., None] * rng.standard_normal(ws.shape[-1])
        cands.append((f"random_{k}", np.where(fm, ws + amp * noise, ustar)))
    margins, slacks, labels = [], [], []
    for label, w in cands:
        lhs, rhs, l1, scale = crucial_sides(prob, ws, w)
        margins.append(rhs - lhs)
        slacks.append(tol * l1 + rounding_allowance(scale, gscale, l1))
        labels.append(label)
    margins, slacks = np.array(margins), np.array(slacks)
    rel = margins + slacks
    j = int(np.argmin(rel))
    return MinimalityReport(float(margins[j]), float(slacks[j]), bool(np.all(rel >= 0)),
                            margins, slacks, tol, labels)
