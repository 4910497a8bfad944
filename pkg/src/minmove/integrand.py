"""Built-in convex integrands ``f(x, u, xi)`` of p-Dirichlet type.

With regularization ``eps`` the gradient part is

    a(x)/p * ((|xi|^2 + eps^2)^(p/2) - eps^p)

and the lower-order variant adds ``lam/p * ((|u|^2 + eps^2)^(p/2) - eps^p)``.
Both vanish at zero, so ``f >= 0``.  ``|xi|`` is the Frobenius norm.

Array methods (``density``, ``d_u``, ``d_xi``) take node arrays shaped
``dims + (N,)`` and ``dims + (N, n)``; subclasses overriding these three
methods plug into the minimizer unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("p_dirichlet", "p_dirichlet_lower_order", "coefficient_p_dirichlet")


class NondifferentiableError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntegrandSpec:
    kind: str = "p_dirichlet"
    p: float = 2.0
    lam: float = 0.0
    a: object = 1.0
    G: object = None
    eps_reg: Optional[float] = None
    L: Optional[float] = None
    nu_declared: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown integrand kind {self.kind!r}")
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        eps = self.eps_reg
        if eps is None:
            eps = 1e-8 if self.p < 2 else 0.0
        if eps < 0:
            raise ValueError("eps_reg must be nonnegative")
        object.__setattr__(self, "eps_reg", float(eps))
        a = np.asarray(self.a, dtype=float)
        if self.kind != "coefficient_p_dirichlet" and a.ndim > 0:
            raise ValueError("a coefficient field needs kind coefficient_p_dirichlet")
        if np.any(a <= 0) and self.kind != "coefficient_p_dirichlet":
            raise ValueError("coefficient must be positive")
        object.__setattr__(self, "a", a)
        lam = self.lam if self.kind == "p_dirichlet_lower_order" else 0.0
        object.__setattr__(self, "lam", float(lam))
        if self.G is None:
            object.__setattr__(self, "G", np.asarray(2.0 * eps ** self.p))
        else:
            object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        if np.any(self.G < 0):
            raise ValueError("G must be nonnegative")
        if self.L is None:
            amax = float(np.max(self.a))
            L = max(amax, self.lam) * max(1.0, 2 ** (self.p / 2 - 1)) / self.p
            object.__setattr__(self, "L", max(L, self.nu))

    @property
    def nu(self) -> float:
        # derived from the coefficient unless a value is declared for auditing
        if self.nu_declared is not None:
            return float(self.nu_declared)
        return float(np.min(self.a)) / self.p

    @property
    def coercivity_shift(self) -> float:
        """Pointwise amount by which ``nu |xi|^p <= f`` may fail because of regularization."""
        if self.p >= 2:
            return 0.0
        return float(np.max(self.a)) * self.eps_reg ** self.p / self.p

    # -- array interface -------------------------------------------------
    def _reg(self, sq):
        e = self.eps_reg
        return ((sq + e * e) ** (self.p / 2) - e ** self.p) / self.p

    def _dreg(self, sq, what):
        e = self.eps_reg
        if self.p < 2 and e == 0:
            if np.any(sq == 0):
                raise NondifferentiableError(f"p < 2 with eps_reg = 0 is not differentiable at {what} = 0")
        with np.errstate(divide="ignore"):
            return (sq + e * e) ** (self.p / 2 - 1)

    def density(self, u: np.ndarray, xi: np.ndarray, a=None) -> np.ndarray:
        a = self.a if a is None else a
        out = a * self._reg(np.sum(xi * xi, axis=(-2, -1)))
        if self.lam:
            out = out + self.lam * self._reg(np.sum(u * u, axis=-1))
        return out

    def d_xi(self, u: np.ndarray, xi: np.ndarray, a=None) -> np.ndarray:
        a = self.a if a is None else a
        w = a * self._dreg(np.sum(xi * xi, axis=(-2, -1)), "xi")
        return w[..., None, None] * xi

    def d_u(self, u: np.ndarray, xi: np.ndarray, a=None) -> np.ndarray:
        if not self.lam:
            return np.zeros_like(u)
        w = self.lam * self._dreg(np.sum(u * u, axis=-1), "u")
        return w[..., None] * u

    def a_at(self, x):
        if self.a.ndim == 0 or x is None:
            return self.a if self.a.ndim == 0 else None
        return self.a[tuple(x)]

    def G_at(self, x):
        if self.G.ndim == 0 or x is None:
            return self.G
        return self.G[tuple(x)]


def _point_args(spec, x, u, xi):
    u = np.atleast_1d(np.asarray(u, float))
    xi = np.asarray(xi, float)
    if xi.ndim < 2:
        xi = xi.reshape(u.shape[-1], -1)
    a = spec.a_at(x)
    if a is None:
        raise ValueError("a node index is required for a coefficient field")
    return u, xi, a


def eval(spec: IntegrandSpec, x, u, xi) -> float:  # noqa: A001 - public name by design
    u, xi, a = _point_args(spec, x, u, xi)
    return float(spec.density(u, xi, a))


def grad_u(spec: IntegrandSpec, x, u, xi) -> np.ndarray:
    u, xi, a = _point_args(spec, x, u, xi)
    return spec.d_u(u, xi, a)


def grad_xi(spec: IntegrandSpec, x, u, xi) -> np.ndarray:
    u, xi, a = _point_args(spec, x, u, xi)
    return spec.d_xi(u, xi, a)


@dataclass
class CheckResult:
    passed: bool
    worst_margin: float
    witness: Optional[dict] = None
    constant: Optional[float] = None


@dataclass
class IntegrandReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def _samples(spec, rng, count, N, n):
    mag_u = 10 ** rng.uniform(-2, 2, count)
    mag_x = 10 ** rng.uniform(-2, 2, count)
    u = rng.standard_normal((count, N))
    xi = rng.standard_normal((count, N, n))
    u *= (mag_u / np.linalg.norm(u, axis=-1))[:, None]
    xi *= (mag_x / np.sqrt(np.sum(xi * xi, axis=(-2, -1))))[:, None, None]
    # a share of exact zeros exercises the kinks
    u[: count // 20] = 0.0
    xi[count // 20: count // 10] = 0.0
    if spec.a.ndim:
        idx = rng.integers(0, spec.a.size, count)
        a = spec.a.ravel()[idx]
        G = np.broadcast_to(spec.G, spec.a.shape).ravel()[idx]
    else:
        idx = None
        a = np.broadcast_to(spec.a, (count,))
        G = np.broadcast_to(spec.G, (count,)) if spec.G.ndim == 0 else spec.G.ravel()[rng.integers(0, spec.G.size, count)]
    return u, xi, a, G, idx


def _lipschitz_ratio(spec, u1, x1, u2, x2, a, G):
    p = spec.p
    f1, f2 = spec.density(u1, x1, a), spec.density(u2, x2, a)
    nrm = lambda z, ax: np.sqrt(np.sum(z * z, axis=ax))
    base = (nrm(x1, (-2, -1)) + nrm(x2, (-2, -1)) + nrm(u1, -1) + nrm(u2, -1)) ** (p - 1) + G ** ((p - 1) / p)
    dist = nrm(u1 - u2, -1) + nrm(x1 - x2, (-2, -1))
    rhs = base * dist
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(rhs > 0, np.abs(f1 - f2) / rhs, 0.0)


def self_check(spec: IntegrandSpec, samples: int = 1000, seed: int = 0, N: int = 2,
               n: int = 2) -> IntegrandReport:
    """Sampled convexity, coercivity, p-growth and local Lipschitz checks."""
    if samples < 1000:
        raise ValueError("self_check needs at least 10^3 samples")
    rng = np.random.default_rng(seed)
    rep = IntegrandReport()
    u1, x1, a, G, idx = _samples(spec, rng, samples, N, n)
    u2, x2, _, _, _ = _samples(spec, rng, samples, N, n)
    if idx is not None:
        a = spec.a.ravel()[idx]
    f1, f2 = spec.density(u1, x1, a), spec.density(u2, x2, a)
    fm = spec.density((u1 + u2) / 2, (x1 + x2) / 2, a)
    gap = (f1 + f2) / 2 - fm
    tol = 1e-10 * (np.abs(f1) + np.abs(f2)) + 1e-300
    rep.checks["convexity"] = _result(gap + tol, {"u1": u1, "xi1": x1, "u2": u2, "xi2": x2})

    p = spec.p
    nx1 = np.sqrt(np.sum(x1 * x1, axis=(-2, -1)))
    nu1 = np.linalg.norm(u1, axis=-1)
    ok = f1 + spec.coercivity_shift + 1e-12 * np.abs(f1) - spec.nu * nx1 ** p
    rep.checks["coercivity"] = _result(ok, {"u": u1, "xi": x1})
    if spec.nu <= 0:
        rep.checks["coercivity"] = CheckResult(False, spec.nu, {"nu": spec.nu})
    env = spec.L * (nx1 ** p + nu1 ** p + G)
    rep.checks["p_growth"] = _result(env * (1 + 1e-12) - f1, {"u": u1, "xi": x1})

    # Lipschitz constant derived on this draw, confirmed on an independent one
    c_hat = 1.1 * float(np.max(_lipschitz_ratio(spec, u1, x1, u2, x2, a, G)))
    rng2 = np.random.default_rng(seed + 1)
    v1, y1, b, H, idx2 = _samples(spec, rng2, samples, N, n)
    v2, y2, _, _, _ = _samples(spec, rng2, samples, N, n)
    r = _lipschitz_ratio(spec, v1, y1, v2, y2, b, H)
    res = _result(c_hat - r, {"u1": v1, "xi1": y1, "u2": v2, "xi2": y2})
    res.constant = c_hat
    rep.checks["lipschitz"] = res
    return rep


def _result(margin, arrays) -> CheckResult:
    j = int(np.argmin(margin))
    wit = None
    if margin[j] < 0:
        wit = {k: v[j].tolist() for k, v in arrays.items()}
    return CheckResult(bool(margin[j] >= 0), float(margin[j]), wit)


def growth_envelope(spec: IntegrandSpec, M: float, quantile_grid=None, N: int = 1,
                    n: int = 2, dims=None) -> np.ndarray:
    """Per-node maximum of ``f`` over ``max(|u|, |xi|) <= M`` on a magnitude grid."""
    if M < 0:
        raise ValueError("M must be nonnegative")
    qg = np.linspace(0.0, 1.0, 11) if quantile_grid is None else np.asarray(quantile_grid, float)
    mu, mx = np.meshgrid(M * qg, M * qg, indexing="ij")
    u = np.zeros(mu.shape + (N,))
    u[..., 0] = mu
    xi = np.zeros(mx.shape + (N, n))
    xi[..., 0, 0] = mx
    a = spec.a if spec.a.ndim else np.full(dims if dims else (), float(spec.a))
    flat_a = np.asarray(a).reshape(-1)
    vals = np.array([np.max(spec.density(u, xi, ai)) for ai in flat_a])
    return vals.reshape(np.shape(a)) if np.ndim(a) else float(vals[0])
