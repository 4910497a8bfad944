"""Power maps, the boundary term ``b`` and sampled constants for the power/b inequalities.

Every function broadcasts over leading axes; the last axis holds the ``N``
vector components.  Plain Python scalars are treated as ``N = 1`` vectors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import qmc
from scipy.special import ndtri

LEMMA_IDS = ("L3.1a", "L3.1b", "L3.2", "L3.3", "L3.4a", "L3.4b", "L3.5")

# Relative allowance for floating-point cancellation when asserting an
# inequality: LHS <= c*RHS + ROUND_RTOL * max(|u|,|v|)^degree.
ROUND_RTOL = 1e-12
SAFETY = 1.1


class LemmaDerivationError(RuntimeError):
    pass


def _as_vec(u) -> np.ndarray:
    a = np.asarray(u, dtype=float)
    return a[None] if a.ndim == 0 else a


def _norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def power_map(u, alpha: float):
    """``|u|^(alpha-1) u`` with the value 0 at ``u = 0``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    scalar = np.ndim(u) == 0
    a = _as_vec(u)
    r = _norm(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(r > 0, r ** (alpha - 1.0), 0.0)
    out = fac[..., None] * a
    return float(out[0]) if scalar else out


def boundary_term_b(u, v, q: float):
    """``|v|^(q+1)/(q+1) + q|u|^(q+1)/(q+1) - [[u]]^q . v``, clipped at 0 against rounding."""
    if q <= 0:
        raise ValueError("q must be positive")
    a, c = _as_vec(u), _as_vec(v)
    nu, nv = _norm(a), _norm(c)
    val = (nv ** (q + 1) + q * nu ** (q + 1)) / (q + 1) - np.sum(power_map(a, q) * c, axis=-1)
    val = np.maximum(val, 0.0)
    return float(val) if val.ndim == 0 else val


def dissipation_term(u_prev, u_next, q: float):
    """``|[[u_next]]^((q+1)/2) - [[u_prev]]^((q+1)/2)|^2``."""
    if q <= 0:
        raise ValueError("q must be positive")
    a = (q + 1) / 2
    d = power_map(_as_vec(u_next), a) - power_map(_as_vec(u_prev), a)
    val = np.sum(d * d, axis=-1)
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------------------
# the inequalities, each as (lhs, rhs, scale); "holds with c" means lhs <= c*rhs


def _sides(lemma_id: str, s: float, u: np.ndarray, v: np.ndarray):
    nu, nv = _norm(u), _norm(v)
    if lemma_id in ("L3.1a", "L3.1b"):
        pw = _norm(power_map(v, s) - power_map(u, s))
        with np.errstate(divide="ignore", invalid="ignore"):
            base = np.where(nu + nv > 0, (nu + nv) ** (s - 1.0), 0.0)
        mid = base * _norm(v - u)
        return (pw, mid) if lemma_id == "L3.1a" else (mid, pw)
    if lemma_id == "L3.2":
        return _norm(v - u) ** s, _norm(power_map(v, s) - power_map(u, s))
    a = (s + 1) / 2
    if lemma_id == "L3.3":
        return (_norm(u - v) ** (s + 1),
                (nu ** a + nv ** a) * _norm(power_map(u, a) - power_map(v, a)))
    b = boundary_term_b(u, v, s)
    if lemma_id == "L3.4a":
        return dissipation_term(u, v, s), b
    if lemma_id == "L3.4b":
        return b, np.sum((power_map(v, s) - power_map(u, s)) * (v - u), axis=-1)
    if lemma_id == "L3.5":
        return (nv ** (s + 1) / (s + 1),
                2 * b + 2 ** (2 + 1 / s) * s / (s + 1) * nu ** (s + 1))
    raise ValueError(f"unknown lemma id {lemma_id!r}")


def _scale(lemma_id, u, v, s):
    # all inequalities are homogeneous; this is the common degree of their terms
    m = np.maximum(_norm(u), _norm(v))
    deg = s if lemma_id in ("L3.1a", "L3.1b", "L3.2") else s + 1
    return m ** deg


def lemma_sides(lemma_id: str, q_or_alpha: float, u, v):
    """Return ``(lhs, rhs)`` for the named inequality at the pairs ``(u, v)``."""
    _validate(lemma_id, q_or_alpha)
    return _sides(lemma_id, q_or_alpha, _as_vec(u), _as_vec(v))


def _validate(lemma_id, s):
    if lemma_id not in LEMMA_IDS:
        raise ValueError(f"unknown lemma id {lemma_id!r}")
    if s <= 0:
        raise ValueError("exponent must be positive")
    if lemma_id == "L3.2" and s <= 1:
        raise ValueError("L3.2 needs alpha > 1")


def sample_pairs(count: int, N: int, seed: int, mag_range=(1e-3, 1e3)):
    """Deterministic quasi-random pairs plus structured ones (zero, equal,
    antipodal, axis-aligned, near-equal).  Returns ``(u, v)`` of shape ``(M, N)``."""
    lo, hi = np.log10(mag_range[0]), np.log10(mag_range[1])
    sob = qmc.Sobol(d=2 * N + 2, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(count, 2))))
    pts = sob.random_base2(m)[:count]
    pts = np.clip(pts, 1e-12, 1 - 1e-12)
    ru = 10 ** (lo + (hi - lo) * pts[:, 0])
    rv = 10 ** (lo + (hi - lo) * pts[:, 1])
    du = ndtri(pts[:, 2:2 + N])
    dv = ndtri(pts[:, 2 + N:])
    du /= _norm(du)[:, None]
    dv /= _norm(dv)[:, None]
    u, v = ru[:, None] * du, rv[:, None] * dv

    rng = np.random.default_rng(seed)
    k = max(16, count // 50)
    mags = 10 ** rng.uniform(lo, hi, size=(k, 1))
    dirs = rng.standard_normal((k, N))
    dirs /= _norm(dirs)[:, None]
    base = mags * dirs
    e1 = np.zeros((k, N))
    e1[:, 0] = mags[:, 0]
    gaps = 10 ** rng.uniform(-4, 0, size=(k, 1))
    pert = rng.standard_normal((k, N))
    pert /= _norm(pert)[:, None]
    su = [np.zeros((k, N)), base, base, base, e1, base]
    sv = [base, np.zeros((k, N)), base, -base * rng.uniform(0.1, 10, (k, 1)),
          -e1 * 10 ** rng.uniform(-2, 2, (k, 1)), base + gaps * mags * pert]
    return np.concatenate([u] + su), np.concatenate([v] + sv)


@dataclass(frozen=True)
class LemmaConstant:
    lemma_id: str
    q_or_alpha: float
    c_hat: float
    sample_count: int
    seed: int
    sup_ratio: float = float("nan")
    N: int = 3
    exact: bool = False


def _ratio_sup(lemma_id, s, u, v):
    lhs, rhs = _sides(lemma_id, s, u, v)
    scale = _scale(lemma_id, u, v, s)
    keep = rhs > ROUND_RTOL * scale
    if np.any((~keep) & (lhs > ROUND_RTOL * scale)):
        raise LemmaDerivationError(f"{lemma_id}: positive lhs against vanishing rhs")
    if not keep.any():
        raise LemmaDerivationError(f"{lemma_id}: no nondegenerate samples")
    r = lhs[keep] / rhs[keep]
    if not np.all(np.isfinite(r)) or r.max() > 1e8:
        raise LemmaDerivationError(f"{lemma_id}: ratio unbounded over samples")
    return float(r.max())


def derive_lemma_constant(lemma_id: str, q_or_alpha: float, samples: int = 10_000,
                          seed: int = 0, N: int = 3) -> LemmaConstant:
    """Sampled constant with a 10% safety factor, or the exact value where one is known.

    ``q_or_alpha`` is ``alpha`` for L3.1a/L3.1b/L3.2 and ``q`` otherwise.
    For L3.5 the inequality carries explicit constants, so ``c_hat`` is the
    multiplier 1 and ``sup_ratio`` must not exceed 1.
    """
    _validate(lemma_id, q_or_alpha)
    if samples < 10_000:
        raise ValueError("derivation needs at least 10^4 samples")
    u, v = sample_pairs(samples, N, seed)
    sup = _ratio_sup(lemma_id, q_or_alpha, u, v)
    s = q_or_alpha
    if lemma_id == "L3.4b":
        c, exact = 1.0, True
    elif lemma_id == "L3.5":
        if sup > 1 + 1e-12:
            raise LemmaDerivationError(f"L3.5 explicit constants violated, sup ratio {sup}")
        c, exact = 1.0, True
    elif lemma_id == "L3.4a" and s == 1:
        c, exact = 2.0, True
    elif lemma_id in ("L3.1a", "L3.1b") and s == 1:
        c, exact = 1.0, True
    else:
        c, exact = SAFETY * sup, False
    return LemmaConstant(lemma_id, float(s), float(c), int(len(u)), int(seed), sup, N, exact)


def lemma_exponent(lemma_id: str, q: float) -> float:
    """Exponent at which each inequality is exercised for a given ``q``."""
    return {"L3.1a": q, "L3.1b": q, "L3.2": q + 1}.get(lemma_id, q)


def derive_all(q: float, samples: int = 10_000, seed: int = 0, N: int = 3) -> list[LemmaConstant]:
    return [derive_lemma_constant(l, lemma_exponent(l, q), samples, seed, N) for l in LEMMA_IDS]


@dataclass
class LemmaCheck:
    lemma_id: str
    q_or_alpha: float
    passed: bool
    samples: int
    violations: int
    worst_ratio: float
    witness: tuple | None = None


def check_lemma_inequalities(constants: Sequence[LemmaConstant], fresh_samples: int = 100_000,
                             seed: int = 1, N: int | None = None,
                             mag_range=(1e-3, 1e3)) -> dict[str, LemmaCheck]:
    """Assert each inequality with its ``c_hat`` on a fresh sample set."""
    out = {}
    for c in constants:
        if c.seed == seed:
            raise ValueError("fresh samples must use a seed different from the derivation seed")
        n = c.N if N is None else N
        u, v = sample_pairs(fresh_samples, n, seed, mag_range)
        lhs, rhs = _sides(c.lemma_id, c.q_or_alpha, u, v)
        allow = ROUND_RTOL * _scale(c.lemma_id, u, v, c.q_or_alpha)
        bad = lhs > c.c_hat * rhs + allow
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > allow, lhs / rhs, 0.0)
        k = int(np.argmax(ratio))
        witness = None
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            witness = (u[j].tolist(), v[j].tolist())
        key = f"{c.lemma_id}@{c.q_or_alpha:g}"
        out[key] = LemmaCheck(c.lemma_id, c.q_or_alpha, not bad.any(), len(u),
                              int(bad.sum()), float(ratio[k]), witness)
    return out


def write_constants_csv(constants: Iterable[LemmaConstant], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lemma_id", "q", "c_hat", "samples", "seed"])
        for c in constants:
            w.writerow([c.lemma_id, repr(c.q_or_alpha), repr(c.c_hat), c.sample_count, c.seed])
