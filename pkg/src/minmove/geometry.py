"""Space-time domains as per-slice node masks, and the constructions built on them.

Distances are Euclidean distances between lattice nodes.  The distance of an
occupied node to the complement is the distance to the nearest non-occupied
node of the lattice (box boundary nodes are never occupied, so this always exists).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, signal

from .grid import Field, Lattice, StructureError

# strict "dist > sigma" comparisons tolerate this much rounding, measured in
# units of the smallest spacing, before a tie counts as "greater"
_TIE = 1e-9


class RangeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpatialMask:
    lattice: Lattice
    cells: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=bool)
        if c.shape != self.lattice.dims:
            raise StructureError(f"mask shape {c.shape} does not match lattice {self.lattice.dims}")
        edge = ~_interior(self.lattice)
        if np.any(c & edge):
            raise StructureError("occupied nodes must lie strictly inside the bounding box")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)

    @classmethod
    def from_predicate(cls, lattice: Lattice, pred: Callable[[np.ndarray], np.ndarray]) -> "SpatialMask":
        """Occupy interior nodes ``x`` with ``pred(x)`` true; ``x`` has shape ``dims + (n,)``."""
        return cls(lattice, np.asarray(pred(lattice.coords()), bool) & _interior(lattice))

    @classmethod
    def full(cls, lattice: Lattice) -> "SpatialMask":
        return cls(lattice, _interior(lattice))

    @property
    def resolution(self) -> tuple[int, ...]:
        return self.lattice.dims

    @property
    def spacing(self) -> tuple[float, ...]:
        return self.lattice.spacing

    @property
    def empty(self) -> bool:
        return not self.cells.any()

    @property
    def measure(self) -> float:
        return float(self.cells.sum()) * self.lattice.cell_volume

    def __eq__(self, other):
        return (isinstance(other, SpatialMask) and self.lattice == other.lattice
                and np.array_equal(self.cells, other.cells))

    def __le__(self, other: "SpatialMask") -> bool:
        return bool(np.all(~self.cells | other.cells))


def _interior(lattice: Lattice) -> np.ndarray:
    m = np.zeros(lattice.dims, bool)
    m[tuple(slice(1, d - 1) for d in lattice.dims)] = True
    return m


@dataclass(frozen=True, eq=False)
class DomainFamily:
    times: np.ndarray
    slices: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        sl = tuple(self.slices)
        if len(sl) == 0 or len(sl) != len(t):
            raise StructureError("need one slice per time")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise StructureError("times must start at 0 and increase strictly")
        lat = sl[0].lattice
        if any(s.lattice != lat for s in sl):
            raise StructureError("all slices must share resolution and spacing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "slices", sl)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def lattice(self) -> Lattice:
        return self.slices[0].lattice

    def index_at(self, t: float) -> int:
        T = self.horizon
        tol = 1e-12 * max(T, 1.0)
        if t < -tol or t > T + tol:
            raise RangeError(f"time {t} outside [0, {T}]")
        return int(np.searchsorted(self.times, t + tol, side="right") - 1)


def slice_mask(family: DomainFamily, t: float) -> SpatialMask:
    """Slice at the largest stored time not exceeding ``t``."""
    return family.slices[family.index_at(t)]


def check_nondecreasing(family: DomainFamily) -> bool:
    lat = family.slices[0].lattice
    for s in family.slices:
        if s.lattice != lat:
            raise StructureError("mismatched slice resolutions")
    return all(a <= b for a, b in zip(family.slices[:-1], family.slices[1:]))


def distance_to_complement(mask: SpatialMask) -> np.ndarray:
    """Exact Euclidean distance from each node to the nearest non-occupied node (0 off the mask)."""
    if mask.empty:
        return np.zeros(mask.lattice.dims)
    return ndimage.distance_transform_edt(mask.cells, sampling=mask.lattice.spacing)


def inner_parallel_set(mask: SpatialMask, sigma: float) -> SpatialMask:
    """Nodes whose distance to the complement is strictly greater than ``sigma``."""
    if sigma < 0:
        raise RangeError("sigma must be nonnegative")
    d = distance_to_complement(mask)
    tie = _TIE * min(mask.lattice.spacing)
    return SpatialMask(mask.lattice, mask.cells & (d > sigma + tie))


def boundary_cell_fraction(mask: SpatialMask) -> float:
    """Fraction of occupied nodes with a non-occupied axis neighbour."""
    if mask.empty:
        return 0.0
    inner = ndimage.binary_erosion(mask.cells, border_value=0)
    return float((mask.cells & ~inner).sum() / mask.cells.sum())


@dataclass
class FatnessReport:
    delta_hat: float
    samples: int
    worst_case: Optional[tuple]
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flag: str = ""


def _disc_kernel(lattice: Lattice, r: float) -> np.ndarray:
    half = [int(np.floor(r / s)) for s in lattice.spacing]
    axes = [s * np.arange(-k, k + 1) for s, k in zip(lattice.spacing, half)]
    g = np.meshgrid(*axes, indexing="ij")
    return (sum(a * a for a in g) <= r * r * (1 + 1e-12)).astype(float)


def measure_density_estimate(mask: SpatialMask, probes: int = 12, seed: int = 0) -> FatnessReport:
    """Smallest complement density ``|B_r(x) \\ E| / |B_r(x)|`` over all complement nodes
    ``x`` and ``probes`` radii between two spacings and the lattice diameter.

    Both measures count nodes of the infinite lattice; nodes beyond the box are complement.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    lat = mask.lattice
    comp = ~mask.cells
    if not comp.any():
        return FatnessReport(0.0, 0, None, flag="complement empty: condition violated")
    rng = np.random.default_rng(seed)
    r_lo, r_hi = 2 * max(lat.spacing), max(lat.diameter, 2 * max(lat.spacing))
    if probes == 1:
        radii = np.array([r_lo])
    else:
        radii = np.geomspace(r_lo, r_hi, probes)
        jit = rng.uniform(-0.25, 0.25, probes) * (np.log(r_hi / r_lo) / (probes - 1))
        jit[[0, -1]] = 0.0
        radii = radii * np.exp(jit)
    occ = mask.cells.astype(float)
    best, worst = 1.0, None
    for r in radii:
        k = _disc_kernel(lat, r)
        inside = np.rint(signal.fftconvolve(occ, k, mode="same"))
        dens = 1.0 - inside / k.sum()
        dens = np.where(comp, dens, np.inf)
        j = int(np.argmin(dens))
        if dens.flat[j] < best:
            idx = np.unravel_index(j, lat.dims)
            best = float(dens.flat[j])
            worst = (tuple(float(c) for c in lat.coords()[idx]), float(r))
    flag = "" if mask.cells.any() else "empty domain"
    if worst is None:
        worst = (tuple(float(c) for c in lat.coords()[np.unravel_index(np.argmax(comp), lat.dims)]),
                 float(radii[0]))
    return FatnessReport(best, int(comp.sum()) * len(radii), worst, radii, flag)


def complementary_excess(family: DomainFamily, s: float, t: float) -> float:
    """``sup`` over nodes outside ``E^t`` of the distance to the nodes outside ``E^s``."""
    if s > t:
        raise RangeError("need s <= t")
    Es, Et = slice_mask(family, s), slice_mask(family, t)
    sel = Es.cells & ~Et.cells
    if not sel.any():
        return 0.0
    return float(distance_to_complement(Es)[sel].max())


def cutoff_eta_sigma(mask: SpatialMask, sigma: float) -> np.ndarray:
    """Piecewise-linear cutoff: 0 up to distance ``sigma``, 1 from ``2 sigma`` on."""
    if sigma <= 0:
        raise RangeError("sigma must be positive")
    d = distance_to_complement(mask)
    return np.where(mask.cells, np.clip(d / sigma - 1.0, 0.0, 1.0), 0.0)


def bump_kernel(lattice: Lattice, eps: float) -> np.ndarray:
    """Discretely normalized ``exp(-1/(1-|x/eps|^2))`` on the nodes of ``B_eps``."""
    if eps < max(lattice.spacing):
        raise RangeError("mollifier radius is below one lattice spacing")
    half = [int(np.floor(eps / s)) for s in lattice.spacing]
    axes = [s * np.arange(-k, k + 1) for s, k in zip(lattice.spacing, half)]
    g = np.meshgrid(*axes, indexing="ij")
    rho2 = sum(a * a for a in g) / (eps * eps)
    with np.errstate(divide="ignore", over="ignore"):
        k = np.where(rho2 < 1, np.exp(-1.0 / (1.0 - np.minimum(rho2, 1 - 1e-300))), 0.0)
    return k / k.sum()


def mollify_initial_datum(u_o: Field, u_star: Field, mask0: SpatialMask, epsilon: float) -> Field:
    """``u_* + ((u_o - u_*) chi_{E^{0,2eps}}) * phi_eps``."""
    if epsilon <= 0:
        raise RangeError("epsilon must be positive")
    if u_o.lattice != u_star.lattice or u_o.lattice != mask0.lattice:
        raise StructureError("fields and mask must share the lattice")
    k = bump_kernel(mask0.lattice, epsilon)
    inner = inner_parallel_set(mask0, 2 * epsilon).cells
    diff = (u_o.values - u_star.values) * inner[..., None]
    out = np.empty_like(diff)
    for c in range(diff.shape[-1]):
        out[..., c] = ndimage.correlate(diff[..., c], k, mode="constant", cval=0.0)
    return Field(u_star.values + out, u_o.lattice)


# ---------------------------------------------------------------------------
# generators


def cylinder(mask: SpatialMask, T: float) -> DomainFamily:
    return DomainFamily(np.array([0.0, T]), (mask, mask))


def ball_mask(lattice: Lattice, center, radius: float) -> SpatialMask:
    c = np.asarray(center, float)
    return SpatialMask.from_predicate(lattice, lambda x: np.sum((x - c) ** 2, axis=-1) < radius ** 2)


def expanding_ball(lattice: Lattice, center, radius_fn: Callable[[float], float],
                   times: Sequence[float]) -> DomainFamily:
    return DomainFamily(np.asarray(times, float),
                        tuple(ball_mask(lattice, center, radius_fn(t)) for t in times))


def expanding_rectangle(lattice: Lattice, lo_fn, hi_fn, times: Sequence[float]) -> DomainFamily:
    def mk(t):
        lo, hi = np.asarray(lo_fn(t), float), np.asarray(hi_fn(t), float)
        return SpatialMask.from_predicate(lattice, lambda x: np.all((x > lo) & (x < hi), axis=-1))
    return DomainFamily(np.asarray(times, float), tuple(mk(t) for t in times))


def write_family_csv(family: DomainFamily, path) -> None:
    """Header ``t,c0,c1,...``; one row per slice with 0/1 cells in row-major order."""
    n = family.lattice.num_nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"c{k}" for k in range(n)])
        for t, s in zip(family.times, family.slices):
            w.writerow([repr(float(t))] + s.cells.ravel().astype(int).tolist())


def read_family_csv(path, lattice: Lattice) -> DomainFamily:
    times, slices = [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) != lattice.num_nodes + 1:
            raise StructureError(f"{path}: expected {lattice.num_nodes} cell columns")
        for lineno, row in enumerate(r, start=2):
            try:
                times.append(float(row[0]))
                cells = np.array([int(a) for a in row[1:]], dtype=bool).reshape(lattice.dims)
            except ValueError as exc:
                raise StructureError(f"{path}:{lineno}: {exc}") from None
            slices.append(SpatialMask(lattice, cells))
    return DomainFamily(np.array(times), tuple(slices))
