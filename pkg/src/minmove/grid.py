"""Uniform lattices, grid functions and the discrete norms built on them.

Values are stored node-major with the component axis last, i.e. an array of
shape ``lattice.dims + (N,)``.  Integrals use node quadrature with weight
``lattice.cell_volume``; gradients are forward differences, set to zero on
nodes lacking a full forward stencil.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class StructureError(ValueError):
    """Raised for incompatible or degenerate lattice structure."""


@dataclass(frozen=True)
class Lattice:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) not in (1, 2):
            raise StructureError(f"only n in {{1, 2}} supported, got n={len(dims)}")
        if len(spacing) != len(dims):
            raise StructureError("spacing must have one entry per axis")
        if any(d < 1 for d in dims) or any(s <= 0 for s in spacing):
            raise StructureError("dims must be positive and spacing > 0")
        origin = self.origin
        origin = tuple(0.0 for _ in dims) if origin is None else tuple(float(o) for o in origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def box(cls, lo, hi, dims) -> "Lattice":
        """Lattice with ``dims`` nodes per axis spanning ``[lo, hi]`` including both ends."""
        dims = tuple(int(d) for d in np.atleast_1d(dims))
        lo = np.broadcast_to(np.asarray(lo, float), (len(dims),))
        hi = np.broadcast_to(np.asarray(hi, float), (len(dims),))
        if any(d < 2 for d in dims):
            raise StructureError("a box lattice needs at least 2 nodes per axis")
        spacing = tuple((h - l) / (d - 1) for l, h, d in zip(lo, hi, dims))
        return cls(dims, spacing, tuple(lo))

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.dims))

    def axes(self) -> list[np.ndarray]:
        return [o + s * np.arange(d) for o, s, d in zip(self.origin, self.spacing, self.dims)]

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``dims + (n,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    @property
    def diameter(self) -> float:
        return float(np.hypot.reduce([s * (d - 1) for s, d in zip(self.spacing, self.dims)]))


@dataclass
class Field:
    values: np.ndarray
    lattice: Lattice

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == self.lattice.dims:
            v = v[..., None]
        if v.shape[:-1] != self.lattice.dims:
            raise StructureError(f"field shape {v.shape} does not match lattice {self.lattice.dims}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite entries")
        self.values = v

    @property
    def components(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def zeros(cls, lattice: Lattice, components: int = 1) -> "Field":
        return cls(np.zeros(lattice.dims + (components,)), lattice)

    @classmethod
    def from_function(cls, lattice: Lattice, fn, components: int = 1) -> "Field":
        x = lattice.coords()
        vals = np.asarray(fn(x), dtype=float)
        if vals.shape == lattice.dims:
            vals = np.repeat(vals[..., None], components, axis=-1) if components > 1 else vals[..., None]
        return cls(vals, lattice)

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.lattice)


@dataclass
class Trajectory:
    """Piecewise-constant-in-time approximation: ``values[i]`` lives on ``((k-1)h, kh]``
    with ``k = offset + i``."""

    values: np.ndarray
    lattice: Lattice
    h: float
    q: float = 1.0
    p: float = 2.0
    family: Optional[object] = None
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[1:-1] != self.lattice.dims:
            raise StructureError("trajectory values must have shape (K,) + dims + (N,)")
        if self.h <= 0:
            raise ValueError("step size must be positive")

    @classmethod
    def from_fields(cls, fields: Sequence[Field], h: float, **kw) -> "Trajectory":
        return cls(np.stack([f.values for f in fields]), fields[0].lattice, h, **kw)

    @property
    def ell(self) -> int:
        return self.values.shape[0] - 1

    @property
    def T(self) -> float:
        return (self.offset + self.ell) * self.h

    @property
    def times(self) -> np.ndarray:
        return (self.offset + np.arange(self.values.shape[0])) * self.h

    def step(self, i: int) -> Field:
        return Field(self.values[i], self.lattice)

    @property
    def steps(self) -> list[Field]:
        return [self.step(i) for i in range(self.values.shape[0])]

    def with_values(self, values: np.ndarray, **kw) -> "Trajectory":
        args = dict(lattice=self.lattice, h=self.h, q=self.q, p=self.p,
                    family=self.family, offset=self.offset)
        args.update(kw)
        return Trajectory(values, **args)


def _vec_norm(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(values * values, axis=-1))


def stencil_mask(lattice: Lattice) -> np.ndarray:
    """Nodes owning a full forward stencil (a cell)."""
    m = np.ones(lattice.dims, bool)
    for ax in range(lattice.n):
        idx = [slice(None)] * lattice.n
        idx[ax] = -1
        m[tuple(idx)] = False
    return m


def gradient_array(values: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Forward-difference gradient of ``values`` (shape ``(..., *dims, N)``).

    Returns shape ``(..., *dims, N, n)``; nodes without a full forward stencil get 0.
    """
    n = lattice.n
    if any(d < 2 for d in lattice.dims):
        raise StructureError("discrete gradient needs at least 2 nodes per axis")
    lead = values.ndim - n - 1
    out = np.zeros(values.shape + (n,))
    for ax in range(n):
        a = lead + ax
        diff = np.diff(values, axis=a) / lattice.spacing[ax]
        sl = [slice(None)] * values.ndim
        sl[a] = slice(0, lattice.dims[ax] - 1)
        out[tuple(sl) + (ax,)] = diff
    full = stencil_mask(lattice)
    out *= full.reshape(full.shape + (1, 1))
    return out


def gradient_adjoint(G: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Adjoint of :func:`gradient_array` (without the stencil mask, which the
    caller has already applied to ``G``): maps ``(*dims, N, n)`` to ``(*dims, N)``."""
    out = np.zeros(G.shape[:-1])
    for ax in range(lattice.n):
        g = G[..., ax] / lattice.spacing[ax]
        sl_lo = [slice(None)] * out.ndim
        sl_hi = [slice(None)] * out.ndim
        sl_lo[ax] = slice(0, lattice.dims[ax] - 1)
        sl_hi[ax] = slice(1, None)
        gs = g[tuple(sl_lo)]
        out[tuple(sl_lo)] -= gs
        out[tuple(sl_hi)] += gs
    return out


def discrete_gradient(field: Field) -> np.ndarray:
    """Per-node ``N x n`` forward-difference gradient matrices."""
    return gradient_array(field.values, field.lattice)


def lp_space_norm(field: Field, mask=None, p: float = 2.0) -> float:
    """``(sum over masked nodes |u|^p dx^n)^(1/p)``; an empty mask gives 0."""
    if p < 1:
        raise ValueError("p must be >= 1")
    cells = np.ones(field.lattice.dims, bool) if mask is None else _cells(mask)
    if not cells.any():
        return 0.0
    a = _vec_norm(field.values)[cells]
    if np.isinf(p):
        return float(a.max())
    return float(np.sum(a ** p) * field.lattice.cell_volume) ** (1.0 / p)


def _cells(mask) -> np.ndarray:
    return mask.cells if hasattr(mask, "cells") else np.asarray(mask, bool)


def vp_norm(traj: Trajectory, p: Optional[float] = None) -> float:
    """Space-time ``||Dv||_{L^p} + ||v||_{L^p}`` over ``(0, T]``."""
    p = traj.p if p is None else p
    v = traj.values[1:] if traj.offset == 0 else traj.values
    dv = gradient_array(v, traj.lattice)
    vol = traj.lattice.cell_volume * traj.h
    grad_part = float(np.sum(np.sqrt(np.sum(dv * dv, axis=(-2, -1))) ** p) * vol) ** (1 / p)
    val_part = float(np.sum(_vec_norm(v) ** p) * vol) ** (1 / p)
    return grad_part + val_part


def lq1_space_time_norm(traj: Trajectory, q: Optional[float] = None) -> float:
    q = traj.q if q is None else q
    if q <= 0:
        raise ValueError("q must be positive")
    v = traj.values[1:] if traj.offset == 0 else traj.values
    s = float(np.sum(_vec_norm(v) ** (q + 1)) * traj.lattice.cell_volume * traj.h)
    return s ** (1.0 / (q + 1))


def clamp_to_boundary(field: Field, mask, u_star: Field) -> Field:
    """Copy ``u_star`` onto every node outside ``mask``."""
    if field.lattice != u_star.lattice:
        raise StructureError("fields live on different lattices")
    cells = _cells(mask)
    out = field.values.copy()
    out[~cells] = u_star.values[~cells]
    return Field(out, field.lattice)


def write_field_csv(field: Field, path) -> None:
    """Header ``x1[,x2],c1..cN``; one row per node in row-major order."""
    lat = field.lattice
    coords = lat.coords().reshape(-1, lat.n)
    vals = field.values.reshape(-1, field.components)
    header = [f"x{k + 1}" for k in range(lat.n)] + [f"c{k + 1}" for k in range(field.components)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, v in zip(coords, vals):
            w.writerow([repr(float(a)) for a in itertools.chain(x, v)])


def read_field_csv(path, lattice: Lattice) -> Field:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        n = sum(1 for h in header if h.startswith("x"))
        if n != lattice.n:
            raise StructureError(f"{path}: file has {n} coordinate columns, lattice has {lattice.n}")
        rows = np.array([[float(a) for a in row] for row in r])
    if rows.shape[0] != lattice.num_nodes:
        raise StructureError(f"{path}: expected {lattice.num_nodes} rows, got {rows.shape[0]}")
    return Field(rows[:, n:].reshape(lattice.dims + (-1,)), lattice)
