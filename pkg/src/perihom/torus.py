"""Uniform periodic grids, tensor fields and lattice-sum convolutions on the torus.

Kernel integrals are discretized by a point-mass measure: the kernel mass of
every grid-aligned cell ``h (n + [-1/2, 1/2]^d)`` is placed at the node offset
``z_n = h n``.  The masses are symmetrized so that ``m(n) = m(-n)`` holds
bitwise, and the origin mass is dropped from direction-weighted sums because
``z (x) z / |z|^2`` is defined as zero there.  Every weighted sum in the
toolkit is a finite sum over these offsets, which keeps discrete identities
(evenness, vanishing means, self-adjointness) exact up to round-off.

Field values are stored component-first: a rank-r field on an N^d grid has
``values.shape == (d,) * r + (N,) * d``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AccuracyError, ArgumentError, ValidationError
from .model import KernelSpec

# ---------------------------------------------------------------------------
# Grids and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorusGrid:
    """``N^d`` nodes ``q = h n`` on the periodic box ``[0, L)^d`` with ``h = L / N``."""

    d: int
    N: int
    box_length: float = 1.0

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ArgumentError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 4 or self.N % 2:
            raise ArgumentError(f"N must be even and at least 4, got {self.N}")
        if not self.box_length > 0:
            raise ArgumentError("box length must be positive")

    @property
    def h(self) -> float:
        return self.box_length / self.N

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def coords(self) -> np.ndarray:
        """Node coordinates with shape ``(d, N, ..., N)``."""
        ax = np.arange(self.N) * self.h
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"))

    def points(self) -> np.ndarray:
        """Node coordinates with shape ``(N, ..., N, d)``, for pointwise functions."""
        return np.moveaxis(self.coords(), 0, -1)

    def wavenumbers(self) -> list:
        """Angular wavenumbers ``2 pi k / L`` per axis, broadcastable over the grid."""
        k = 2 * np.pi * np.fft.fftfreq(self.N, d=self.h)
        out = []
        for i in range(self.d):
            shape = [1] * self.d
            shape[i] = self.N
            out.append(k.reshape(shape))
        return out

    def to_dict(self):
        return {"dimension": self.d, "N": self.N, "box_length": self.box_length}


class PeriodicField:
    """Immutable rank-0..4 tensor field on a :class:`TorusGrid`."""

    __slots__ = ("grid", "rank", "values")

    def __init__(self, grid: TorusGrid, values, rank: Optional[int] = None):
        values = np.array(values, dtype=float)
        if rank is None:
            rank = values.ndim - grid.d
        if not 0 <= rank <= 4:
            raise ArgumentError(f"tensor rank must lie in 0..4, got {rank}")
        expected = (grid.d,) * rank + grid.shape
        if values.shape != expected:
            raise ArgumentError(f"values have shape {values.shape}, expected {expected}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("field contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "rank", rank)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("PeriodicField is immutable")

    @classmethod
    def zeros(cls, grid, rank):
        return cls(grid, np.zeros((grid.d,) * rank + grid.shape), rank)

    @classmethod
    def constant(cls, grid, value):
        value = np.asarray(value, float)
        vals = np.broadcast_to(value.reshape(value.shape + (1,) * grid.d),
                               value.shape + grid.shape)
        return cls(grid, vals, value.ndim)

    @classmethod
    def from_function(cls, grid, func):
        """Sample ``func(points)`` where points has shape (N, ..., N, d).

        ``func`` returns an array of shape ``grid.shape + (d,) * rank``.
        """
        vals = np.asarray(func(grid.points()), float)
        rank = vals.ndim - grid.d
        return cls(grid, np.moveaxis(vals, tuple(range(grid.d)), tuple(range(rank, rank + grid.d))),
                   rank)

    def _check(self, other):
        if not isinstance(other, PeriodicField):
            return None
        if other.grid != self.grid or other.rank != self.rank:
            raise ArgumentError("fields live on different grids or have different ranks")
        return other.values

    def __add__(self, other):
        o = self._check(other)
        return PeriodicField(self.grid, self.values + (other if o is None else o), self.rank)

    def __sub__(self, other):
        o = self._check(other)
        return PeriodicField(self.grid, self.values - (other if o is None else o), self.rank)

    def __mul__(self, scalar):
        return PeriodicField(self.grid, self.values * scalar, self.rank)

    __rmul__ = __mul__

    def __neg__(self):
        return PeriodicField(self.grid, -self.values, self.rank)

    def inner(self, other) -> float:
        """Discrete L^2 inner product ``h^d sum <u(q), v(q)>``."""
        o = self._check(other)
        return float(np.vdot(self.values, o) * self.grid.cell_volume)

    def norm(self) -> float:
        return math.sqrt(max(self.inner(self), 0.0))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __repr__(self):
        return f"PeriodicField(rank={self.rank}, grid={self.grid})"


def mean(v: PeriodicField) -> np.ndarray:
    """Exact nodal cell average, a tensor of the field's rank."""
    axes = tuple(range(v.rank, v.rank + v.grid.d))
    return v.values.mean(axis=axes)


def project_mean_zero(v: PeriodicField) -> PeriodicField:
    m = mean(v)
    return PeriodicField(v.grid, v.values - m.reshape(m.shape + (1,) * v.grid.d), v.rank)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def field_to_bytes(v: PeriodicField) -> bytes:
    """Little-endian layout: uint64 header length, JSON header, float64 values."""
    header = json.dumps({"dimension": v.grid.d, "N": v.grid.N, "rank": v.rank,
                         "box_length": v.grid.box_length}, sort_keys=True).encode()
    return (len(header).to_bytes(8, "little") + header
            + np.ascontiguousarray(v.values, dtype="<f8").tobytes())


def field_from_bytes(data: bytes) -> PeriodicField:
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8:8 + n].decode())
    grid = TorusGrid(header["dimension"], header["N"], header["box_length"])
    rank = header["rank"]
    vals = np.frombuffer(data[8 + n:], dtype="<f8")
    expected = grid.d**rank * grid.size
    if vals.size != expected:
        raise ValidationError(f"payload holds {vals.size} values, header implies {expected}")
    return PeriodicField(grid, vals.reshape((grid.d,) * rank + grid.shape), rank)


def save_field(path, v: PeriodicField) -> None:
    with open(path, "wb") as fh:
        fh.write(field_to_bytes(v))


def load_field(path) -> PeriodicField:
    with open(path, "rb") as fh:
        return field_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Discrete kernel measure
# ---------------------------------------------------------------------------

_SUBCELLS_SHARP = {1: 256, 2: 32, 3: 8}
_SUBCELLS_SMOOTH = {1: 32, 2: 8, 3: 4}


@dataclass(frozen=True)
class DiscreteKernel:
    """Point masses of ``rho`` on the lattice ``Z^d / n_per_unit``.

    ``offsets`` are integer lattice offsets (origin excluded) and ``masses``
    the kernel mass of the cell around each of them; ``origin_mass`` is the
    mass of the cell around ``z = 0``.
    """

    d: int
    n_per_unit: int
    offsets: np.ndarray
    masses: np.ndarray
    origin_mass: float
    subcells: int

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_per_unit

    @property
    def z(self) -> np.ndarray:
        """Offsets in kernel units, shape (M, d)."""
        return self.offsets * self.spacing

    @property
    def length(self) -> np.ndarray:
        return np.sqrt(np.einsum("ni,ni->n", self.offsets, self.offsets).astype(float)) * self.spacing

    @property
    def unit(self) -> np.ndarray:
        return self.offsets / np.linalg.norm(self.offsets, axis=1, keepdims=True)

    @property
    def a1(self) -> float:
        return float(self.masses.sum() + self.origin_mass)

    @property
    def a2(self) -> float:
        return float(np.dot(self.masses, self.length**2))

    def monomial_weights(self, order: int) -> np.ndarray:
        """Per-offset tensors ``m z_i1 ... z_ik / |z|^2`` of the given order (>= 2).

        Returns an array of shape ``(d,) * order + (M,)``.
        """
        if order < 2:
            raise ArgumentError("monomial order must be at least 2")
        u = self.unit.T  # (d, M)
        scale = self.masses * self.length ** (order - 2)
        out = np.empty((self.d,) * order + (scale.size,))
        # each sorted multi-index is evaluated once so index symmetry is bitwise
        for combo in itertools.combinations_with_replacement(range(self.d), order):
            val = scale.copy()
            for i in combo:
                val = val * u[i]
            for perm in set(itertools.permutations(combo)):
                out[perm] = val
        return out


def kernel_masses(spec: KernelSpec, n_per_unit: int, subcells: Optional[int] = None) -> DiscreteKernel:
    """Integrate ``rho`` over lattice cells of side ``1 / n_per_unit``.

    Each cell integral uses a symmetric ``subcells^d`` midpoint rule.  The
    result is symmetrized so that evenness holds bitwise.
    """
    d = spec.dimension
    if n_per_unit < 1:
        raise ArgumentError("n_per_unit must be positive")
    if subcells is None:
        table = _SUBCELLS_SMOOTH if spec.family == "radial-gaussian" else _SUBCELLS_SHARP
        subcells = table[d]
    hh = 1.0 / n_per_unit
    R = spec.support_radius
    a = int(math.ceil(R / hh + 0.5))
    ax = np.arange(-a, a + 1)
    sub_ax = (np.arange(subcells) + 0.5) / subcells - 0.5
    sub = np.stack(np.meshgrid(*([sub_ax] * d), indexing="ij"), -1).reshape(-1, d)
    if d > 1:
        rest = np.stack(np.meshgrid(*([ax] * (d - 1)), indexing="ij"), -1).reshape(-1, d - 1)
    else:
        rest = np.zeros((1, 0), dtype=int)
    box = np.empty((ax.size, rest.shape[0]))
    w = (hh / subcells) ** d
    for row, n0 in enumerate(ax):
        cells = np.concatenate([np.full((rest.shape[0], 1), n0), rest], axis=1)
        pts = (cells[:, None, :] + sub[None, :, :]) * hh
        box[row] = spec(pts).sum(axis=1) * w
    box = box.reshape((ax.size,) * d)
    box = 0.5 * (box + np.flip(box))
    full = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
    flat = box.reshape(-1)
    centre = np.all(full == 0, axis=1)
    origin = float(flat[centre][0])
    keep = (flat != 0) & ~centre
    return DiscreteKernel(d=d, n_per_unit=int(n_per_unit), offsets=full[keep].astype(np.int64),
                          masses=flat[keep].copy(), origin_mass=origin, subcells=int(subcells))


def wrap_weights(offsets: np.ndarray, weights: np.ndarray, N: int) -> np.ndarray:
    """Accumulate per-offset weights ``(..., M)`` onto an ``N^d`` index grid modulo N."""
    d = offsets.shape[1]
    idx = tuple((offsets % N).T)
    lead = weights.shape[:-1]
    out = np.zeros(lead + (N,) * d)
    flat_out = out.reshape((-1,) + (N,) * d)
    flat_w = weights.reshape((-1, weights.shape[-1]))
    for c in range(flat_w.shape[0]):
        np.add.at(flat_out[c], idx, flat_w[c])
    return out


def fft_contract(weights_hat: np.ndarray, v: np.ndarray, subscripts: str, d: int) -> np.ndarray:
    """Periodic convolution contracted over tensor indices.

    ``weights_hat`` is the ``rfftn`` of an index-grid weight array and ``v`` a
    component-first field.  ``subscripts`` is an einsum string over the
    tensor indices only, for example ``"ij,j->i"``.
    """
    axes = tuple(range(-d, 0))
    shape = v.shape[-d:]
    v_hat = np.fft.rfftn(v, axes=axes)
    lhs, out = subscripts.split("->")
    a, b = lhs.split(",")
    prod = np.einsum(f"{a}...,{b}...->{out}...", weights_hat, v_hat)
    return np.fft.irfftn(prod, s=shape, axes=axes)


# ---------------------------------------------------------------------------
# Periodized matrix kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodizedMatrixKernel:
    """Node values of the lattice sum of ``rho(z) z (x) z / |z|^2`` on a cell grid.

    ``values`` holds densities (weights divided by ``h^d``) with shape
    ``(d, d, N, ..., N)``; ``weights`` are the node weights themselves.
    """

    grid: TorusGrid
    values: np.ndarray
    lattice_cutoff: int
    discrete: DiscreteKernel = field(repr=False)
    excluded_mass: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return self.values * self.grid.cell_volume

    def total(self) -> np.ndarray:
        """``h^d sum_z Kbar(z)``, the matrix multiplying constants."""
        axes = tuple(range(2, 2 + self.grid.d))
        return self.weights.sum(axis=axes)


def _shell_index(offsets, N):
    """Smallest lattice shell containing each offset (0 = the central cell)."""
    return np.max(np.ceil(np.abs(offsets) / N - 0.5).clip(min=0), axis=1).astype(int)


def build_periodized_kernel(spec: KernelSpec, grid: TorusGrid, shells: int = 1,
                            tail_tol: float = 1e-12,
                            discrete: Optional[DiscreteKernel] = None) -> PeriodizedMatrixKernel:
    """Sum ``rho(z + k) (z + k) (x) (z + k) / |z + k|^2`` over images ``|k|_inf <= shells``.

    Raises :class:`AccuracyError` (with ``required`` set) if the kernel mass in
    the omitted shells exceeds ``tail_tol`` relative to the total mass.
    """
    if grid.box_length != 1.0:
        raise ArgumentError("periodized kernels live on the unit cell")
    if shells < 0:
        raise ArgumentError("shells must be nonnegative")
    dk = discrete if discrete is not None else kernel_masses(spec, grid.N)
    if dk.n_per_unit != grid.N:
        raise ArgumentError("discrete kernel spacing does not match the grid")
    shell = _shell_index(dk.offsets, grid.N)
    total = np.abs(dk.masses).sum() + abs(dk.origin_mass)
    def excluded(s):
        return float(np.abs(dk.masses[shell > s]).sum()) / total
    lost = excluded(shells)
    if lost > tail_tol:
        required = shells
        while excluded(required) > tail_tol:
            required += 1
        raise AccuracyError(f"{shells} shells omit relative kernel mass {lost:.3e}; "
                            f"{required} needed for tail tolerance {tail_tol:g}",
                            estimate=lost, required=required)
    keep = shell <= shells
    w = dk.monomial_weights(2)[..., keep]
    W = wrap_weights(dk.offsets[keep], w, grid.N)
    # images of z and -z are accumulated in different orders; average them so evenness is bitwise
    axes = tuple(range(2, 2 + grid.d))
    W = 0.5 * (W + np.roll(np.flip(W, axis=axes), 1, axis=axes))
    return PeriodizedMatrixKernel(grid=grid, values=W / grid.cell_volume, lattice_cutoff=shells,
                                  discrete=dk, excluded_mass=lost)


def periodic_convolve(kernel: PeriodizedMatrixKernel, v: PeriodicField) -> PeriodicField:
    """``(Kbar * v)(q) = h^d sum_y Kbar(q - y) v(y)`` by FFT."""
    if v.grid != kernel.grid:
        raise ArgumentError("kernel and field live on different grids")
    if v.rank != 1:
        raise ArgumentError("periodic_convolve expects a vector field")
    W_hat = np.fft.rfftn(kernel.weights, axes=tuple(range(2, 2 + v.grid.d)))
    return PeriodicField(v.grid, fft_contract(W_hat, v.values, "ij,j->i", v.grid.d), 1)


def direct_periodic_convolve(kernel: PeriodizedMatrixKernel, v: PeriodicField) -> PeriodicField:
    """O(N^{2d}) reference for :func:`periodic_convolve`; intended for N <= 16."""
    grid = v.grid
    d, N = grid.d, grid.N
    idx = np.indices(grid.shape).reshape(d, -1).T
    diff = (idx[:, None, :] - idx[None, :, :]) % N  # (q, y, d)
    Kq = kernel.weights.reshape(d, d, -1)
    lin = np.ravel_multi_index(tuple(np.moveaxis(diff, -1, 0)), grid.shape)
    vv = v.values.reshape(d, -1)
    out = np.einsum("ijqy,jy->iq", Kq[:, :, lin], vv)
    return PeriodicField(grid, out.reshape((d,) + grid.shape), 1)


# ---------------------------------------------------------------------------
# Spectral differentiation and resampling
# ---------------------------------------------------------------------------

def _nyquist_free(grid: TorusGrid):
    ks = grid.wavenumbers()
    out = []
    for i, k in enumerate(ks):
        k = k.copy()
        k.reshape(-1)[grid.N // 2] = 0.0
        out.append(k)
    return ks, out


def spectral_gradient(v: PeriodicField) -> PeriodicField:
    """Append a derivative index: ``Dv[..., l] = d v / d x_l`` (Nyquist mode dropped)."""
    grid = v.grid
    axes = tuple(range(v.rank, v.rank + grid.d))
    vh = np.fft.fftn(v.values, axes=axes)
    _, kz = _nyquist_free(grid)
    comps = [np.fft.ifftn(1j * kz[l] * vh, axes=axes).real for l in range(grid.d)]
    return PeriodicField(grid, np.stack(comps, axis=v.rank), v.rank + 1)


def spectral_hessian(v: PeriodicField) -> PeriodicField:
    """Append two derivative indices ``(l, j)``: ``d^2 v / dx_l dx_j``."""
    grid = v.grid
    axes = tuple(range(v.rank, v.rank + grid.d))
    vh = np.fft.fftn(v.values, axes=axes)
    ks, kz = _nyquist_free(grid)
    d = grid.d
    out = np.empty((d, d) + v.values.shape)
    for l in range(d):
        for j in range(l, d):
            mult = -(ks[l] ** 2) if l == j else -(kz[l] * kz[j])
            comp = np.fft.ifftn(mult * vh, axes=axes).real
            out[l, j] = comp
            out[j, l] = comp
    return PeriodicField(grid, np.moveaxis(out, (0, 1), (v.rank, v.rank + 1)), v.rank + 2)


def fourier_resample(v: PeriodicField, N_new: int) -> tuple:
    """Band-limited resampling of a unit-cell field to ``N_new`` nodes per axis.

    Returns ``(field, dropped)`` where ``dropped`` is the relative L^2 norm of
    the Fourier content that does not fit on the new grid.
    """
    grid = v.grid
    new = TorusGrid(grid.d, N_new, grid.box_length)
    if N_new == grid.N:
        return v, 0.0
    axes = tuple(range(v.rank, v.rank + grid.d))
    vh = np.fft.fftshift(np.fft.fftn(v.values, axes=axes), axes=axes)
    lead = v.values.shape[:v.rank]
    out = np.zeros(lead + new.shape, dtype=complex)
    m = min(grid.N, N_new)
    src = tuple(slice((grid.N - m) // 2, (grid.N - m) // 2 + m) for _ in range(grid.d))
    dst = tuple(slice((N_new - m) // 2, (N_new - m) // 2 + m) for _ in range(grid.d))
    out[(Ellipsis,) + dst] = vh[(Ellipsis,) + src]
    total = np.linalg.norm(vh)
    dropped = 0.0 if total == 0 else float(
        np.sqrt(max(total**2 - np.linalg.norm(vh[(Ellipsis,) + src]) ** 2, 0.0)) / total)
    vals = np.fft.ifftn(np.fft.ifftshift(out, axes=axes), axes=axes).real * (N_new / grid.N) ** grid.d
    return PeriodicField(new, vals, v.rank), dropped
