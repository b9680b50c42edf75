"""The nonlocal operators K, G and K - G on periodic grids and the scaled resolvent.

On a grid with spacing ``h`` the kernel acts through its point masses
``m_n`` at offsets ``z_n``::

    (K psi)(q) = sum_n m_n mu_s(q, q - z_n) e_n (x) e_n psi(q - z_n)
    G(q)       = sum_n m_n mu_s(q, q - z_n) e_n (x) e_n

with ``e_n = z_n / |z_n|`` and ``mu_s(x, y) = (mu(x) + mu(y)) / 2``.  Splitting
``mu_s`` gives ``K psi = (W * (mu psi) + mu (W * psi)) / 2`` with the wrapped
weight ``W = sum_n m_n e_n (x) e_n``, so every application costs a few FFTs.
Constants are annihilated by ``K - G`` exactly because ``G`` is built from
the same weights.

On a solve box of side ``L`` with ``N`` nodes and ``eps = L / (integer)``
the same construction uses the masses of ``rho`` on the lattice of spacing
``h / eps`` (the masses of ``rho_eps`` at spacing ``h``), ``mu(x / eps)`` and
the prefactor ``eps^-2 lambda(x, x / eps)``.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgumentError, ConvergenceError
from .krylov import minres_solve, pcg
from .model import CoefficientModel, KernelSpec
from .torus import (DiscreteKernel, PeriodicField, PeriodizedMatrixKernel, TorusGrid,
                    fft_contract, kernel_masses, wrap_weights)


def _spatial_axes(d, lead):
    return tuple(range(lead, lead + d))


class NonlocalOperator:
    """``K``, ``G`` and ``K - G`` for given node weights and node values of ``mu``."""

    def __init__(self, grid: TorusGrid, weights: np.ndarray, mu_values: np.ndarray,
                 discrete: Optional[DiscreteKernel] = None):
        d = grid.d
        self.grid = grid
        self.discrete = discrete
        self.weights = weights
        self.mu = np.asarray(mu_values, float)
        axes = _spatial_axes(d, 2)
        self.weights_hat = np.fft.rfftn(weights, axes=axes)
        self.weight_sum = weights.sum(axis=axes)
        mu_hat = np.fft.rfftn(self.mu)
        conv_mu = np.fft.irfftn(self.weights_hat * mu_hat, s=grid.shape, axes=axes)
        conv_mu = 0.5 * (conv_mu + np.swapaxes(conv_mu, 0, 1))
        self.G = 0.5 * self.mu * self.weight_sum.reshape((d, d) + (1,) * d) + 0.5 * conv_mu

    @property
    def d(self):
        return self.grid.d

    def K(self, psi: np.ndarray) -> np.ndarray:
        conv = functools.partial(fft_contract, self.weights_hat, subscripts="ij,j->i", d=self.d)
        return 0.5 * conv(self.mu * psi) + 0.5 * self.mu * conv(psi)

    def apply_G(self, psi: np.ndarray) -> np.ndarray:
        return np.einsum("ij...,j...->i...", self.G, psi)

    def KminusG(self, psi: np.ndarray) -> np.ndarray:
        return self.K(psi) - self.apply_G(psi)

    def G_inverse(self, shift: Optional[np.ndarray] = None) -> np.ndarray:
        """Node-wise inverse of ``G + shift I`` (shift may be a node field)."""
        d = self.d
        mats = np.moveaxis(self.G, (0, 1), (-2, -1)).copy()
        if shift is not None:
            mats = mats + np.asarray(shift)[..., None, None] * np.eye(d)
        return np.moveaxis(np.linalg.inv(mats), (-2, -1), (0, 1))

    def dense(self) -> np.ndarray:
        """Matrix of ``K - G`` on the flattened vector fields (small grids only)."""
        n = self.d * self.grid.size
        if n > 4096:
            raise ArgumentError(f"dense assembly of a {n}x{n} matrix refused")
        shape = (self.d,) + self.grid.shape
        out = np.empty((n, n))
        e = np.zeros(n)
        for c in range(n):
            e[c] = 1.0
            out[:, c] = self.KminusG(e.reshape(shape)).reshape(-1)
            e[c] = 0.0
        return out

    def dirichlet_form(self, psi: np.ndarray) -> float:
        """``-1/2 h^d sum_q sum_n m_n mu_s (e_n . (psi(q - z_n) - psi(q)))^2`` by direct sums."""
        if self.discrete is None:
            raise ArgumentError("direct sums need the discrete kernel")
        dk = self.discrete
        total = 0.0
        for n, m, e in zip(dk.offsets, dk.masses, dk.unit):
            shift = tuple(int(s) for s in n)
            psi_s = np.roll(psi, shift, axis=_spatial_axes(self.d, 1))
            mu_s = 0.5 * (self.mu + np.roll(self.mu, shift, axis=tuple(range(self.d))))
            proj = np.einsum("i,i...->...", e, psi_s - psi)
            total += m * np.sum(mu_s * proj * proj)
        return -0.5 * total * self.grid.cell_volume


# ---------------------------------------------------------------------------
# Cell operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GMultiplier:
    """Node values of ``G`` with shape ``(d, d, N, ..., N)`` and certificates."""

    grid: TorusGrid
    values: np.ndarray
    gamma: float
    max_norm: float

    def bound_holds(self, model: CoefficientModel, a1: float) -> bool:
        return self.max_norm <= model.alpha2 * a1 * (1 + 1e-12)


@functools.lru_cache(maxsize=16)
def cell_operator(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid) -> NonlocalOperator:
    """Operator on the unit cell grid with ``mu(q)`` (cached per spec/model/grid)."""
    if grid.box_length != 1.0:
        raise ArgumentError("cell operators live on the unit torus")
    if spec.dimension != grid.d:
        raise ArgumentError("kernel and grid dimensions differ")
    dk = kernel_masses(spec, grid.N)
    W = wrap_weights(dk.offsets, dk.monomial_weights(2), grid.N)
    mu = model.mu(grid.points())
    return NonlocalOperator(grid, W, mu, dk)


def _node_min_eig(G, d):
    mats = np.moveaxis(G, (0, 1), (-2, -1)).reshape(-1, d, d)
    ev = np.linalg.eigvalsh(mats)
    return float(ev[:, 0].min()), float(np.abs(ev).max())


def assemble_G(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid) -> GMultiplier:
    op = cell_operator(spec, model, grid)
    gamma, gmax = _node_min_eig(op.G, grid.d)
    return GMultiplier(grid=grid, values=op.G, gamma=gamma, max_norm=gmax)


def direct_G(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid) -> np.ndarray:
    """``G`` summed over the unperiodized offset list (reference implementation)."""
    op = cell_operator(spec, model, grid)
    dk = op.discrete
    q = grid.points()
    mu_q = model.mu(q)
    out = np.zeros((grid.d, grid.d) + grid.shape)
    for z, m, e in zip(dk.z, dk.masses, dk.unit):
        mu_s = 0.5 * (mu_q + model.mu(q - z))
        out += m * np.outer(e, e).reshape((grid.d, grid.d) + (1,) * grid.d) * mu_s
    return out


def apply_K(spec: KernelSpec, model: CoefficientModel, kernel: PeriodizedMatrixKernel,
            psi: PeriodicField) -> PeriodicField:
    if psi.grid != kernel.grid:
        raise ArgumentError("kernel and field live on different grids")
    op = NonlocalOperator(kernel.grid, kernel.weights, model.mu(kernel.grid.points()),
                          kernel.discrete)
    return PeriodicField(psi.grid, op.K(psi.values), 1)


def apply_KminusG(spec: KernelSpec, model: CoefficientModel, psi: PeriodicField) -> PeriodicField:
    op = cell_operator(spec, model, psi.grid)
    return PeriodicField(psi.grid, op.KminusG(psi.values), 1)


def kernel_spectrum(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid) -> np.ndarray:
    """Ascending eigenvalues of ``-(K - G)`` by dense symmetric eigendecomposition."""
    A = cell_operator(spec, model, grid).dense()
    return np.linalg.eigvalsh(-0.5 * (A + A.T))


@dataclass
class OperatorChecks:
    """Structural properties of ``K - G`` on a small cell grid.

    ``symmetry`` and ``dissipation`` are maxima over random pairs of unit
    fields of ``|<A psi, phi> - <psi, A phi>|`` and ``<A psi, psi>``;
    ``null`` holds the d smallest eigenvalues of ``-A`` and ``gap`` the next one.
    """

    grid: TorusGrid
    symmetry: float
    dissipation: float
    null: list
    gap: float
    tol: float = 1e-10

    @property
    def passed(self) -> bool:
        return bool(self.symmetry <= self.tol and self.dissipation <= self.tol
                    and max(abs(v) for v in self.null) <= self.tol and self.gap > self.tol)

    def to_dict(self):
        return {"N": self.grid.N, "symmetry": self.symmetry, "dissipation": self.dissipation,
                "null": self.null, "gap": self.gap, "tol": self.tol, "passed": self.passed}


def operator_checks(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid,
                    pairs: int = 100, seed: int = 0, tol: float = 1e-10) -> OperatorChecks:
    op = cell_operator(spec, model, grid)
    rng = np.random.default_rng(seed)
    shape = (grid.d,) + grid.shape
    sym, dis = 0.0, -np.inf
    for _ in range(pairs):
        psi, phi = rng.standard_normal((2,) + shape)
        psi /= np.linalg.norm(psi)
        phi /= np.linalg.norm(phi)
        Apsi = op.KminusG(psi)
        sym = max(sym, abs(np.vdot(Apsi, phi) - np.vdot(psi, op.KminusG(phi))))
        dis = max(dis, float(np.vdot(Apsi, psi)))
    ev = kernel_spectrum(spec, model, grid)
    d = grid.d
    return OperatorChecks(grid, float(sym), float(dis), [float(v) for v in ev[:d]],
                          float(ev[d]), tol)


# ---------------------------------------------------------------------------
# Scaled operator on the solve box
# ---------------------------------------------------------------------------

MIN_NODES_PER_CELL = 8


def nodes_per_cell(eps: float, grid: TorusGrid) -> int:
    """Nodes per eps-cell, validating that ``L / eps`` is integral and resolved."""
    if not 0 < eps <= 1:
        raise ArgumentError(f"eps must lie in (0, 1], got {eps}")
    cells = grid.box_length / eps
    if abs(cells - round(cells)) > 1e-9 * cells:
        raise ArgumentError(f"L/eps = {cells:g} is not an integer")
    cells = int(round(cells))
    if grid.N % cells:
        raise ArgumentError(f"{grid.N} nodes cannot be split into {cells} eps-cells")
    n = grid.N // cells
    if n < MIN_NODES_PER_CELL:
        raise ArgumentError(f"grid does not resolve eps: {n} nodes per eps-cell, "
                            f"need at least {MIN_NODES_PER_CELL}")
    return n


class ScaledOperator:
    """``L^eps u = eps^-2 lambda(x, x/eps) (K_eps - G_eps) u`` on a periodic solve box."""

    def __init__(self, spec: KernelSpec, model: CoefficientModel, eps: float, grid: TorusGrid):
        if spec.dimension != grid.d:
            raise ArgumentError("kernel and grid dimensions differ")
        self.n_cell = nodes_per_cell(eps, grid)
        self.eps = float(eps)
        self.grid = grid
        self.model = model
        dk = kernel_masses(spec, self.n_cell)
        W = wrap_weights(dk.offsets, dk.monomial_weights(2), grid.N)
        x = grid.points()
        y = x / eps
        self.op = NonlocalOperator(grid, W, model.mu(y), dk)
        self.lam = model.lambda0(x) * model.lambda1(y)
        self.nu = 1.0 / self.lam

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.lam * self.op.KminusG(u) / self.eps**2

    def apply_resolvent_form(self, u: np.ndarray, m: float) -> np.ndarray:
        """Symmetric form ``(m nu - eps^-2 (K - G)) u`` with ``nu = 1 / lambda``."""
        return m * self.nu * u - self.op.KminusG(u) / self.eps**2


@functools.lru_cache(maxsize=8)
def scaled_operator(spec: KernelSpec, model: CoefficientModel, eps: float,
                    grid: TorusGrid) -> ScaledOperator:
    return ScaledOperator(spec, model, eps, grid)


def apply_Leps(spec: KernelSpec, model: CoefficientModel, eps: float, solve_grid: TorusGrid,
               u: PeriodicField) -> PeriodicField:
    if u.grid != solve_grid:
        raise ArgumentError("field does not live on the solve grid")
    op = scaled_operator(spec, model, float(eps), solve_grid)
    return PeriodicField(solve_grid, op.apply(u.values), 1)


@dataclass
class ResolventReport:
    u: PeriodicField
    iterations: int
    residual: float
    m: float
    eps: float
    norm_ratio: float
    bound: float
    method: str = "pcg"

    def to_dict(self) -> dict:
        return {"m": self.m, "eps": self.eps, "iterations": self.iterations,
                "residual": self.residual, "norm_ratio": self.norm_ratio,
                "box_length": self.u.grid.box_length}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def resolvent_solve(spec: KernelSpec, model: CoefficientModel, m: float, eps: float,
                    f: PeriodicField, tol: float = 1e-9, maxiter: int = 2000) -> ResolventReport:
    """Solve ``(m - L^eps) u = f`` on the periodic solve box.

    CG runs on the symmetric positive form ``(m nu - eps^-2 (K - G)) u = nu f``
    with the node-block preconditioner ``(m nu + eps^-2 G)^-1``; MINRES on the
    same form is the fallback.  The returned residual is the unweighted
    ``|(m - L^eps) u - f| / |f|``.
    """
    if not m > 0:
        raise ArgumentError("m must be positive")
    grid = f.grid
    op = scaled_operator(spec, model, float(eps), grid)
    d = grid.d
    shape = (d,) + grid.shape
    bound = math.sqrt(model.alpha2 / model.alpha1) / m
    fnorm = f.norm()
    if fnorm == 0.0:
        return ResolventReport(PeriodicField.zeros(grid, 1), 0, 0.0, float(m), float(eps), 0.0, bound)
    Pinv = np.moveaxis(
        np.linalg.inv(np.moveaxis(op.op.G / eps**2, (0, 1), (-2, -1))
                      + (m * op.nu)[..., None, None] * np.eye(d)), (-2, -1), (0, 1))

    def A(v):
        return op.apply_resolvent_form(v.reshape(shape), m).reshape(-1)

    def M(v):
        return np.einsum("ij...,j...->i...", Pinv, v.reshape(shape)).reshape(-1)

    rhs = (op.nu * f.values).reshape(-1)

    def true_residual(x):
        u = x.reshape(shape)
        r = m * u - op.apply(u) - f.values
        return float(np.linalg.norm(r) / np.linalg.norm(f.values))

    # the weighted residual bounds the true one up to a factor alpha2/alpha1
    inner_tol = tol * model.alpha1 / model.alpha2
    x, iters, method = None, 0, "pcg"
    try:
        for _ in range(4):
            res = pcg(A, rhs, precond=M, tol=inner_tol, maxiter=maxiter, x0=x)
            x, iters = res.x, iters + res.iterations
            if true_residual(x) <= tol:
                break
            inner_tol *= 0.1
    except ConvergenceError:
        res = minres_solve(A, rhs, tol=inner_tol, maxiter=maxiter)
        x, iters, method = res.x, iters + res.iterations, "minres"
    r = true_residual(x)
    if r > tol:
        raise ConvergenceError(f"resolvent residual {r:.3e} above tolerance {tol:g}", [r])
    u = PeriodicField(grid, x.reshape(shape), 1)
    return ResolventReport(u, iters, r, float(m), float(eps), u.norm() / fnorm, bound, method)
