"""Two-scale ansatz ``w = u + eps A(x/eps) Du + eps^2 B(x/eps) D^2 u`` and its consistency residual."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cell import CorrectorA, CorrectorB, assemble_h, cell_context
from .errors import ArgumentError
from .localsolver import apply_L0
from .model import CoefficientModel, KernelSpec
from .operators import apply_Leps, nodes_per_cell
from .torus import (PeriodicField, TorusGrid, fourier_resample, spectral_gradient,
                    spectral_hessian)


def tile_cell_field(v: PeriodicField, eps: float, solve_grid: TorusGrid) -> tuple:
    """Values of ``v(x / eps)`` at the solve-grid nodes.

    When the solve grid has exactly as many nodes per eps-cell as the cell
    grid, the values are copied by periodic tiling.  Otherwise the cell field
    is first resampled by band-limited interpolation; the relative Fourier
    content lost in that step is returned alongside the values.
    """
    if v.grid.d != solve_grid.d:
        raise ArgumentError("cell and solve grids have different dimensions")
    n = nodes_per_cell(eps, solve_grid)
    dropped = 0.0
    if n != v.grid.N:
        v, dropped = fourier_resample(v, n)
    reps = (1,) * v.rank + (solve_grid.N // n,) * solve_grid.d
    return np.tile(v.values, reps), dropped


@dataclass
class AnsatzField:
    u: PeriodicField
    w: PeriodicField
    eps: float
    first_order: np.ndarray
    second_order: np.ndarray
    interpolation_loss: float = 0.0

    def correction_bound(self, A: CorrectorA, B: Optional[CorrectorB]) -> float:
        """``eps |A|_inf |Du| + eps^2 |B|_inf |D^2 u|`` (discrete L2 norms of derivatives)."""
        Du = spectral_gradient(self.u)
        D2u = spectral_hessian(self.u)
        aA = np.abs(A.values).max() * self.u.grid.d ** 1.5
        bB = 0.0 if B is None else np.abs(B.values).max() * self.u.grid.d ** 2
        return float(self.eps * aA * Du.norm() + self.eps**2 * bB * D2u.norm())


def build_ansatz(u: PeriodicField, A: CorrectorA, B: Optional[CorrectorB], eps: float,
                 solve_grid: TorusGrid) -> AnsatzField:
    """``(A Du)_i = a^{ikl} d_l u_k`` and ``(B D^2 u)_m = b^{mjkl} d_j d_l u_k``."""
    if u.grid != solve_grid:
        raise ArgumentError("u must live on the solve grid")
    Du = spectral_gradient(u).values  # [k, l] = d_l u_k
    H = spectral_hessian(u).values  # [k, a, b] = d_a d_b u_k
    a_t, lost_a = tile_cell_field(A.field, eps, solve_grid)
    first = np.einsum("ikl...,kl...->i...", a_t, Du)
    lost_b = 0.0
    if B is not None:
        b_t, lost_b = tile_cell_field(B.field, eps, solve_grid)
        second = np.einsum("mjkl...,kjl...->m...", b_t, H)
    else:
        second = np.zeros_like(first)
    w = u.values + eps * first + eps**2 * second
    return AnsatzField(u, PeriodicField(solve_grid, w, 1), float(eps), first, second,
                       max(lost_a, lost_b))


@dataclass
class ConsistencyResult:
    eps: float
    residual: float
    reference: float
    interpolation_loss: float

    @property
    def relative(self) -> float:
        return self.residual / self.reference if self.reference > 0 else 0.0


def consistency_residual(spec: KernelSpec, model: CoefficientModel, A: CorrectorA,
                         B: Optional[CorrectorB], Ceff, u: PeriodicField, eps: float
                         ) -> ConsistencyResult:
    """``|L^eps w^eps - c(x) D^2 u|`` in the discrete L2 norm of the solve box."""
    grid = u.grid
    w = build_ansatz(u, A, B, eps, grid)
    Lw = apply_Leps(spec, model, eps, grid, w.w)
    target = apply_L0(Ceff, u)
    return ConsistencyResult(float(eps), (Lw - target).norm(), target.norm(),
                             w.interpolation_loss)


def psi_term(spec: KernelSpec, model: CoefficientModel, A: CorrectorA, u: PeriodicField,
             eps: float) -> float:
    """Largest node value of ``eps^-1 lambda(x, x/eps) Psi_a(Du(x), x/eps)``.

    ``Psi_a(M, q)`` is the cell residual ``(K - G) a^{kl} - h^{kl}`` contracted
    with ``M_{kl}``, so the term vanishes up to the corrector solve accuracy.
    """
    grid = A.grid
    ctx = cell_context(spec, model, grid)
    d = grid.d
    h = assemble_h(spec, model, grid).values
    R = np.empty_like(h)
    for k in range(d):
        for l in range(d):
            R[:, k, l] = ctx.op.KminusG(A.values[:, k, l]) - h[:, k, l]
    R_t, _ = tile_cell_field(PeriodicField(grid, R, 3), eps, u.grid)
    Du = spectral_gradient(u).values
    x = u.grid.points()
    lam = model.lambda0(x) * model.lambda1(x / eps)
    val = lam * np.einsum("ikl...,kl...->i...", R_t, Du) / eps
    return float(np.sqrt((val * val).sum(axis=0)).max())


# ---------------------------------------------------------------------------
# Test-function library
# ---------------------------------------------------------------------------


def test_fields(grid: TorusGrid, sigma: float = 0.25) -> dict:
    """Smooth vector fields on the solve box used as ``u`` (or ``f``) in studies.

    ``trig``  low-mode vector trigonometric polynomial
    ``mixed`` trigonometric polynomial with an oblique mode
    ``bump``  periodic bump ``exp(kappa (sum_i cos 2 pi (x_i/L - 1/2) - d))`` with
              ``kappa = (2 pi sigma)^-2``, which behaves like a Gaussian of width
              ``sigma L`` near the centre and is smooth across the box boundary
    """
    L = grid.box_length
    d = grid.d
    x = grid.points() / L
    t = 2 * np.pi * x
    out = {}
    comps = []
    for i in range(d):
        j = (i + 1) % d
        comps.append(np.sin(t[..., j]) + 0.5 * np.cos(t[..., i]))
    out["trig"] = PeriodicField(grid, np.stack(comps), 1)
    comps = []
    for i in range(d):
        comps.append(np.cos(t.sum(axis=-1) + i) + 0.25 * np.sin(t[..., i]))
    out["mixed"] = PeriodicField(grid, np.stack(comps), 1)
    kappa = 1.0 / (2 * np.pi * sigma) ** 2
    g = np.exp(kappa * (np.cos(t - np.pi).sum(axis=-1) - d))
    out["bump"] = PeriodicField(grid, np.stack([g * (1.0 + 0.5 * i) for i in range(d)]), 1)
    return out
