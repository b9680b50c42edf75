"""Both cell problems, the corrector tensors and two routes to the constant tensor C~.

Index conventions (all fields component-first on the cell grid):

* ``CellDataH.values[i, k, l]``      = ``(h^{kl})_i``
* ``CorrectorA.field.values[i, k, l]`` = ``a^{ikl}``; the vector field
  ``a^{kl}`` solves ``(K - G) a^{kl} = h^{kl}`` with zero mean.
* ``CorrectorB.field.values[i, j, k, l]`` = ``b^{ijkl}``; ``b^{jkl}`` solves
  ``(K - G) b^{jkl} = g^{jkl}`` with zero mean.

Every integral over R^d is a sum over the point masses of the kernel, so a
weight ``m_n z_{i1} ... z_{ip} / |z|^2`` at offset ``n`` is wrapped onto the
grid for FFT convolutions, while the reference paths loop over the
unperiodized offsets directly.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass
from dataclasses import field as dc_field
import numpy as np

from .errors import SolvabilityError
from .krylov import KrylovResult, pcg
from .model import CoefficientModel, KernelSpec
from .operators import NonlocalOperator, cell_operator
from .torus import PeriodicField, TorusGrid, fft_contract, mean, wrap_weights

DEFAULT_TOL = 1e-10
FREDHOLM_TOL = 1e-9
ROUNDOFF_FLOOR = 1e-14


def sym_pairs(d):
    return list(itertools.combinations_with_replacement(range(d), 2))


class CellContext:
    """Shared weights for all cell computations on one (spec, model, grid)."""

    def __init__(self, spec: KernelSpec, model: CoefficientModel, grid: TorusGrid):
        self.spec, self.model, self.grid = spec, model, grid
        self.op: NonlocalOperator = cell_operator(spec, model, grid)
        self.dk = self.op.discrete
        d = grid.d
        self.d = d
        self.mu = self.op.mu
        self.mu_hat = np.fft.rfftn(self.mu)
        axes3 = tuple(range(3, 3 + d))
        W3 = wrap_weights(self.dk.offsets, self.dk.monomial_weights(3), grid.N)
        self.W3_hat = np.fft.rfftn(W3, axes=axes3)
        self.W3_sum = W3.sum(axis=axes3)
        w4 = self.dk.monomial_weights(4)
        self.W4_sum = w4.sum(axis=-1)
        self.W4 = wrap_weights(self.dk.offsets, w4, grid.N)
        lam1 = model.lambda1(grid.points())
        self.inv_lambda1 = 1.0 / lam1
        self.harmonic = float(self.inv_lambda1.mean())

    def scalar_conv(self, W_hat, lead):
        """``W * mu`` for a wrapped tensor weight with ``lead`` tensor axes."""
        axes = tuple(range(lead, lead + self.d))
        return np.fft.irfftn(W_hat * self.mu_hat, s=self.grid.shape, axes=axes)

    def mu_s_sum(self, W, W_hat=None):
        """``sum_n W(n) mu_s(q, q - z_n)`` as a node field for a tensor weight ``W``."""
        lead = W.ndim - self.d
        axes = tuple(range(lead, lead + self.d))
        if W_hat is None:
            W_hat = np.fft.rfftn(W, axes=axes)
        total = W.sum(axis=axes).reshape(W.shape[:lead] + (1,) * self.d)
        return 0.5 * self.mu * total + 0.5 * self.scalar_conv(W_hat, lead)


@functools.lru_cache(maxsize=8)
def cell_context(spec, model, grid) -> CellContext:
    return CellContext(spec, model, grid)


# ---------------------------------------------------------------------------
# First cell problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellDataH:
    """Right-hand sides ``h^{kl}``, stored as a rank-3 field indexed ``[i, k, l]``."""

    field: PeriodicField
    bound: float

    @property
    def values(self):
        return self.field.values

    def mean(self) -> np.ndarray:
        return mean(self.field)

    def max_node_norm(self) -> float:
        v = self.values
        return float(np.sqrt((v * v).sum(axis=0)).max())


def assemble_h(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid) -> CellDataH:
    """``h^{kl}(q) = sum_n m_n mu_s(q, q - z_n) z_k z_l z / |z|^2``."""
    ctx = cell_context(spec, model, grid)
    H = 0.5 * ctx.mu * ctx.W3_sum.reshape(ctx.W3_sum.shape + (1,) * grid.d) \
        + 0.5 * ctx.scalar_conv(ctx.W3_hat, 3)
    # W3 is fully symmetric, so H[k, l, i] already equals (h^{kl})_i
    vals = np.ascontiguousarray(np.moveaxis(H, 2, 0))
    bound = model.alpha2 * np.sqrt(ctx.dk.a1 * ctx.dk.a2)
    return CellDataH(PeriodicField(grid, vals, 3), float(bound))


@dataclass(frozen=True)
class CorrectorA:
    field: PeriodicField
    iterations: dict = dc_field(default_factory=dict)
    residuals: dict = dc_field(default_factory=dict)
    tol: float = DEFAULT_TOL

    @classmethod
    def zeros(cls, grid):
        return cls(PeriodicField.zeros(grid, 3), {}, {}, 0.0)

    @property
    def values(self):
        return self.field.values

    @property
    def grid(self):
        return self.field.grid


def _mean_zero_projector(d, shape):
    def project(v):
        w = v.reshape((d, -1))
        return (w - w.mean(axis=1, keepdims=True)).reshape(-1)
    return project


def _solve_cell(op: NonlocalOperator, rhs: np.ndarray, tol: float, maxiter: int,
                scale: float = 1.0):
    """Solve ``(G - K) x = rhs`` on mean-zero fields by projected PCG.

    A right-hand side whose mean-zero part has root-mean-square value below
    ``ROUNDOFF_FLOOR * scale`` is round-off of an exactly vanishing datum
    (for instance ``h`` for a constant ``mu``); its solution is zero.
    """
    d = op.d
    shape = (d,) + op.grid.shape
    P = _mean_zero_projector(d, shape)
    rp = P(rhs.reshape(-1))
    rms = float(np.sqrt(np.mean(rp * rp)))
    if rms <= ROUNDOFF_FLOOR * scale:
        return KrylovResult(np.zeros(rhs.size), 0, 0.0, [rms], "roundoff")
    Ginv = op.G_inverse()

    def A(v):
        return -op.KminusG(v.reshape(shape)).reshape(-1)

    def M(v):
        return np.einsum("ij...,j...->i...", Ginv, v.reshape(shape)).reshape(-1)

    return pcg(A, rhs.reshape(-1), precond=M, tol=tol, maxiter=maxiter, project=P)


def _check_fredholm(data: np.ndarray, scale: float, label: str):
    viol = float(np.abs(data.reshape(data.shape[0], -1).mean(axis=1)).max())
    if viol > FREDHOLM_TOL * max(1.0, scale):
        raise SolvabilityError(f"{label}: mean of right-hand side is {viol:.3e}, "
                               "not orthogonal to constants", violation=viol)
    return viol


def solve_cell_A(spec: KernelSpec, model: CoefficientModel, grid: TorusGrid,
                 tol: float = DEFAULT_TOL, maxiter: int = 5000) -> CorrectorA:
    """Mean-zero correctors ``a^{kl}`` for the symmetric pairs ``k <= l``."""
    ctx = cell_context(spec, model, grid)
    h = assemble_h(spec, model, grid)
    d = grid.d
    out = np.zeros((d, d, d) + grid.shape)
    iters, res = {}, {}
    for k, l in sym_pairs(d):
        rhs = h.values[:, k, l]
        _check_fredholm(rhs, h.bound, f"h^{k}{l}")
        sol = _solve_cell(ctx.op, -rhs, tol, maxiter, h.bound)
        a = sol.x.reshape((d,) + grid.shape)
        out[:, k, l] = a
        out[:, l, k] = a
        iters[f"{k}{l}"] = sol.iterations
        res[f"{k}{l}"] = sol.residual
    return CorrectorA(PeriodicField(grid, out, 3), iters, res, tol)


def check_psi_zero(spec: KernelSpec, model: CoefficientModel, A: CorrectorA, M,
                   sample_q) -> dict:
    """Evaluate ``Psi_a(M, q)`` by direct offset sums at sampled node indices.

    ``sample_q`` is an integer array of node multi-indices, shape (S, d).
    Returns the maximum of ``|Psi_a(M, q)| / |M|`` (absolute) and the same
    quantity relative to the data bound ``alpha2 sqrt(a1 a2)``.
    """
    grid = A.grid
    ctx = cell_context(spec, model, grid)
    M = np.asarray(M, float)
    Mn = np.linalg.norm(M)
    if Mn == 0:
        return {"max_abs": 0.0, "relative": 0.0, "samples": int(len(sample_q))}
    sample_q = np.atleast_2d(np.asarray(sample_q, dtype=int))
    a = A.values
    dk = ctx.dk
    N = grid.N
    q_idx = tuple(sample_q.T)
    mu_q = ctx.mu[q_idx]
    a_q = a[(slice(None),) * 3 + q_idx]  # (d, d, d, S)
    psi = np.zeros((grid.d, len(sample_q)))
    for n, m, e, r in zip(dk.offsets, dk.masses, dk.unit, dk.length):
        y_idx = tuple(((sample_q - n) % N).T)
        mu_s = 0.5 * (mu_q + ctx.mu[y_idx])
        da = a[(slice(None),) * 3 + y_idx] - a_q
        bracket = np.einsum("j,jkls,kl->s", e, da, M) - r * (e @ M @ e)
        psi += m * mu_s * bracket * e[:, None]
    vals = np.linalg.norm(psi, axis=0) / Mn
    bound = model.alpha2 * np.sqrt(dk.a1 * dk.a2)
    return {"max_abs": float(vals.max()), "relative": float(vals.max() / bound),
            "samples": int(len(sample_q))}


# ---------------------------------------------------------------------------
# Effective constant tensor
# ---------------------------------------------------------------------------


def _full_A(A):
    if isinstance(A, CorrectorA):
        return A.values
    return np.asarray(A, float)


def compute_Ctilde_solvability(spec: KernelSpec, model: CoefficientModel, A) -> np.ndarray:
    """``1/2 <sum W4 mu_s> - <sum W3^{ij m} mu_s a^{m kl}(q - z)>`` by FFT convolutions.

    Angle brackets are cell averages.  The result is not symmetrized.
    """
    a = _full_A(A)
    d = a.shape[0]
    grid = TorusGrid(d, a.shape[-1])
    ctx = cell_context(spec, model, grid)
    quartic = 0.5 * ctx.W4_sum * float(ctx.mu.mean())
    # coupling[i, j, k, l] = < 1/2 mu (W3^{ijm} * a^{mkl}) + 1/2 W3^{ijm} * (mu a^{mkl}) >
    coupling = np.zeros((d,) * 4)
    for k, l in sym_pairs(d):
        akl = a[:, k, l]
        conv_a = fft_contract(ctx.W3_hat, akl, "ijm,m->ij", d)
        conv_mua = fft_contract(ctx.W3_hat, ctx.mu * akl, "ijm,m->ij", d)
        val = 0.5 * (ctx.mu * conv_a).reshape(d, d, -1).mean(axis=-1) \
            + 0.5 * conv_mua.reshape(d, d, -1).mean(axis=-1)
        coupling[:, :, k, l] = val
        coupling[:, :, l, k] = val
    return quartic - coupling


def compute_Ctilde_quadratic(spec: KernelSpec, model: CoefficientModel, A,
                             chunk: int = 64) -> np.ndarray:
    """Quadratic form ``1/2 <sum m mu_s (z_i z_j + da^{ij}.z)(z_k z_l + da^{kl}.z) / |z|^2>``.

    Evaluated by direct loops over the unperiodized offsets; manifestly
    symmetric under ``(ij) <-> (kl)``.
    """
    a = _full_A(A)
    d = a.shape[0]
    grid = TorusGrid(d, a.shape[-1])
    ctx = cell_context(spec, model, grid)
    dk = ctx.dk
    pairs = sym_pairs(d)
    P = len(pairs)
    a_pairs = np.stack([a[:, k, l].reshape(d, -1) for k, l in pairs])  # (P, d, nodes)
    mu = ctx.mu.reshape(-1)
    lin = np.arange(grid.size).reshape(grid.shape)
    Q = np.zeros((P, P))
    for start in range(0, len(dk.masses), chunk):
        sl = slice(start, start + chunk)
        offs, ms, es, rs = dk.offsets[sl], dk.masses[sl], dk.unit[sl], dk.length[sl]
        # node index of q - z_n for each offset in the chunk: (C, nodes)
        shifted = np.stack([np.roll(lin, tuple(int(s) for s in n), axis=tuple(range(d))).reshape(-1)
                            for n in offs])
        mu_s = 0.5 * (mu[None, :] + mu[shifted])
        da = a_pairs[:, :, None, :] - a_pairs[:, :, shifted]  # (P, d, C, nodes)
        proj = np.einsum("pdcn,cd->pcn", da, es)
        mono = np.array([rs * es[:, k] * es[:, l] for k, l in pairs])  # (P, C)
        F = proj + mono[:, :, None]
        weighted = F * (ms[:, None] * mu_s)[None]
        Q += np.einsum("pcn,qcn->pq", weighted, F)
    Q *= 0.5 / grid.size
    out = np.zeros((d,) * 4)
    for p, (i, j) in enumerate(pairs):
        for q, (k, l) in enumerate(pairs):
            for ii, jj in {(i, j), (j, i)}:
                for kk, ll in {(k, l), (l, k)}:
                    out[ii, jj, kk, ll] = Q[p, q]
    return out


def quartic_moment(spec: KernelSpec, grid: TorusGrid) -> np.ndarray:
    """``1/2 sum_n m_n z_i z_j z_k z_l / |z|^2``; the tensor obtained with A = 0 and mu = 1."""
    ctx_dk = cell_operator(spec, CoefficientModel(), grid).discrete
    return 0.5 * ctx_dk.monomial_weights(4).sum(axis=-1)


@dataclass
class CTildeReport:
    solvability: np.ndarray
    quadratic: np.ndarray

    @property
    def discrepancy(self) -> float:
        return float(np.abs(self.solvability - self.quadratic).max())

    @property
    def canonical(self) -> np.ndarray:
        return self.quadratic

    def to_dict(self):
        return {"solvability": self.solvability.reshape(-1).tolist(),
                "quadratic": self.quadratic.reshape(-1).tolist(),
                "discrepancy": self.discrepancy,
                "dimension": int(self.quadratic.shape[0]),
                "index_order": "ijkl row-major"}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_Ctilde(spec, model, A) -> CTildeReport:
    return CTildeReport(compute_Ctilde_solvability(spec, model, A),
                        compute_Ctilde_quadratic(spec, model, A))


# ---------------------------------------------------------------------------
# Second cell problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrectorB:
    field: PeriodicField
    g: PeriodicField
    iterations: dict
    residuals: dict
    fredholm_violation: float
    tol: float = DEFAULT_TOL

    @property
    def values(self):
        return self.field.values

    @property
    def grid(self):
        return self.field.grid


def assemble_g(spec: KernelSpec, model: CoefficientModel, A, Ctilde: np.ndarray) -> PeriodicField:
    """Cell data ``g^{jkl}`` as a rank-4 field indexed ``[i, j, k, l]``.

    ``g_i^{jkl} = C~^{ijkl} / (lambda1 H) - 1/2 sum W4^{ijkl} mu_s
    + sum W3^{jim} mu_s a^{mkl}(q - z)`` with ``H`` the cell mean of
    ``1 / lambda1``; the slow factor ``lambda0`` cancels for separable weights.
    """
    a = _full_A(A)
    d = a.shape[0]
    grid = TorusGrid(d, a.shape[-1])
    ctx = cell_context(spec, model, grid)
    Ctilde = np.asarray(Ctilde, float)
    ex = (1,) * d
    quartic = ctx.mu_s_sum(ctx.W4)  # (i, j, k, l, nodes)
    g = Ctilde.reshape(Ctilde.shape + ex) * (ctx.inv_lambda1 / ctx.harmonic) - 0.5 * quartic
    for k, l in sym_pairs(d):
        akl = a[:, k, l]
        # coupling[j, i] = sum_m W3^{jim} mu_s a^{mkl}(q - z)
        coupling = 0.5 * ctx.mu * fft_contract(ctx.W3_hat, akl, "jim,m->ji", d) \
            + 0.5 * fft_contract(ctx.W3_hat, ctx.mu * akl, "jim,m->ji", d)
        g[:, :, k, l] += coupling.swapaxes(0, 1)
        if k != l:
            g[:, :, l, k] = g[:, :, k, l]
    return PeriodicField(grid, g, 4)


def assemble_g_and_solve_B(spec: KernelSpec, model: CoefficientModel, A, Ctilde: np.ndarray,
                           tol: float = DEFAULT_TOL, maxiter: int = 5000) -> CorrectorB:
    """Assemble ``g^{jkl}``, check its Fredholm condition and solve for ``b^{jkl}``."""
    g = assemble_g(spec, model, A, Ctilde)
    grid = g.grid
    ctx = cell_context(spec, model, grid)
    d = grid.d
    scale = float(np.abs(Ctilde).max()) / max(ctx.harmonic, 1e-300) + model.alpha2 * ctx.dk.a2
    out = np.zeros((d,) * 4 + grid.shape)
    iters, res = {}, {}
    worst = 0.0
    for j in range(d):
        for k, l in sym_pairs(d):
            rhs = g.values[:, j, k, l]
            worst = max(worst, _check_fredholm(rhs, scale, f"g^{j}{k}{l}"))
            sol = _solve_cell(ctx.op, -rhs, tol, maxiter, scale)
            b = sol.x.reshape((d,) + grid.shape)
            out[:, j, k, l] = b
            out[:, j, l, k] = b
            iters[f"{j}{k}{l}"] = sol.iterations
            res[f"{j}{k}{l}"] = sol.residual
    return CorrectorB(PeriodicField(grid, out, 4), g, iters, res, worst, tol)


def check_phi_constant(spec: KernelSpec, model: CoefficientModel, A, B: CorrectorB,
                       Ctilde: np.ndarray, M, sample_q, x=None) -> dict:
    """Compare ``lambda(x, q) Phi_b(M, q)`` with ``c(x) M`` at sampled nodes.

    Direct offset sums; ``M`` is a third-order tensor contracted as
    ``T^{ijkl} M_{jkl}``.  Returns the maximum deviation divided by ``|M|``,
    absolute and relative to ``|C~|``.
    """
    a = _full_A(A)
    b = B.values
    grid = B.grid
    ctx = cell_context(spec, model, grid)
    d = grid.d
    M = np.asarray(M, float)
    Mn = np.linalg.norm(M)
    if Mn == 0:
        return {"max_abs": 0.0, "relative": 0.0}
    x = np.zeros(d) if x is None else np.asarray(x, float)
    lam0 = float(model.lambda0(x[None, :])[0])
    sample_q = np.atleast_2d(np.asarray(sample_q, dtype=int))
    q_idx = tuple(sample_q.T)
    N = grid.N
    dk = ctx.dk
    mu_q = ctx.mu[q_idx]
    b_q = b[(slice(None),) * 4 + q_idx]
    phi = np.zeros((d, len(sample_q)))
    for n, m, e, r in zip(dk.offsets, dk.masses, dk.unit, dk.length):
        y_idx = tuple(((sample_q - n) % N).T)
        mu_s = 0.5 * (mu_q + ctx.mu[y_idx])
        a_y = a[(slice(None),) * 3 + y_idx]
        b_y = b[(slice(None),) * 4 + y_idx]
        quart = 0.5 * r * r * np.einsum("j,k,l,jkl->", e, e, e, M)
        coup = r * np.einsum("j,m,mkls,jkl->s", e, e, a_y, M)
        corr = np.einsum("m,mjkls,jkl->s", e, b_y - b_q, M)
        phi += m * mu_s * (quart - coup + corr) * e[:, None]
    lam = lam0 * ctx.inv_lambda1[q_idx] ** -1
    lhs = lam * phi
    target = lam0 / ctx.harmonic * np.einsum("ijkl,jkl->i", Ctilde, M)
    dev = np.linalg.norm(lhs - target[:, None], axis=0).max() / Mn
    return {"max_abs": float(dev), "relative": float(dev / np.abs(Ctilde).max())}


# ---------------------------------------------------------------------------
# Quadrature identities
# ---------------------------------------------------------------------------


def even_odd_sums(spec: KernelSpec, grid: TorusGrid, g: np.ndarray, h: np.ndarray) -> dict:
    """Direct double sums over cell nodes and kernel offsets for scalar fields g, h.

    For the even scalar weight ``m_n`` the sums ``sum g(q - z) h(q)`` and
    ``sum g(q) h(q - z)`` coincide; for the odd vector weight ``m_n z_n`` they
    are negatives of each other.
    """
    dk = cell_operator(spec, CoefficientModel(), grid).discrete
    axes = tuple(range(grid.d))
    even_l = even_r = 0.0
    odd_l = np.zeros(grid.d)
    odd_r = np.zeros(grid.d)
    for n, m, z in zip(dk.offsets, dk.masses, dk.z):
        shift = tuple(int(s) for s in n)
        left = float(np.sum(np.roll(g, shift, axis=axes) * h))
        right = float(np.sum(g * np.roll(h, shift, axis=axes)))
        even_l += m * left
        even_r += m * right
        odd_l += m * z * left
        odd_r += m * z * right
    v = grid.cell_volume
    return {"even": (even_l * v, even_r * v), "odd": (odd_l * v, odd_r * v)}
