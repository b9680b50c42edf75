"""The homogenized operator ``L0 u = c(x) D^2 u`` and the local resolvent solve."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .effective import EffectiveTensor, contract_D2
from .errors import ArgumentError, ConvergenceError
from .krylov import pcg
from .torus import PeriodicField, TorusGrid, spectral_hessian


def hessian_symbol(grid: TorusGrid) -> np.ndarray:
    """``K[a, b](k)`` with ``d_a d_b  <->  -K[a, b]``, matching :func:`spectral_hessian`."""
    d = grid.d
    kz = [np.broadcast_to(k, grid.shape).copy() for k in grid.wavenumbers()]
    nyq = grid.N // 2
    out = np.empty((d, d) + grid.shape)
    for a in range(d):
        for b in range(d):
            if a == b:
                out[a, b] = kz[a] ** 2
            else:
                ka, kb = kz[a].copy(), kz[b].copy()
                ka[(slice(None),) * a + (nyq,)] = 0.0
                kb[(slice(None),) * b + (nyq,)] = 0.0
                out[a, b] = ka * kb
    return out


def acoustic_symbol(C: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """``A(k)_{il} = c^{ijkl} K_{jk}(k)`` so that ``-C D^2 u  <->  A(k) u_hat``."""
    return np.einsum("ijkl,jk...->il...", C, hessian_symbol(grid))


def _coefficients(Ceff, grid):
    """Return ``(C~, phi)`` with ``c(x) = phi(x) C~`` on the grid."""
    if isinstance(Ceff, EffectiveTensor):
        return np.asarray(Ceff.Ctilde, float), Ceff.factor_field(grid)
    C = np.asarray(Ceff, float)
    if C.ndim == 4:
        return C, np.ones(grid.shape)
    raise ArgumentError("expected an EffectiveTensor or a constant fourth-order tensor")


def apply_L0(Ceff, u: PeriodicField) -> PeriodicField:
    """``[c(x) D^2 u]_i = c^{ijkl}(x) d_j d_k u_l`` with FFT second derivatives."""
    C, phi = _coefficients(Ceff, u.grid)
    H = spectral_hessian(u).values
    return PeriodicField(u.grid, phi * contract_D2(C, H), 1)


@dataclass
class LocalSolveReport:
    u0: PeriodicField
    iterations: int
    residual: float
    m: float
    contraction: float
    history: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        h = self.history
        return all(b <= a for a, b in zip(h, h[1:]))

    def to_dict(self):
        return {"m": self.m, "iterations": self.iterations, "residual": self.residual,
                "contraction": self.contraction, "monotone": self.monotone}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def local_mode_solve(m: float, C: np.ndarray, k, f_hat, box_length: float = 1.0) -> np.ndarray:
    """``(m I + 4 pi^2 A(k) / L^2)^-1 f_hat`` for integer wave vector ``k``."""
    k = np.asarray(k, float)
    A = np.einsum("ijkl,j,k->il", C, k, k) * (2 * np.pi / box_length) ** 2
    return np.linalg.solve(m * np.eye(len(k)) + A, np.asarray(f_hat))


def solve_local(m: float, Ceff, f: PeriodicField, tol: float = 1e-10,
                maxiter: int = 1000) -> LocalSolveReport:
    """Solve ``(m - c(x) D^2) u = f`` on the periodic box.

    With ``c = phi C~`` the system is rewritten as the symmetric positive form
    ``(m / phi - C~ D^2) u = f / phi`` and solved by CG, preconditioned with the
    exact Fourier inverse of ``m <1 / phi> - C~ D^2``.  The reported residual
    is ``|(m - L0) u - f| / |f|`` and ``contraction`` the mean residual
    reduction factor per iteration.
    """
    if not m > 0:
        raise ArgumentError("m must be positive")
    grid = f.grid
    d = grid.d
    C, phi = _coefficients(Ceff, grid)
    shape = (d,) + grid.shape
    fnorm = np.linalg.norm(f.values)
    if fnorm == 0:
        return LocalSolveReport(PeriodicField.zeros(grid, 1), 0, 0.0, float(m), 0.0, [0.0])
    inv_phi = 1.0 / phi
    S = acoustic_symbol(C, grid)  # (d, d, grid)
    axes = tuple(range(1, 1 + d))

    def neg_CD2(v):
        vh = np.fft.fftn(v, axes=axes)
        return np.fft.ifftn(np.einsum("il...,l...->i...", S, vh), axes=axes).real

    P = np.moveaxis(S, (0, 1), (-2, -1)) + m * inv_phi.mean() * np.eye(d)
    Pinv = np.moveaxis(np.linalg.inv(P), (-2, -1), (0, 1))

    def A(v):
        v = v.reshape(shape)
        return (m * inv_phi * v + neg_CD2(v)).reshape(-1)

    def M(v):
        vh = np.fft.fftn(v.reshape(shape), axes=axes)
        return np.fft.ifftn(np.einsum("il...,l...->i...", Pinv, vh), axes=axes).real.reshape(-1)

    def true_residual(x):
        u = x.reshape(shape)
        return float(np.linalg.norm(m * u + phi * neg_CD2(u) - f.values) / fnorm)

    rhs = (inv_phi * f.values).reshape(-1)
    ratio = float(phi.max() / phi.min())
    inner = tol / ratio
    x, iters, history = None, 0, []
    for _ in range(4):
        res = pcg(A, rhs, precond=M, tol=inner, maxiter=maxiter, x0=x)
        x, iters = res.x, iters + res.iterations
        history.extend(res.history if not history else res.history[1:])
        if true_residual(x) <= tol:
            break
        inner *= 0.1
    r = true_residual(x)
    if r > tol:
        raise ConvergenceError(f"local solve residual {r:.3e} above {tol:g}; try a larger m", history)
    contraction = float(history[-1] ** (1.0 / max(iters, 1))) if history[-1] > 0 else 0.0
    return LocalSolveReport(PeriodicField(grid, x.reshape(shape), 1), iters, r, float(m),
                            contraction, [float(h) for h in history])
