"""Effective tensor field, elasticity certificates and the isotropic closed form."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import ArgumentError
from .model import CoefficientModel
from .torus import PeriodicField, TorusGrid, spectral_hessian

SYMMETRY_TOL = 1e-8


def sym_basis(d: int) -> list:
    """Orthonormal basis of symmetric d x d matrices (Mandel convention)."""
    basis = []
    for i in range(d):
        E = np.zeros((d, d))
        E[i, i] = 1.0
        basis.append(E)
    for i, j in itertools.combinations(range(d), 2):
        E = np.zeros((d, d))
        E[i, j] = E[j, i] = 1.0 / np.sqrt(2.0)
        basis.append(E)
    return basis


def mandel_matrix(C: np.ndarray) -> np.ndarray:
    """Matrix of ``W -> C W`` on symmetric matrices in an orthonormal basis."""
    d = C.shape[0]
    B = sym_basis(d)
    return np.array([[np.einsum("ij,ijkl,kl->", P, C, Q) for Q in B] for P in B])


def voigt_index(d: int) -> list:
    if d == 1:
        return [(0, 0)]
    if d == 2:
        return [(0, 0), (1, 1), (0, 1)]
    return [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


def voigt_matrix(C: np.ndarray) -> np.ndarray:
    """Standard engineering Voigt matrix ``C[I, J] = c^{ijkl}``."""
    idx = voigt_index(C.shape[0])
    return np.array([[C[i, j, k, l] for k, l in idx] for i, j in idx])


def symmetry_violation(C: np.ndarray) -> float:
    """Largest deviation from ``c^{ijkl} = c^{klij} = c^{jikl} = c^{ijlk}``."""
    return float(max(np.abs(C - C.transpose(2, 3, 0, 1)).max(),
                     np.abs(C - C.transpose(1, 0, 2, 3)).max(),
                     np.abs(C - C.transpose(0, 1, 3, 2)).max()))


def symmetrize(C: np.ndarray) -> np.ndarray:
    S = 0.5 * (C + C.transpose(1, 0, 2, 3))
    S = 0.5 * (S + S.transpose(0, 1, 3, 2))
    return 0.5 * (S + S.transpose(2, 3, 0, 1))


def lame_closed_form(a2: float, d: int) -> np.ndarray:
    """``a2 / (2 d (d + 2)) (d_ij d_kl + d_ik d_jl + d_il d_jk)``."""
    if d not in (1, 2, 3):
        raise ArgumentError("dimension must be 1, 2 or 3")
    if not a2 > 0:
        raise ArgumentError("a2 must be positive")
    I = np.eye(d)
    T = (np.einsum("ij,kl->ijkl", I, I) + np.einsum("ik,jl->ijkl", I, I)
         + np.einsum("il,jk->ijkl", I, I))
    return a2 / (2.0 * d * (d + 2.0)) * T


def contract_D2(C: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """``[c D^2 u]_i = c^{ijkl} d_j d_k u_l``.

    ``hess[l, a, b]`` holds ``d_a d_b u_l`` (component first).  ``C`` is either
    a constant tensor or a node field with trailing grid axes.
    """
    if C.ndim == 4:
        return np.einsum("ijkl,ljk...->i...", C, hess)
    return np.einsum("ijkl...,ljk...->i...", C, hess)


def lame_operator_apply(mu0_field, u: PeriodicField) -> PeriodicField:
    """``mu0 Laplace(u) + 2 mu0 grad(div u)`` by spectral differentiation."""
    H = spectral_hessian(u).values  # (l, a, b, ...)
    lap = np.einsum("laa...->l...", H)
    grad_div = np.einsum("kki...->i...", H)
    mu0 = np.asarray(mu0_field, float)
    return PeriodicField(u.grid, mu0 * lap + 2.0 * mu0 * grad_div, 1)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------


def _directions(d: int, n: int) -> np.ndarray:
    """Deterministic unit vectors: a half circle in 2D, a Fibonacci sphere in 3D."""
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        t = np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _acoustic_min(C, eta):
    A = np.einsum("ijkl,j,l->ik", C, eta, eta)
    return np.linalg.eigvalsh(0.5 * (A + A.T))[0]


def legendre_hadamard_min(C: np.ndarray, n: int = 10000) -> tuple:
    """``min <C xi (x) eta, xi (x) eta>`` over unit ``xi, eta``.

    The minimum over ``xi`` is the smallest eigenvalue of the acoustic tensor
    ``A(eta)_{ik} = c^{ijkl} eta_j eta_l``; ``eta`` is sampled and the best
    sample is refined with a local optimizer.  Returns ``(value, xi, eta)``.
    """
    d = C.shape[0]
    etas = _directions(d, n if d == 3 else max(n // 10, 8))
    vals = np.array([_acoustic_min(C, e) for e in etas])
    best = etas[int(np.argmin(vals))]
    value = float(vals.min())
    if d > 1:
        def f(p):
            e = p / np.linalg.norm(p)
            return _acoustic_min(C, e)
        res = minimize(f, best, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000})
        if res.fun < value:
            value, best = float(res.fun), res.x / np.linalg.norm(res.x)
    A = np.einsum("ijkl,j,l->ik", C, best, best)
    w, v = np.linalg.eigh(0.5 * (A + A.T))
    return value, v[:, 0], best


@dataclass
class Certificate:
    gamma1: float
    gamma2: float
    lh_min: float
    symmetry_max_violation: float
    sampled_gamma1: float
    voigt: np.ndarray
    lower_bound: Optional[float] = None

    @property
    def passed(self) -> bool:
        ok = self.gamma1 > 0 and self.lh_min > 0 and self.symmetry_max_violation <= SYMMETRY_TOL
        if self.lower_bound is not None:
            ok = ok and self.gamma1 >= self.lower_bound - 1e-6
        return bool(ok)

    def to_dict(self):
        return {"gamma1": self.gamma1, "gamma2": self.gamma2, "lh_min": self.lh_min,
                "symmetry_max_violation": self.symmetry_max_violation,
                "sampled_gamma1": self.sampled_gamma1, "voigt": self.voigt.tolist(),
                "lower_bound": self.lower_bound, "passed": self.passed}


def certify_elasticity(C: np.ndarray, samples: int = 2000, seed: int = 0,
                       lower_bound: Optional[float] = None) -> Certificate:
    """Symmetry defect, ellipticity constants and Legendre-Hadamard minimum of ``C``.

    ``gamma1`` is the exact smallest eigenvalue of the symmetrized tensor on
    symmetric matrices; ``sampled_gamma1`` is the smallest Rayleigh quotient
    over ``samples`` random symmetric matrices and can only exceed it.
    """
    C = np.asarray(C, float)
    d = C.shape[0]
    viol = symmetry_violation(C)
    Q = mandel_matrix(symmetrize(C))
    ev = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((samples, d, d))
    W = 0.5 * (W + W.transpose(0, 2, 1))
    num = np.einsum("sij,ijkl,skl->s", W, C, W)
    den = np.einsum("sij,sij->s", W, W)
    lh, _, _ = legendre_hadamard_min(C)
    return Certificate(gamma1=float(ev[0]), gamma2=float(np.abs(ev).max()), lh_min=float(lh),
                       symmetry_max_violation=viol, sampled_gamma1=float((num / den).min()),
                       voigt=voigt_matrix(C), lower_bound=lower_bound)


def positivity_lower_bound(alpha1: float, quartic: np.ndarray) -> float:
    """``alpha1 / 2 * min_{|W| = 1} sum m <W z, z>^2 / |z|^2`` over symmetric W.

    ``quartic`` is ``1/2 sum m z_i z_j z_k z_l / |z|^2``.
    """
    Q = mandel_matrix(2.0 * quartic)
    return 0.5 * alpha1 * float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[0])


# ---------------------------------------------------------------------------
# The field c(x)
# ---------------------------------------------------------------------------


def harmonic_mean_factor(model: CoefficientModel, x, n_cell: int = 64) -> np.ndarray:
    """``(cell mean over q of 1 / lambda(x, q))^-1`` by nodal quadrature.

    ``x`` has shape (..., d); the result has shape ``x.shape[:-1]``.
    """
    x = np.atleast_1d(np.asarray(x, float))
    d = x.shape[-1]
    cell = TorusGrid(d, n_cell).points().reshape(-1, d)
    lam0 = model.lambda0(x)
    inv1 = (1.0 / model.lambda1(cell)).mean()
    return lam0 / inv1


def effective_tensor(model: CoefficientModel, Ctilde: np.ndarray, x, n_cell: int = 64) -> np.ndarray:
    """``c(x) = (int 1 / lambda(x, q) dq)^-1 C~``; ``x`` a single point of length d."""
    x = np.asarray(x, float)
    return float(harmonic_mean_factor(model, x[None, :], n_cell)[0]) * np.asarray(Ctilde, float)


@dataclass
class EffectiveTensor:
    """``c(x) = phi(x) C~`` with ``phi(x) = lambda0(x) / <1 / lambda1>``."""

    Ctilde: np.ndarray
    model: CoefficientModel
    n_cell: int = 64

    def factor(self, x) -> np.ndarray:
        return harmonic_mean_factor(self.model, x, self.n_cell)

    def at(self, x) -> np.ndarray:
        return effective_tensor(self.model, self.Ctilde, x, self.n_cell)

    def factor_field(self, grid: TorusGrid) -> np.ndarray:
        return self.factor(grid.points())

    def field(self, grid: TorusGrid) -> np.ndarray:
        """Node field of shape ``(d, d, d, d, N, ..., N)``."""
        phi = self.factor_field(grid)
        return self.Ctilde.reshape(self.Ctilde.shape + (1,) * grid.d) * phi

    def certificates(self, points, lower_bound=None) -> list:
        return [certify_elasticity(self.at(x), lower_bound=lower_bound) for x in points]

    def to_dict(self):
        return {"Ctilde": self.Ctilde.reshape(-1).tolist(), "model": self.model.to_config()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)
