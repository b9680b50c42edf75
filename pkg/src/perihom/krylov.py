"""Preconditioned conjugate gradients with subspace projection and residual history."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, minres

from .errors import ConvergenceError


@dataclass
class KrylovResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    method: str = "pcg"


def pcg(apply_A: Callable, b: np.ndarray, precond: Optional[Callable] = None,
        tol: float = 1e-9, maxiter: int = 2000, project: Optional[Callable] = None,
        x0: Optional[np.ndarray] = None, raise_on_fail: bool = True) -> KrylovResult:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    ``project`` maps vectors onto the subspace where ``A`` is definite; it is
    applied to the right-hand side, every residual and every preconditioned
    residual so round-off cannot drift into the null space.  Convergence is
    declared when the relative residual ``|r| / |b|`` drops below ``tol``.
    """
    P = project if project is not None else (lambda v: v)
    Minv = precond if precond is not None else (lambda v: v)
    b = P(np.asarray(b, float))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), 0, 0.0, [0.0])
    x = np.zeros_like(b) if x0 is None else P(np.array(x0, float))
    r = b - P(apply_A(x)) if x0 is not None else b.copy()
    z = P(Minv(r))
    p = z.copy()
    rz = np.vdot(r, z)
    history = [np.linalg.norm(r) / bnorm]
    for it in range(1, maxiter + 1):
        Ap = P(apply_A(p))
        pAp = np.vdot(p, Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        res = np.linalg.norm(r) / bnorm
        history.append(res)
        if res <= tol:
            return KrylovResult(P(x), it, res, history)
        z = P(Minv(r))
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if raise_on_fail:
        raise ConvergenceError(f"CG stopped after {len(history) - 1} iterations at relative "
                               f"residual {history[-1]:.3e} (tolerance {tol:g})", history)
    return KrylovResult(P(x), len(history) - 1, history[-1], history)


def minres_solve(apply_A: Callable, b: np.ndarray, tol: float = 1e-9,
                 maxiter: int = 2000) -> KrylovResult:
    """Unpreconditioned MINRES fallback for symmetric systems (scipy)."""
    n = b.size
    op = LinearOperator((n, n), matvec=lambda v: apply_A(v), dtype=float)
    history = []
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return KrylovResult(np.zeros_like(b), 0, 0.0, [0.0], "minres")

    def cb(xk):
        history.append(float(np.linalg.norm(b - apply_A(xk)) / bnorm))

    x, info = minres(op, b, rtol=tol, maxiter=maxiter, callback=cb)
    res = float(np.linalg.norm(b - apply_A(x)) / bnorm)
    if info != 0 and res > tol:
        raise ConvergenceError(f"MINRES stopped at relative residual {res:.3e}", history)
    return KrylovResult(x, len(history), res, history, "minres")
