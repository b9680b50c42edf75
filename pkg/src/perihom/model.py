"""Interaction kernels, periodic coefficient fields and their admissibility checks.

The nonlocal operator is built from three ingredients: an even, integrable
kernel ``rho`` on R^d, a 1-periodic micro-modulus ``mu(y)`` and a positive
weight ``lambda(x, y) = lambda0(x) * lambda1(y)`` that is periodic in the fast
variable ``y``.  This module defines them, computes kernel moments and checks
the standing assumptions (nonnegativity, evenness, cone nondegeneracy and the
two-sided bounds ``alpha1 <= mu, lambda <= alpha2``) on sample sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import AccuracyError, ArgumentError, ValidationError

FAMILIES = ("radial-indicator", "radial-gaussian", "cone-restricted", "custom")

# Gaussian tails are cut at this many widths; exp(-36) is below 1e-15.
GAUSSIAN_TRUNCATION_WIDTHS = 6.0


def _ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


def _cone_direction_fraction(d: int, aperture: float) -> float:
    """Fraction of unit directions w with |w . nu| > 1 - aperture."""
    c = 1.0 - aperture
    if d == 1:
        return 1.0 if c < 1.0 else 0.0
    if d == 2:
        return 2.0 * math.acos(c) / math.pi
    if d == 3:
        # two polar caps of height 1 - c each
        return 1.0 - c
    raise ArgumentError(f"dimension {d} not supported")


@dataclass(frozen=True)
class KernelSpec:
    """An even interaction kernel ``rho`` on R^d.

    ``radius`` is the support radius for the indicator and cone families and
    the width ``w`` in ``exp(-|z|^2 / w^2)`` for the Gaussian family.  With
    ``normalize=True`` the kernel is scaled to unit mass before ``amplitude``
    is applied.  The ``custom`` family evaluates ``func`` and needs an explicit
    ``truncation`` radius; its evenness is only checked by sampling.
    """

    family: str
    dimension: int = 2
    radius: float = 0.4
    axis: Optional[tuple] = None
    aperture: Optional[float] = None
    truncation: Optional[float] = None
    normalize: bool = True
    amplitude: float = 1.0
    func: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArgumentError(f"unknown kernel family {self.family!r}")
        if self.dimension not in (1, 2, 3):
            raise ArgumentError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if not self.radius > 0:
            raise ArgumentError("kernel radius/width must be positive")
        if self.family == "cone-restricted":
            if self.aperture is None or not 0.0 < self.aperture < 1.0:
                raise ArgumentError("cone aperture must lie in (0, 1)")
            axis = np.zeros(self.dimension) if self.axis is None else np.asarray(self.axis, float)
            if self.axis is None:
                axis[0] = 1.0
            if axis.shape != (self.dimension,) or not np.linalg.norm(axis) > 0:
                raise ArgumentError("cone axis must be a nonzero vector of length d")
            object.__setattr__(self, "axis", tuple(float(a) for a in axis / np.linalg.norm(axis)))
        if self.family == "custom":
            if self.func is None or self.truncation is None:
                raise ArgumentError("custom kernels need func and truncation")

    # -- geometry -----------------------------------------------------------
    @property
    def support_radius(self) -> float:
        """Radius outside which the kernel is (treated as) zero."""
        if self.truncation is not None:
            return float(self.truncation)
        if self.family == "radial-gaussian":
            return GAUSSIAN_TRUNCATION_WIDTHS * self.radius
        return float(self.radius)

    @property
    def is_radial(self) -> bool:
        return self.family in ("radial-indicator", "radial-gaussian")

    def _raw_mass(self) -> Optional[float]:
        d, r = self.dimension, self.radius
        if self.family == "radial-indicator":
            return _ball_volume(d, r)
        if self.family == "radial-gaussian":
            return (math.pi * r * r) ** (d / 2)
        if self.family == "cone-restricted":
            return _cone_direction_fraction(d, self.aperture) * _ball_volume(d, r)
        return None

    @property
    def scale(self) -> float:
        if self.normalize and self.family != "custom":
            return self.amplitude / self._raw_mass()
        return self.amplitude

    def closed_form_moments(self) -> Optional[tuple]:
        """``(a1, a2)`` in closed form, or None for custom kernels."""
        mass = self._raw_mass()
        if mass is None:
            return None
        d, r = self.dimension, self.radius
        a1 = self.scale * mass
        if self.family == "radial-gaussian":
            a2 = a1 * d * r * r / 2.0
        else:
            a2 = a1 * d * r * r / (d + 2.0)
        return a1, a2

    def __call__(self, z) -> np.ndarray:
        """Evaluate rho at points ``z`` of shape (..., d)."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dimension:
            raise ArgumentError(f"points must have trailing dimension {self.dimension}")
        r2 = np.einsum("...i,...i->...", z, z)
        if self.family == "radial-indicator":
            val = (r2 <= self.radius**2).astype(float)
        elif self.family == "radial-gaussian":
            val = np.exp(-r2 / self.radius**2)
        elif self.family == "cone-restricted":
            proj = np.abs(z @ np.asarray(self.axis))
            val = ((r2 <= self.radius**2) & (proj > (1.0 - self.aperture) * np.sqrt(r2))).astype(float)
        else:
            val = np.asarray(self.func(z), dtype=float)
            val = np.where(r2 <= self.support_radius**2, val, 0.0)
        return self.scale * val

    def to_config(self) -> dict:
        out = {"family": self.family, "radius": self.radius, "normalize": self.normalize,
               "amplitude": self.amplitude}
        if self.family == "cone-restricted":
            out.update(axis=list(self.axis), aperture=self.aperture)
        if self.truncation is not None:
            out["truncation"] = self.truncation
        return out


# ---------------------------------------------------------------------------
# Coefficient fields
# ---------------------------------------------------------------------------

_EXPR_NAMES = {
    "pi": np.pi, "sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt,
    "abs": np.abs, "tanh": np.tanh, "floor": np.floor, "np": np,
}


@dataclass(frozen=True)
class Coefficient:
    """A scalar field described by a small closed set of formulas.

    kinds
        ``constant``          value
        ``cosine``            base + amplitude * prod_i cos(2 pi f_i y_i / period)
        ``reciprocal-cosine`` 1 / (cosine form)
        ``sine``              base + amplitude * sin(2 pi (f . y) / period)
        ``expr``              python expression in ``y`` (tuple of coordinate arrays)

    Factors with ``f_i = 0`` are omitted from the cosine product.
    """

    kind: str = "constant"
    value: float = 1.0
    base: float = 1.0
    amplitude: float = 0.0
    frequencies: tuple = ()
    period: float = 1.0
    expr: str = ""

    @classmethod
    def from_config(cls, cfg: Any) -> "Coefficient":
        if isinstance(cfg, (int, float)):
            return cls(kind="constant", value=float(cfg))
        cfg = dict(cfg)
        kind = cfg.pop("kind", "constant")
        if "frequencies" in cfg:
            cfg["frequencies"] = tuple(float(f) for f in cfg["frequencies"])
        c = cls(kind=kind, **cfg)
        if kind not in ("constant", "cosine", "reciprocal-cosine", "sine", "expr"):
            raise ArgumentError(f"unknown coefficient kind {kind!r}")
        return c

    def to_config(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "expr":
            return {"kind": "expr", "expr": self.expr}
        return {"kind": self.kind, "base": self.base, "amplitude": self.amplitude,
                "frequencies": list(self.frequencies), "period": self.period}

    def _freqs(self, d):
        f = np.zeros(d) if not self.frequencies else np.asarray(self.frequencies, float)
        if f.shape != (d,):
            raise ArgumentError(f"expected {d} frequencies, got {len(f)}")
        return f

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        d = y.shape[-1]
        if self.kind == "constant":
            return np.full(y.shape[:-1], float(self.value))
        if self.kind == "expr":
            coords = tuple(y[..., i] for i in range(d))
            names = dict(_EXPR_NAMES, y=coords, x=coords)
            out = eval(self.expr, {"__builtins__": {}}, names)  # noqa: S307 - config-controlled
            return np.broadcast_to(np.asarray(out, float), y.shape[:-1]).copy()
        f = self._freqs(d)
        if self.kind == "sine":
            return self.base + self.amplitude * np.sin(2 * np.pi * (y @ f) / self.period)
        prod = np.ones(y.shape[:-1])
        for i in range(d):
            if f[i] != 0:
                prod = prod * np.cos(2 * np.pi * f[i] * y[..., i] / self.period)
        val = self.base + self.amplitude * prod
        if self.kind == "reciprocal-cosine":
            return 1.0 / val
        return val

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or (
            self.kind in ("cosine", "sine") and self.amplitude == 0.0)


@dataclass(frozen=True)
class CoefficientModel:
    """Coefficients ``mu(y)`` and ``lambda(x, y) = lambda0(x) lambda1(y)``.

    ``mu`` and ``lambda1`` are 1-periodic; ``lambda0`` is a smooth function of
    the slow variable on the solve box ``[0, box_length)^d``.
    """

    mu: Coefficient = Coefficient()
    lambda0: Coefficient = Coefficient()
    lambda1: Coefficient = Coefficient()
    alpha1: float = 1.0
    alpha2: float = 1.0
    box_length: float = 1.0

    def lam(self, x, y) -> np.ndarray:
        return self.lambda0(x) * self.lambda1(y)

    def to_config(self) -> dict:
        return {"mu": self.mu.to_config(), "lambda0": self.lambda0.to_config(),
                "lambda1": self.lambda1.to_config(), "alpha1": self.alpha1,
                "alpha2": self.alpha2, "box_length": self.box_length}


def kernel_from_config(cfg: dict, dimension: int) -> KernelSpec:
    cfg = dict(cfg)
    family = cfg.pop("family")
    if "width" in cfg:
        cfg["radius"] = cfg.pop("width")
    if "axis" in cfg and cfg["axis"] is not None:
        cfg["axis"] = tuple(cfg["axis"])
    return KernelSpec(family=family, dimension=dimension, **cfg)


def model_from_config(cfg: dict) -> tuple:
    """Parse the JSON model schema into ``(KernelSpec, CoefficientModel)``."""
    d = int(cfg.get("dimension", 2))
    spec = kernel_from_config(cfg["kernel"], d)
    model = CoefficientModel(
        mu=Coefficient.from_config(cfg.get("mu", 1.0)),
        lambda0=Coefficient.from_config(cfg.get("lambda0", 1.0)),
        lambda1=Coefficient.from_config(cfg.get("lambda1", 1.0)),
        alpha1=float(cfg.get("alpha1", 1.0)),
        alpha2=float(cfg.get("alpha2", 1.0)),
        box_length=float(cfg.get("box_length", 1.0)),
    )
    return spec, model


def model_to_config(spec: KernelSpec, model: CoefficientModel) -> dict:
    out = {"dimension": spec.dimension, "kernel": spec.to_config()}
    out.update(model.to_config())
    return out


def sampled_bounds(model: CoefficientModel, d: int, n: int = 64) -> tuple:
    """Min/max of ``mu`` and ``lambda0 * lambda1`` on a tensor grid of n^d nodes."""
    ax = np.arange(n) / n
    y = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1)
    mu = model.mu(y)
    l1 = model.lambda1(y)
    l0 = model.lambda0(y * model.box_length)
    lo = min(mu.min(), l0.min() * l1.min(), l0.min() * l1.max())
    hi = max(mu.max(), l0.max() * l1.max(), l0.max() * l1.min())
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureConfig:
    """Midpoint rule with ``cells`` per axis on [-R, R]^d, compared with half as many."""

    cells: Optional[int] = None
    rtol: float = 1e-3

    def resolved_cells(self, d: int) -> int:
        if self.cells is not None:
            if self.cells < 2:
                raise ArgumentError("quadrature resolution must be at least 2")
            return int(self.cells)
        return {1: 1 << 16, 2: 1024, 3: 128}[d]


@dataclass(frozen=True)
class MomentReport:
    a1: float
    a2: float
    quadrature_error_estimate: float


def _midpoint_moments(fn, d, R, n):
    """Midpoint sums of ``fn`` and ``|z|^2 fn`` on [-R, R]^d with n cells per axis."""
    h = 2.0 * R / n
    ax = -R + (np.arange(n) + 0.5) * h
    if d == 1:
        z = ax[:, None]
        v = fn(z)
        return v.sum() * h, (v * ax**2).sum() * h
    rest = np.stack(np.meshgrid(*([ax] * (d - 1)), indexing="ij"), axis=-1)
    rest2 = np.einsum("...i,...i->...", rest, rest)
    m0 = m2 = 0.0
    for a in ax:
        z = np.concatenate([np.full(rest.shape[:-1] + (1,), a), rest], axis=-1)
        v = fn(z)
        m0 += v.sum()
        m2 += (v * (rest2 + a * a)).sum()
    return m0 * h**d, m2 * h**d


def kernel_moments(spec: KernelSpec, quad: QuadratureConfig = QuadratureConfig()) -> MomentReport:
    """Mass ``a1`` and second moment ``a2`` of the kernel by midpoint quadrature.

    The error estimate is the difference between the fine result and the one
    obtained with half the resolution.
    """
    d = spec.dimension
    n = quad.resolved_cells(d)
    R = spec.support_radius
    a1, a2 = _midpoint_moments(spec, d, R, n)
    c1, c2 = _midpoint_moments(spec, d, R, max(n // 2, 1))
    if not a1 > 0:
        raise ValidationError(f"degenerate kernel: a₁ = {a1:g}")
    if not np.isfinite(a2):
        raise ValidationError("kernel second moment is not finite")
    err = max(abs(a1 - c1) / abs(a1), abs(a2 - c2) / max(abs(a2), 1e-300))
    if err > quad.rtol:
        raise AccuracyError(f"moment quadrature did not converge (relative change {err:.3e})",
                            estimate=err)
    return MomentReport(a1=float(a1), a2=float(a2), quadrature_error_estimate=float(err))


def mu_sym(model: CoefficientModel, x, y) -> np.ndarray:
    """Symmetrized modulus ``(mu(x) + mu(y)) / 2``."""
    return 0.5 * (model.mu(x) + model.mu(y))


def rho_eps(spec: KernelSpec, eps: float, z) -> np.ndarray:
    """Rescaled kernel ``eps^-d rho(z / eps)``; it keeps the mass ``a1``."""
    if not eps > 0:
        raise ArgumentError("eps must be positive")
    return spec(np.asarray(z, float) / eps) / eps**spec.dimension


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleConfig:
    kernel_points: int = 4000
    coefficient_points: int = 4000
    directions: int = 512
    seed: int = 0

    def __post_init__(self):
        if min(self.kernel_points, self.coefficient_points, self.directions) <= 0:
            raise ArgumentError("sample counts must be positive")


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    detail: str = ""
    witness: Optional[list] = None

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail,
                "witness": self.witness}


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _unit_directions(rng, d, n):
    w = rng.standard_normal((n, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def validate_assumptions(spec: KernelSpec, model: CoefficientModel,
                         samples: SampleConfig = SampleConfig()) -> ValidationReport:
    """Sample-based check of kernel and coefficient assumptions.

    Failures are recorded in the report with a witnessing sample rather than
    raised.  Cone containment near the origin is checked on sampled
    directions only; it is a coverage report, not a proof.
    """
    rng = np.random.default_rng(samples.seed)
    d = spec.dimension
    R = spec.support_radius
    checks = []

    # kernel sample: random points in the truncation ball plus a lattice
    radii = R * rng.random(samples.kernel_points) ** (1.0 / d)
    z = _unit_directions(rng, d, samples.kernel_points) * radii[:, None]
    vals = spec(z)
    neg = np.flatnonzero(vals < 0)
    checks.append(AssumptionCheck(
        "kernel.nonnegative", neg.size == 0,
        f"min sampled value {vals.min():.3e}",
        None if neg.size == 0 else z[neg[0]].tolist()))
    mirrored = spec(-z)
    odd = np.flatnonzero(vals != mirrored)
    checks.append(AssumptionCheck(
        "kernel.even", odd.size == 0,
        f"max |rho(z) - rho(-z)| = {np.max(np.abs(vals - mirrored)):.3e}",
        None if odd.size == 0 else z[odd[0]].tolist()))
    try:
        mom = kernel_moments(spec, QuadratureConfig(cells={1: 4096, 2: 256, 3: 48}[d], rtol=0.05))
        checks.append(AssumptionCheck("kernel.moments", mom.a1 > 0 and np.isfinite(mom.a2),
                                      f"a1={mom.a1:.6g}, a2={mom.a2:.6g}"))
    except (ValidationError, AccuracyError) as exc:
        checks.append(AssumptionCheck("kernel.moments", False, str(exc)))

    # nondegeneracy near the origin: some open set of directions must carry mass
    delta0 = 0.5 * min(spec.radius, R)
    w = _unit_directions(rng, d, samples.directions)
    pts = w * (delta0 * rng.random(samples.directions))[:, None]
    carried = spec(pts) > 0
    coverage = float(carried.mean())
    if spec.family == "cone-restricted":
        inside = np.abs(w @ np.asarray(spec.axis)) > (1.0 - spec.aperture)
        missing = np.flatnonzero(inside & ~carried)
        ok = missing.size == 0 and inside.any()
        checks.append(AssumptionCheck(
            "kernel.cone", ok,
            f"{inside.sum()} sampled cone directions within delta0={delta0:.3g}, "
            f"support coverage {coverage:.3f}",
            None if missing.size == 0 else pts[missing[0]].tolist()))
    else:
        checks.append(AssumptionCheck(
            "kernel.cone", coverage > 0,
            f"fraction of sampled directions carrying mass within delta0={delta0:.3g}: {coverage:.3f}"))

    # coefficients
    y = rng.random((samples.coefficient_points, d))
    x = rng.random((samples.coefficient_points, d)) * model.box_length
    grid = np.stack(np.meshgrid(*([np.arange(16) / 16] * d), indexing="ij"), -1).reshape(-1, d)
    y = np.concatenate([grid, y])
    x = np.concatenate([grid * model.box_length, x])
    a1, a2 = model.alpha1, model.alpha2
    mu = model.mu(y)
    bad = np.flatnonzero(~((mu >= a1) & (mu <= a2)))
    checks.append(AssumptionCheck(
        "coefficients.mu_bounds", bad.size == 0,
        f"sampled mu in [{mu.min():.4g}, {mu.max():.4g}], declared [{a1:.4g}, {a2:.4g}]",
        None if bad.size == 0 else y[bad[0]].tolist()))
    lam = model.lam(x, y)
    bad = np.flatnonzero(~((lam >= a1) & (lam <= a2)))
    checks.append(AssumptionCheck(
        "coefficients.lambda_bounds", bad.size == 0,
        f"sampled lambda in [{lam.min():.4g}, {lam.max():.4g}], declared [{a1:.4g}, {a2:.4g}]",
        None if bad.size == 0 else [x[bad[0]].tolist(), y[bad[0]].tolist()]))
    for name, coef in (("mu", model.mu), ("lambda1", model.lambda1)):
        base = coef(y)
        worst, witness = 0.0, None
        for i in range(d):
            shifted = coef(y + np.eye(d)[i])
            dev = np.abs(shifted - base) / np.maximum(np.abs(base), 1e-300)
            k = int(np.argmax(dev))
            if dev[k] > worst:
                worst, witness = float(dev[k]), y[k].tolist()
        checks.append(AssumptionCheck(
            f"coefficients.{name}_periodic", worst <= 1e-10,
            f"max relative change under unit shifts {worst:.3e}",
            None if worst <= 1e-10 else witness))
    l0 = model.lambda0(x)
    checks.append(AssumptionCheck("coefficients.lambda0_finite", bool(np.all(np.isfinite(l0))),
                                  "lambda0 finite on sampled slow points"))
    return ValidationReport(checks)
