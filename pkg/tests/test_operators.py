import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perihom.errors import ArgumentError
from perihom.model import Coefficient, CoefficientModel, KernelSpec
from perihom.operators import (apply_K, apply_KminusG, apply_Leps, assemble_G, cell_operator,
                               direct_G, kernel_spectrum, nodes_per_cell, operator_checks,
                               resolvent_solve)
from perihom.torus import PeriodicField, TorusGrid, build_periodized_kernel, kernel_masses


def dense_K_direct(spec, mu_values, grid):
    """Matrix of K by explicit double sums over node pairs and lattice offsets."""
    d, N = grid.d, grid.N
    dk = kernel_masses(spec, N)
    n = grid.size
    K = np.zeros((d, n, d, n))
    mu = mu_values.reshape(-1)
    for off, m, e in zip(dk.offsets, dk.masses, dk.unit):
        E = m * np.outer(e, e)
        for qi, q in enumerate(np.ndindex(grid.shape)):
            y = tuple((np.array(q) - off) % N)
            yi = np.ravel_multi_index(y, grid.shape)
            K[:, qi, :, yi] += 0.5 * (mu[qi] + mu[yi]) * E
    return K.reshape(d * n, d * n)


class TestG:
    @pytest.mark.parametrize("name", ["indicator", "gaussian"])
    def test_isotropic(self, name, request):
        spec = request.getfixturevalue(name)
        g = TorusGrid(2, 32)
        G = assemble_G(spec, CoefficientModel(), g).values
        dk = cell_operator(spec, CoefficientModel(), g).discrete
        expected = (dk.a1 - dk.origin_mass) / 2
        np.testing.assert_allclose(G[0, 0], expected, rtol=1e-13)
        np.testing.assert_allclose(G[1, 1], expected, rtol=1e-13)
        np.testing.assert_allclose(G[0, 1], 0.0, atol=1e-15)
        # the origin cell carries no direction, so its mass is missing from G
        a1, _ = spec.closed_form_moments()
        assert expected == pytest.approx(a1 / 2, rel=dk.origin_mass / a1 + 5e-3)

    @pytest.mark.parametrize("name", ["indicator", "gaussian", "cone"])
    def test_bound_and_direct(self, name, request, hetero):
        spec = request.getfixturevalue(name)
        g = TorusGrid(2, 16)
        G = assemble_G(spec, hetero, g)
        dk = cell_operator(spec, hetero, g).discrete
        assert G.bound_holds(hetero, dk.a1)
        np.testing.assert_allclose(G.values, direct_G(spec, hetero, g), atol=1e-13)

    def test_lower_bound(self, indicator, hetero):
        g = TorusGrid(2, 32)
        assert assemble_G(indicator, hetero, g).gamma >= hetero.alpha1 * assemble_G(
            indicator, CoefficientModel(), g).gamma


class TestK:
    def test_constant_field(self, indicator):
        g = TorusGrid(2, 16)
        kern = build_periodized_kernel(indicator, g)
        c = np.array([0.3, -1.1])
        out = apply_K(indicator, CoefficientModel(), kern, PeriodicField.constant(g, c))
        G = assemble_G(indicator, CoefficientModel(), g).values[:, :, 0, 0]
        np.testing.assert_allclose(out.values, (G @ c)[:, None, None] * np.ones(g.shape), atol=1e-14)

    def test_norm_bound(self, cone, hetero, rng):
        g = TorusGrid(2, 16)
        kern = build_periodized_kernel(cone, g)
        a1 = kern.discrete.a1
        for _ in range(100):
            psi = PeriodicField(g, rng.standard_normal((2,) + g.shape), 1)
            assert apply_K(cone, hetero, kern, psi).norm() <= hetero.alpha2 * a1 * psi.norm()

    def test_direct_double_sum(self, indicator, rng):
        g = TorusGrid(2, 8)
        mu_vals = 1.0 + rng.random(g.shape)
        mu = Coefficient.from_config({"kind": "constant", "value": 1.0})
        op = cell_operator(indicator, CoefficientModel(mu=mu), g)
        op_rand = type(op)(g, op.weights, mu_vals, op.discrete)
        Kd = dense_K_direct(indicator, mu_vals, g)
        psi, phi = rng.standard_normal((2, 2) + g.shape)
        np.testing.assert_allclose(op_rand.K(psi).reshape(-1), Kd @ psi.reshape(-1), atol=1e-12)
        lhs = np.vdot(op_rand.K(psi), phi)
        rhs = np.vdot(psi, op_rand.K(phi))
        assert abs(lhs - rhs) <= 1e-10


class TestKminusG:
    @pytest.mark.parametrize("name", ["indicator", "gaussian", "cone"])
    def test_constants_in_kernel(self, name, request, hetero_lambda):
        g = TorusGrid(2, 16)
        out = apply_KminusG(request.getfixturevalue(name), hetero_lambda,
                            PeriodicField.constant(g, [2.0, -1.0]))
        assert out.max_abs() < 1e-13

    @pytest.mark.parametrize("name", ["indicator", "gaussian", "cone"])
    def test_property_suite(self, name, request, hetero):
        checks = operator_checks(request.getfixturevalue(name), hetero, TorusGrid(2, 16))
        assert checks.passed, checks.to_dict()

    def test_energy_identity(self, cone, hetero, rng):
        g = TorusGrid(2, 16)
        op = cell_operator(cone, hetero, g)
        for _ in range(5):
            psi = rng.standard_normal((2,) + g.shape)
            lhs = np.vdot(op.KminusG(psi), psi) * g.cell_volume
            rhs = op.dirichlet_form(psi)
            assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_spectrum_kernel_dimension(self, indicator):
        ev = kernel_spectrum(indicator, CoefficientModel(), TorusGrid(2, 8))
        assert np.all(np.abs(ev[:2]) < 1e-10)
        assert ev[2] > 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_self_adjoint_random_mu(seed, amplitude):
    rng = np.random.default_rng(seed)
    g = TorusGrid(2, 8)
    model = CoefficientModel(mu=Coefficient("cosine", base=1.0, amplitude=amplitude, frequencies=(1, 2)))
    op = cell_operator(KernelSpec("cone-restricted", 2, 0.4, aperture=0.5), model, g)
    psi, phi = rng.standard_normal((2, 2) + g.shape)
    assert abs(np.vdot(op.KminusG(psi), phi) - np.vdot(psi, op.KminusG(phi))) <= 1e-10
    assert np.vdot(op.KminusG(psi), psi) <= 1e-10


class TestScaled:
    def test_nodes_per_cell(self):
        g = TorusGrid(2, 64)
        assert nodes_per_cell(0.25, g) == 16
        with pytest.raises(ArgumentError, match="not an integer"):
            nodes_per_cell(0.3, g)
        with pytest.raises(ArgumentError, match="resolve"):
            nodes_per_cell(1 / 16, g)

    def test_constants(self, cone, hetero_lambda):
        g = TorusGrid(2, 32)
        out = apply_Leps(cone, hetero_lambda, 0.25, g, PeriodicField.constant(g, [1.0, 1.0]))
        assert out.max_abs() < 1e-10

    @pytest.mark.parametrize("k", [(1, 0), (2, 3), (0, 5)])
    def test_fourier_mode(self, indicator, k):
        g = TorusGrid(2, 16)
        eps = 0.5
        x = g.points()
        phase = 2 * np.pi * (k[0] * x[..., 0] + k[1] * x[..., 1])
        a = np.array([0.6, -0.8])
        u = PeriodicField(g, a[:, None, None] * np.cos(phase), 1)
        out = apply_Leps(indicator, CoefficientModel(), eps, g, u).values
        # symbol by direct summation over the lattice offsets of the eps-scaled kernel
        dk = kernel_masses(indicator, nodes_per_cell(eps, g))
        S = np.zeros((2, 2))
        for off, m, e in zip(dk.offsets, dk.masses, dk.unit):
            S += m * np.outer(e, e) * (math.cos(2 * np.pi * np.dot(k, off) / g.N) - 1.0)
        expected = (S @ a / eps**2)[:, None, None] * np.cos(phase)
        np.testing.assert_allclose(out, expected, atol=1e-11)

    def test_linearity(self, cone, hetero_lambda, rng):
        g = TorusGrid(2, 32)
        u, v = (PeriodicField(g, w, 1) for w in rng.standard_normal((2, 2) + g.shape))
        L = lambda w: apply_Leps(cone, hetero_lambda, 0.25, g, w).values  # noqa: E731
        np.testing.assert_allclose(L(u + v), L(u) + L(v), atol=1e-10)


class TestResolvent:
    def test_constant(self, cone, hetero_lambda):
        g = TorusGrid(2, 32)
        c = np.array([1.0, -0.5])
        r = resolvent_solve(cone, hetero_lambda, 5.0, 0.25, PeriodicField.constant(g, c))
        np.testing.assert_allclose(r.u.values, (c / 5.0)[:, None, None] * np.ones(g.shape), atol=1e-9)

    def test_zero(self, indicator):
        g = TorusGrid(2, 16)
        r = resolvent_solve(indicator, CoefficientModel(), 5.0, 0.5, PeriodicField.zeros(g, 1))
        assert r.iterations == 0 and r.u.max_abs() == 0.0

    @pytest.mark.parametrize("eps", [0.5, 0.25, 0.125])
    def test_uniform_bound(self, gaussian, hetero_lambda, rng, eps):
        g = TorusGrid(2, 64)
        f = PeriodicField(g, rng.standard_normal((2,) + g.shape), 1)
        r = resolvent_solve(gaussian, hetero_lambda, 5.0, eps, f)
        assert r.residual <= 1e-9
        assert r.norm_ratio <= r.bound

    def test_report_json(self, indicator):
        g = TorusGrid(2, 16)
        r = resolvent_solve(indicator, CoefficientModel(), 2.0, 0.5, PeriodicField.constant(g, [1.0, 0.0]))
        d = json.loads(r.to_json())
        assert set(d) == {"m", "eps", "iterations", "residual", "norm_ratio", "box_length"}

    def test_bad_m(self, indicator):
        with pytest.raises(ArgumentError):
            resolvent_solve(indicator, CoefficientModel(), 0.0, 0.5, PeriodicField.zeros(TorusGrid(2, 16), 1))
