import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import COS1, RCOS1
from perihom.effective import (EffectiveTensor, certify_elasticity, contract_D2, effective_tensor,
                               harmonic_mean_factor, lame_closed_form, lame_operator_apply,
                               legendre_hadamard_min, mandel_matrix, positivity_lower_bound,
                               symmetrize, symmetry_violation, voigt_matrix)
from perihom.errors import ArgumentError
from perihom.model import Coefficient, CoefficientModel
from perihom.torus import PeriodicField, TorusGrid, spectral_hessian


def random_tensor(rng, d, sym=True):
    C = rng.standard_normal((d,) * 4)
    return symmetrize(C) if sym else C


class TestLame:
    def test_entries_2d(self):
        C = lame_closed_form(1.0, 2)
        assert C[0, 0, 0, 0] == pytest.approx(3 / 16)
        assert C[0, 0, 1, 1] == pytest.approx(1 / 16)
        assert C[0, 1, 0, 1] == pytest.approx(1 / 16)
        assert C[0, 0, 0, 1] == 0.0

    def test_entries_3d(self):
        C = lame_closed_form(2.0, 3)
        assert C[0, 1, 0, 1] == pytest.approx(1 / 15)
        assert C[2, 2, 2, 2] == pytest.approx(3 / 15)
        assert symmetry_violation(C) == 0.0

    def test_bad_arguments(self):
        with pytest.raises(ArgumentError):
            lame_closed_form(1.0, 4)
        with pytest.raises(ArgumentError):
            lame_closed_form(0.0, 2)

    def test_energy_form(self, rng):
        mu0 = 1 / 16
        C = lame_closed_form(1.0, 2)
        for _ in range(10):
            W = rng.standard_normal((2, 2))
            W = W + W.T
            val = np.einsum("ij,ijkl,kl->", W, C, W)
            assert val == pytest.approx(mu0 * (np.trace(W) ** 2 + 2 * np.sum(W * W)), rel=1e-13)

    @pytest.mark.parametrize("d", [2, 3])
    def test_operator_matches_generic(self, d, rng):
        g = TorusGrid(d, 16 if d == 2 else 8)
        x = 2 * np.pi * g.points()
        comps = [np.sin(x[..., i]) * np.cos(x[..., (i + 1) % d]) + 0.3 * np.cos(2 * x[..., i])
                 for i in range(d)]
        u = PeriodicField(g, np.stack(comps), 1)
        mu0 = 1.0 / (2 * d * (d + 2))
        generic = contract_D2(lame_closed_form(1.0, d), spectral_hessian(u).values)
        np.testing.assert_allclose(lame_operator_apply(mu0, u).values, generic,
                                   atol=1e-10 * np.abs(generic).max())

    def test_operator_on_mode(self):
        # u = (sin 2 pi x1, 0): Laplace u = grad div u = -(2 pi)^2 u
        g = TorusGrid(2, 16)
        x = g.points()
        u = PeriodicField(g, np.stack([np.sin(2 * np.pi * x[..., 0]), np.zeros(g.shape)]), 1)
        out = lame_operator_apply(0.5, u).values
        np.testing.assert_allclose(out, -1.5 * (2 * np.pi) ** 2 * u.values, atol=1e-10)


class TestMatrices:
    def test_mandel_quadratic_form(self, rng):
        C = random_tensor(rng, 3)
        W = rng.standard_normal((3, 3))
        W = W + W.T
        w = np.array([W[0, 0], W[1, 1], W[2, 2], *(np.sqrt(2) * W[i, j] for i, j in [(0, 1), (0, 2), (1, 2)])])
        assert w @ mandel_matrix(C) @ w == pytest.approx(np.einsum("ij,ijkl,kl->", W, C, W), rel=1e-12)

    def test_voigt(self):
        V = voigt_matrix(lame_closed_form(1.0, 2))
        np.testing.assert_allclose(V, np.array([[3, 1, 0], [1, 3, 0], [0, 0, 1]]) / 16)
        assert voigt_matrix(lame_closed_form(1.0, 3)).shape == (6, 6)

    def test_symmetrize(self, rng):
        C = random_tensor(rng, 2, sym=False)
        assert symmetry_violation(C) > 0.1
        S = symmetrize(C)
        assert symmetry_violation(S) < 1e-15
        np.testing.assert_allclose(symmetrize(S), S, atol=1e-15)


class TestCertificates:
    def test_lame(self):
        C = lame_closed_form(1.0, 2)
        cert = certify_elasticity(C)
        assert cert.passed
        assert cert.lh_min == pytest.approx(1 / 16, abs=1e-10)
        assert cert.gamma1 == pytest.approx(2 / 16)
        assert cert.gamma2 == pytest.approx(4 / 16)
        assert cert.sampled_gamma1 >= cert.gamma1 - 1e-14

    def test_lh_witness_orthogonal(self):
        val, xi, eta = legendre_hadamard_min(lame_closed_form(1.0, 2))
        assert abs(xi @ eta) < 1e-5
        assert val == pytest.approx(1 / 16, abs=1e-10)

    def test_lh_3d(self):
        val, _, _ = legendre_hadamard_min(lame_closed_form(2.0, 3))
        assert val == pytest.approx(1 / 15, abs=1e-8)

    def test_injected_failure(self):
        C = lame_closed_form(1.0, 2)
        C[0, 0, 0, 0] = -1.0
        cert = certify_elasticity(C)
        assert not cert.passed
        assert cert.lh_min <= -1.0 + 1e-12
        assert cert.gamma1 < 0

    def test_asymmetry_fails(self):
        C = lame_closed_form(1.0, 2)
        C[0, 1, 0, 0] += 1e-3
        cert = certify_elasticity(C)
        assert cert.symmetry_max_violation == pytest.approx(1e-3)
        assert not cert.passed

    def test_lower_bound(self):
        C = lame_closed_form(1.0, 2)
        assert certify_elasticity(C, lower_bound=0.1).passed
        assert not certify_elasticity(C, lower_bound=0.2).passed

    def test_positivity_bound_isotropic(self):
        # with A = 0 and mu = 1 the bound equals alpha1 * gamma1 of the quartic tensor
        Q = lame_closed_form(1.0, 2)
        assert positivity_lower_bound(1.0, Q) == pytest.approx(2 / 16)
        assert positivity_lower_bound(0.5, Q) == pytest.approx(1 / 16)

    def test_to_dict(self):
        d = certify_elasticity(lame_closed_form(1.0, 2)).to_dict()
        json.dumps(d)
        assert d["passed"] is True

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 10))
    def test_lh_below_gamma(self, s):
        C = s * lame_closed_form(1.0, 3)
        cert = certify_elasticity(C, samples=50)
        assert cert.lh_min >= 0.5 * cert.gamma1 - 1e-12
        assert cert.lh_min <= cert.gamma2 + 1e-12


class TestEffectiveField:
    C = lame_closed_form(1.0, 2)

    def test_unit_coefficients(self):
        np.testing.assert_array_equal(effective_tensor(CoefficientModel(), self.C, [0.3, 0.7]), self.C)

    def test_harmonic_mean(self):
        model = CoefficientModel(lambda1=RCOS1)
        np.testing.assert_allclose(effective_tensor(model, self.C, [0.1, 0.2]), self.C / 2, rtol=1e-12)
        # arithmetic mean of 2 + cos is 2 but the harmonic mean is sqrt(3)
        model = CoefficientModel(lambda1=COS1)
        assert harmonic_mean_factor(model, np.zeros((1, 2)))[0] == pytest.approx(np.sqrt(3), rel=1e-10)

    def test_lambda0_scaling(self):
        lam0 = Coefficient("sine", base=1.5, amplitude=0.5, frequencies=(1, 0))
        model = CoefficientModel(lambda0=lam0, lambda1=RCOS1)
        eff = EffectiveTensor(self.C, model)
        for x in ([0.0, 0.0], [0.25, 0.4], [0.75, 0.1]):
            expected = (1.5 + 0.5 * np.sin(2 * np.pi * x[0])) / 2
            np.testing.assert_allclose(eff.at(x), expected * self.C, rtol=1e-12)

    def test_field_shape(self):
        g = TorusGrid(2, 8)
        F = EffectiveTensor(self.C, CoefficientModel(lambda1=RCOS1)).field(g)
        assert F.shape == (2, 2, 2, 2, 8, 8)
        np.testing.assert_allclose(F[..., 3, 5], self.C / 2, rtol=1e-12)

    def test_certificates_at_points(self):
        eff = EffectiveTensor(self.C, CoefficientModel(lambda1=RCOS1))
        certs = eff.certificates([[0.0, 0.0], [0.5, 0.5]], lower_bound=0.05)
        assert all(c.passed for c in certs)
        assert certs[0].gamma1 == pytest.approx(1 / 16)

    def test_json(self):
        eff = EffectiveTensor(self.C, CoefficientModel())
        d = json.loads(eff.to_json())
        np.testing.assert_array_equal(np.reshape(d["Ctilde"], (2,) * 4), self.C)
