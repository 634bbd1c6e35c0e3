import numpy as np
import pytest

from mfglab.measure import GridSpec, random_measure, uniform_measure
from mfglab.model import (
    HamiltonianSpec,
    audit_convexity,
    audit_semiconcavity_generator,
    audit_strong_monotonicity,
    constant_coupling,
    convolution_coupling,
    derivative_consistency,
    m_independent_coupling,
    quadratic_hamiltonian,
    zoo_monotone,
    zoo_nonmonotone,
)


class TestHamiltonian:
    def test_derivatives_match_finite_differences(self):
        h = quadratic_hamiltonian(drift_amp=0.4, potential_amp=0.3)
        err = derivative_consistency(h, points=1000, step=1e-4, seed=1)
        assert err["d_p"] <= 1e-6
        assert err["d_x"] <= 1e-6

    def test_shift_is_exact_translation(self):
        h = quadratic_hamiltonian(drift_amp=0.4, potential_amp=0.3)
        z = 0.37
        shifted = h.shift(z)
        p = np.linspace(-2, 2, 64)
        x = np.linspace(0, 1, 64, endpoint=False)
        assert np.array_equal(shifted.value(p, x), h.value(p, x + z))
        assert np.array_equal(shifted.d_p(p, x), h.d_p(p, x + z))

    def test_shift_zero_is_identity(self):
        h = quadratic_hamiltonian(0.2, 0.1)
        assert h.shift(0.0) is h

    def test_convexity_audit_pass_and_cr(self):
        h = quadratic_hamiltonian(0.0, 0.0)
        rep = audit_convexity(h, samples=200, radius=5.0)
        assert rep.passed and rep.margin >= 0.0
        assert rep.details["C_R"] >= 5.0  # |D_pH| alone reaches R for p^2/2

    def test_convexity_audit_catches_concave(self):
        bad = HamiltonianSpec(
            value=lambda p, x: -(p**2),
            d_p=lambda p, x: -2 * p,
            d_x=lambda p, x: 0.0 * p,
            d_pp=lambda p, x: -2.0 + 0.0 * p,
            d_px=lambda p, x: 0.0 * p,
            argmin_p=lambda x: 0.0 * x,
            label="concave",
        )
        rep = audit_convexity(bad, samples=100, radius=2.0)
        assert not rep.passed
        assert rep.witness is not None
        # witness reproduces the violation
        w = rep.witness
        lhs = w["t"] * bad.value(np.array(w["p"]), np.array(w["x"])) + (1 - w["t"]) * bad.value(
            np.array(w["q"]), np.array(w["x"])
        )
        rhs = bad.value(np.array(w["t"] * w["p"] + (1 - w["t"]) * w["q"]), np.array(w["x"]))
        assert lhs - rhs < 0

    def test_sinusoidal_drift_passes_on_dense_sweep(self):
        h = quadratic_hamiltonian(drift_amp=1.0, potential_amp=0.0)
        # dense grid sweep as the oracle: quadratic-in-p + linear drift stays convex
        p = np.linspace(-5, 5, 101)
        x = np.linspace(0, 1, 64, endpoint=False)
        pp, xx = np.meshgrid(p, x, indexing="ij")
        secant = 0.5 * h.value(pp, xx) + 0.5 * h.value(-pp, xx) - h.value(0 * pp, xx)
        assert secant.min() >= -1e-12
        rep = audit_convexity(h, samples=300, radius=5.0)
        assert rep.passed

    def test_non_finite_rejected(self):
        nan_h = HamiltonianSpec(
            value=lambda p, x: np.full_like(np.asarray(p, dtype=float), np.nan),
            d_p=lambda p, x: p,
            d_x=lambda p, x: p,
            d_pp=lambda p, x: p,
            d_px=lambda p, x: p,
            argmin_p=lambda x: x,
        )
        with pytest.raises(ValueError, match="non-finite"):
            audit_convexity(nan_h, samples=10, radius=1.0)

    def test_semiconcavity_generator_reports_constant(self):
        h = quadratic_hamiltonian(0.3, 0.2)
        rep = audit_semiconcavity_generator(h, lam=1.0, samples=500, seed=2)
        assert rep.passed
        assert np.isfinite(rep.details["C0"])


class TestCoupling:
    def test_identical_measures_give_zero_pairing(self):
        g = GridSpec(64)
        f = convolution_coupling(g)
        m = random_measure(g, seed=0, roughness=0.7)
        delta = f.values_on_grid(m.masses) - f.values_on_grid(m.masses)
        assert np.all(delta == 0.0)

    def test_monotone_kernel_passes_audit(self):
        g = GridSpec(64)
        f = convolution_coupling(g, width=0.08, scale=0.6)
        rep = audit_strong_monotonicity(f, pairs=30, seed=3)
        assert rep.passed
        assert rep.details["sm2_margin"] > 0.0

    def test_sign_flip_fails_with_witness(self):
        g = GridSpec(64)
        f = convolution_coupling(g, width=0.08, scale=0.6, sign=-1.0)
        rep = audit_strong_monotonicity(f, pairs=30, seed=3)
        assert not rep.passed
        m1, m2 = rep.witness
        delta_f = f.values_on_grid(m1.masses) - f.values_on_grid(m2.masses)
        assert float(delta_f @ (m1.masses - m2.masses)) < 0.0

    def test_parseval_identity_for_kernel(self):
        # pairing computed by direct convolution equals the spectral sum
        g = GridSpec(64)
        f = convolution_coupling(g, width=0.1, scale=0.5)
        m1 = random_measure(g, seed=5, roughness=0.9)
        m2 = random_measure(g, seed=6, roughness=0.9)
        dmu = m1.masses - m2.masses
        lhs = float((f.values_on_grid(m1.masses) - f.values_on_grid(m2.masses)) @ dmu)
        kernel_row = f.values_on_grid(np.eye(g.n_cells)[0])  # psi(c_i - c_0)
        spec = np.fft.fft(kernel_row)
        dmu_hat = np.fft.fft(dmu)
        rhs = float(np.real(np.sum(spec * np.abs(dmu_hat) ** 2)) / g.n_cells)
        assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_alpha_f_is_sharp_enough(self):
        # the inequality must hold with the computed constant on adversarial
        # single-mode perturbations, which saturate the spectral bound
        g = GridSpec(64)
        f = convolution_coupling(g, width=0.1, scale=0.5)
        base = uniform_measure(g).masses
        for k in (1, 2, 5, 11):
            bump = 0.2 * np.cos(2 * np.pi * k * g.centers) * g.dx
            m1, m2 = base + bump, base - bump
            delta_f = f.values_on_grid(m1) - f.values_on_grid(m2)
            lhs = float(delta_f @ (m1 - m2))
            rhs = f.alpha_f * float(g.dx * np.sum(delta_f**2))
            assert lhs >= rhs - 1e-12

    def test_bounds_and_gradient(self):
        g = GridSpec(64)
        f = convolution_coupling(g, width=0.08, scale=0.6)
        m = random_measure(g, seed=7, roughness=0.9)
        x = np.linspace(0, 1, 321)
        assert np.max(np.abs(f.eval(x, m))) <= f.c0 + 1e-12
        assert np.max(np.abs(f.d_x(x, m))) <= f.c0 + 1e-12
        step = 1e-5
        fd = (f.eval(x + step, m) - f.eval(x - step, m)) / (2 * step)
        assert np.max(np.abs(fd - f.d_x(x, m))) <= 1e-5

    def test_constant_and_m_independent(self):
        g = GridSpec(32)
        c = constant_coupling(g, 0.7)
        m = random_measure(g, seed=8, roughness=0.5)
        assert np.all(c.values_on_grid(m.masses) == 0.7)
        rep = audit_strong_monotonicity(c, pairs=5, seed=0)
        assert rep.passed and rep.margin == 0.0
        f0 = m_independent_coupling(g, lambda x: np.sin(2 * np.pi * x), lambda x: 2 * np.pi * np.cos(2 * np.pi * x))
        shifted = f0.shift(0.25)
        assert np.allclose(
            shifted.values_on_grid(m.masses), np.sin(2 * np.pi * (g.centers + 0.25))
        )

    def test_zoo_round_trip_on_finer_grid(self):
        g, g2 = GridSpec(32), GridSpec(64)
        model = zoo_monotone(g)
        model2 = model.on_grid(g2)
        assert model2.grid == g2
        assert model2.coupling.alpha_f > 0

    def test_nonmonotone_zoo_is_nonmonotone(self):
        g = GridSpec(64)
        rep = audit_strong_monotonicity(zoo_nonmonotone(g).coupling, pairs=20, seed=1)
        assert not rep.passed
