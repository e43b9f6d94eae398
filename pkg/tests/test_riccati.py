import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, linalg

from sdac_toolkit.exceptions import CompositionError, InvalidGeneratorError, SynthesisError
from sdac_toolkit.riccati import (
    care_residual,
    closed_loop_generator,
    convolution_operator_norm,
    decay_certificate,
    differential_riccati_limit,
    lyapunov_certificate,
    observability_gramian,
    semigroup_integral,
    solve_care,
    weight_matrix,
)
from sdac_toolkit.systems import StateSpaceSystem, build_heat_plant, spectral_abscissa

from .test_systems import create_scalar_system

SQRT2 = math.sqrt(2.0)


def create_scalar_solution():
    return solve_care(create_scalar_system(), 1.0)


def random_stabilizable_system(rng, n):
    m = int(rng.integers(1, 4))
    p = int(rng.integers(1, 4))
    return StateSpaceSystem(
        rng.standard_normal((n, n)), rng.standard_normal((n, m)), rng.standard_normal((p, n))
    )


class TestSolveCare:
    def test_scalar(self):
        """Test Pi = 1 + sqrt(2) and A_m = -sqrt(2) for A = B = C = R = 1."""
        sol = create_scalar_solution()

        assert sol.Pi[0, 0] == pytest.approx(1 + SQRT2, abs=1e-10)
        assert sol.K[0, 0] == pytest.approx(1 + SQRT2, abs=1e-10)
        assert sol.A_m[0, 0] == pytest.approx(-SQRT2, abs=1e-10)
        assert sol.residual_norm <= 1e-8 * (1 + abs(sol.Pi[0, 0]))

    def test_random_systems(self):
        """Test residual and closed-loop stability on 50 random systems up to n = 20."""
        rng = np.random.default_rng(2024)

        for _ in range(50):
            sys = random_stabilizable_system(rng, int(rng.integers(1, 21)))
            sol = solve_care(sys, np.eye(sys.m))

            assert care_residual(sys, sol.R, sol.Pi) <= 1e-8 * (1 + np.linalg.norm(sol.Pi, "fro"))
            assert spectral_abscissa(sol.A_m) < 0

    def test_invariant_under_orthogonal_change_of_coordinates(self):
        """Test that solving in coordinates v = T w and mapping back gives the same Pi."""
        rng = np.random.default_rng(17)

        for _ in range(10):
            sys = random_stabilizable_system(rng, int(rng.integers(1, 13)))
            T, _ = linalg.qr(rng.standard_normal((sys.n, sys.n)))
            R = np.eye(sys.m)

            Pi = solve_care(sys, R).Pi
            moved = solve_care(sys.transformed(T), R).Pi

            assert np.linalg.norm(T @ moved @ T.T - Pi) <= 1e-6 * np.linalg.norm(Pi)

    def test_pi_is_symmetric_positive_semidefinite(self):
        """Test the structure of the stabilizing solution on the heat plant."""
        sol = solve_care(build_heat_plant(5, 1.0, 0.1), 1.0)

        np.testing.assert_allclose(sol.Pi, sol.Pi.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(sol.Pi)) >= -1e-12

    def test_not_stabilizable(self):
        """Test that an unreachable unstable mode is reported."""
        sys = StateSpaceSystem(np.diag([1.0, -1.0]), [[0.0], [1.0]], [[1.0, 1.0]])

        with pytest.raises(SynthesisError) as excinfo:
            solve_care(sys, 1.0)

        assert "not stabilizable" in str(excinfo.value)
        assert excinfo.value.code == "not_stabilizable"

    def test_not_detectable(self):
        """Test that an unstable mode hidden from the output is reported."""
        sys = StateSpaceSystem(np.diag([1.0, -1.0]), [[1.0], [1.0]], [[0.0, 1.0]])

        with pytest.raises(SynthesisError) as excinfo:
            solve_care(sys, 1.0)

        assert "not detectable" in str(excinfo.value)

    def test_closed_loop_generator(self):
        """Test A_m = A - B R^-1 B' Pi, and A_m = A for a zero Riccati solution."""
        sol = create_scalar_solution()

        assert closed_loop_generator(sol)[0, 0] == pytest.approx(-SQRT2)
        assert closed_loop_generator(replace(sol, Pi=np.zeros((1, 1))))[0, 0] == 1.0

    def test_indefinite_weight(self):
        """Test that R must be positive definite."""
        with pytest.raises(SynthesisError) as excinfo:
            solve_care(create_scalar_system(), -1.0)

        assert "positive definite" in str(excinfo.value)

    def test_weight_shape(self):
        """Test that R must be m x m."""
        with pytest.raises(CompositionError) as excinfo:
            solve_care(create_scalar_system(), np.eye(2))

        assert "R must be 1x1" in str(excinfo.value)

    def test_asymmetric_weight(self):
        """Test that an asymmetric R is rejected."""
        with pytest.raises(SynthesisError) as excinfo:
            weight_matrix([[1.0, 0.5], [0.0, 1.0]], 2)

        assert "symmetric" in str(excinfo.value)

    def test_closed_loop_system(self):
        """Test that the closed loop keeps B and C and uses A_m."""
        sol = create_scalar_solution()

        G_m = sol.closed_loop

        assert G_m.A[0, 0] == pytest.approx(-SQRT2)
        assert G_m.B[0, 0] == 1.0
        assert G_m.C[0, 0] == 1.0


class TestObservabilityGramian:
    def test_matches_output_energy_quadrature(self):
        """Test v0' W_o v0 = int |C exp(A_m t) v0|^2 dt for 10 random v0 on the heat plant."""
        sol = solve_care(build_heat_plant(5, 1.0, 0.1), 1.0)
        C = sol.system.C
        W = observability_gramian(sol.A_m, C).W
        horizon = 50.0 / decay_certificate(sol.A_m).beta
        rng = np.random.default_rng(5)

        for _ in range(10):
            v0 = rng.standard_normal(5)
            energy, _ = integrate.quad(
                lambda t: float(np.sum((C @ linalg.expm(sol.A_m * t) @ v0) ** 2)),
                0.0,
                horizon,
                epsabs=0.0,
                epsrel=1e-10,
                limit=200,
            )

            assert v0 @ W @ v0 == pytest.approx(energy, rel=1e-6)

    def test_scalar(self):
        """Test W_o = 1 / (2 sqrt(2)) for the scalar closed loop."""
        sol = create_scalar_solution()

        gramian = observability_gramian(sol.A_m, sol.system.C)

        assert gramian.W[0, 0] == pytest.approx(1 / (2 * SQRT2), abs=1e-10)
        assert gramian.residual_norm < 1e-12

    def test_not_hurwitz(self):
        """Test that the Gramian needs a stable generator."""
        with pytest.raises(InvalidGeneratorError) as excinfo:
            observability_gramian(np.array([[0.5]]), np.array([[1.0]]))

        assert "not Hurwitz" in str(excinfo.value)


class TestCertificates:
    def test_lyapunov_scalar(self):
        """Test P = 1 / (2 sqrt(2)) and lambda_P = 2 sqrt(2)."""
        cert = lyapunov_certificate(np.array([[-SQRT2]]))

        assert cert.P[0, 0] == pytest.approx(1 / (2 * SQRT2))
        assert cert.lambda_P == pytest.approx(2 * SQRT2)

    def test_decay_bound_holds_for_non_normal_generator(self):
        """Test |exp(A_m t)| <= M exp(-beta t) on a transient-growth example."""
        A_m = np.array([[-1.0, 10.0], [0.0, -2.0]])

        cert = decay_certificate(A_m)

        assert cert.beta == pytest.approx(0.95)
        for t in np.linspace(0.0, 30.0, 301):
            assert np.linalg.norm(linalg.expm(A_m * t), 2) <= cert.bound(t) * (1 + 1e-9)

    def test_convolution_norm_scalar(self):
        """Test int_0^inf exp(-sqrt(2) t) dt = 1 / sqrt(2)."""
        assert convolution_operator_norm(np.array([[-SQRT2]])) == pytest.approx(1 / SQRT2, rel=1e-8)

    def test_semigroup_integral(self):
        """Test that the integral of the semigroup is -A_m^-1."""
        A_m = np.array([[-1.0, 3.0], [-1.0, -2.0]])

        np.testing.assert_allclose(semigroup_integral(A_m), -np.linalg.inv(A_m), atol=1e-8)


class TestDifferentialRiccati:
    def test_scalar_limit(self):
        """Test that the backward differential equation settles on the algebraic solution."""
        Pi = differential_riccati_limit(create_scalar_system(), 1.0)

        assert Pi[0, 0] == pytest.approx(1 + SQRT2, rel=1e-6)

    def test_heat_plant_limit(self):
        """Test the steady-state substitution on the heat plant."""
        sys = build_heat_plant(5, 1.0, 0.1)
        sol = solve_care(sys, 1.0)

        Pi = differential_riccati_limit(sys, 1.0)

        assert np.linalg.norm(Pi - sol.Pi) <= 1e-6 * np.linalg.norm(sol.Pi)

    def test_unstable_plant_limit(self):
        """Test the substitution on an open-loop unstable second-order plant."""
        sys = StateSpaceSystem([[0.0, 1.0], [2.0, -1.0]], [[0.0], [1.0]], [[1.0, 0.0]])
        sol = solve_care(sys, 1.0)

        Pi = differential_riccati_limit(sys, 1.0)

        assert np.linalg.norm(Pi - sol.Pi) <= 1e-6 * np.linalg.norm(sol.Pi)

    def test_random_systems_limit(self):
        """Test the steady-state substitution on 10 random systems of moderate stiffness."""
        rng = np.random.default_rng(31)
        checked = 0
        while checked < 10:
            sys = random_stabilizable_system(rng, int(rng.integers(1, 7)))
            sol = solve_care(sys, np.eye(sys.m))
            fastest = float(np.max(np.abs(np.concatenate([np.linalg.eigvals(sol.A_m), np.linalg.eigvals(sys.A)]))))
            if fastest > 200.0 * decay_certificate(sol.A_m).beta:
                continue

            Pi = differential_riccati_limit(sys, np.eye(sys.m))

            assert np.linalg.norm(Pi - sol.Pi) <= 1e-6 * np.linalg.norm(sol.Pi)
            checked += 1
