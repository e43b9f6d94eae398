import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy import integrate, linalg

from .exceptions import (
    CompositionError,
    InvalidGeneratorError,
    NumericalConditioningError,
    SynthesisError,
)
from .integrators import rk4_step
from .systems import StateSpaceSystem, spectral_abscissa

logger = logging.getLogger(__name__)

# Condition number above which the stable-subspace basis is rejected
MAX_BASIS_CONDITION = 1e12
NEWTON_ITERATIONS = 5


def _residual_tolerance(Pi: np.ndarray) -> float:
    return 1e-8 * (1.0 + float(np.linalg.norm(Pi, "fro")))


def require_hurwitz(A: np.ndarray, what: str = "generator") -> float:
    """Return the spectral abscissa of `A`, raising if it is not negative."""
    abscissa = spectral_abscissa(A)
    if not abscissa < 0:
        raise InvalidGeneratorError(
            f"{what} is not Hurwitz (spectral abscissa {abscissa})",
            code="not_hurwitz",
            detail={"spectral_abscissa": abscissa},
        )
    return abscissa


def weight_matrix(R: Any, m: int) -> np.ndarray:
    """Validate a control weight: symmetric positive definite m x m."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape != (m, m):
        raise CompositionError(f"R must be {m}x{m}, got {R.shape}")
    if not np.allclose(R, R.T, rtol=1e-12, atol=1e-14):
        raise SynthesisError("R must be symmetric", code="R_not_symmetric")
    if np.min(linalg.eigvalsh(R)) <= 0:
        raise SynthesisError("R must be positive definite", code="R_not_pd")
    return R


def care_residual(sys: StateSpaceSystem, R: np.ndarray, Pi: np.ndarray) -> float:
    A, B, C = sys.A, sys.B, sys.C
    residual = A.T @ Pi + Pi @ A + C.T @ C - Pi @ B @ linalg.solve(R, B.T) @ Pi
    return float(np.linalg.norm(residual, "fro"))


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    Pi: np.ndarray
    K: np.ndarray
    A_m: np.ndarray
    residual_norm: float
    system: StateSpaceSystem
    R: np.ndarray

    @property
    def R_inv(self) -> np.ndarray:
        return np.asarray(linalg.inv(self.R))

    @property
    def closed_loop(self) -> StateSpaceSystem:
        """The closed-loop map G_m = C (sI - A_m)^-1 B."""
        return StateSpaceSystem(self.A_m, self.system.B, self.system.C)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "Pi": self.Pi.tolist(),
            "K": self.K.tolist(),
            "A_m": self.A_m.tolist(),
            "R": self.R.tolist(),
            "residual_norm": self.residual_norm,
            "spectral_abscissa": spectral_abscissa(self.A_m),
        }


def _newton_kleinman(sys: StateSpaceSystem, R: np.ndarray, Pi: np.ndarray) -> np.ndarray:
    A, B, C = sys.A, sys.B, sys.C
    for _ in range(NEWTON_ITERATIONS):
        K = linalg.solve(R, B.T @ Pi)
        A_k = A - B @ K
        Pi = linalg.solve_continuous_lyapunov(A_k.T, -(C.T @ C + K.T @ R @ K))
        Pi = (Pi + Pi.T) / 2
        if care_residual(sys, R, Pi) <= _residual_tolerance(Pi):
            break
    return np.asarray(Pi)


def solve_care(sys: StateSpaceSystem, R: Any) -> RiccatiSolution:
    """
    Stabilizing solution of A'Pi + Pi A + C'C - Pi B R^-1 B' Pi = 0.

    The stable invariant subspace of the Hamiltonian is taken from an
    ordered real Schur form. If the residual misses its tolerance a few
    Newton-Kleinman sweeps polish the result.

    Raises:
        SynthesisError: If R is not positive definite or the pair fails
            the stabilizability / detectability tests.
        NumericalConditioningError: If the stable subspace cannot be
            extracted reliably.
    """
    R = weight_matrix(R, sys.m)
    if not sys.is_stabilizable():
        raise SynthesisError("(A, B) is not stabilizable", code="not_stabilizable")
    if not sys.is_detectable():
        raise SynthesisError("(A, C) is not detectable", code="not_detectable")

    n = sys.n
    A, B, C = sys.A, sys.B, sys.C
    hamiltonian = np.block([[A, -B @ linalg.solve(R, B.T)], [-C.T @ C, -A.T]])
    try:
        _, U, sdim = linalg.schur(hamiltonian, output="real", sort="lhp")
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalConditioningError(
            "Schur reordering of the Hamiltonian failed", code="schur", detail={"reason": str(e)}
        ) from e
    if sdim != n:
        raise NumericalConditioningError(
            f"Hamiltonian has {sdim} stable eigenvalues, expected {n}",
            code="stable_dimension",
        )

    U11, U21 = U[:n, :n], U[n:, :n]
    condition = float(np.linalg.cond(U11))
    if not condition <= MAX_BASIS_CONDITION:
        raise NumericalConditioningError(
            f"stable subspace basis is ill-conditioned (cond {condition:.3e})",
            code="ill_conditioned",
            detail={"condition": condition},
        )
    Pi = linalg.solve(U11.T, U21.T).T
    Pi = (Pi + Pi.T) / 2

    residual = care_residual(sys, R, Pi)
    if residual > _residual_tolerance(Pi):
        logger.warning(f"CARE residual {residual:.3e} above tolerance, refining")
        Pi = _newton_kleinman(sys, R, Pi)
        residual = care_residual(sys, R, Pi)

    K = linalg.solve(R, B.T @ Pi)
    A_m = A - B @ K
    abscissa = spectral_abscissa(A_m)
    if not abscissa < 0:
        raise NumericalConditioningError(
            f"closed loop is not Hurwitz (abscissa {abscissa})", code="unstable_closed_loop"
        )
    logger.debug(f"CARE solved: residual={residual:.3e}, abscissa(A_m)={abscissa:.6g}")
    return RiccatiSolution(Pi=Pi, K=K, A_m=A_m, residual_norm=residual, system=sys, R=R)


def closed_loop_generator(sol: RiccatiSolution) -> np.ndarray:
    B = sol.system.B
    return np.asarray(sol.system.A - B @ linalg.solve(sol.R, B.T) @ sol.Pi)


@dataclass(frozen=True, eq=False)
class GramianResult:
    W: np.ndarray
    residual_norm: float

    def to_dict(self) -> Dict[str, Any]:
        return {"W": self.W.tolist(), "residual_norm": self.residual_norm}


def observability_gramian(A_m: np.ndarray, C: np.ndarray) -> GramianResult:
    """Solve A_m'W + W A_m + C'C = 0 (Bartels-Stewart)."""
    A_m = np.atleast_2d(np.asarray(A_m, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    require_hurwitz(A_m, "A_m")
    W = linalg.solve_continuous_lyapunov(A_m.T, -C.T @ C)
    W = (W + W.T) / 2
    residual = float(np.linalg.norm(A_m.T @ W + W @ A_m + C.T @ C, "fro"))
    return GramianResult(W=W, residual_norm=residual)


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    P: np.ndarray
    lambda_P: float

    def to_dict(self) -> Dict[str, Any]:
        return {"P": self.P.tolist(), "lambda_P": self.lambda_P}


def lyapunov_certificate(A_m: np.ndarray) -> LyapunovCertificate:
    """P with A_m'P + P A_m = -I and lambda_P = 1 / lambda_max(P)."""
    A_m = np.atleast_2d(np.asarray(A_m, dtype=float))
    require_hurwitz(A_m, "A_m")
    P = linalg.solve_continuous_lyapunov(A_m.T, -np.eye(A_m.shape[0]))
    P = (P + P.T) / 2
    return LyapunovCertificate(P=P, lambda_P=1.0 / float(np.max(linalg.eigvalsh(P))))


@dataclass(frozen=True)
class DecayCertificate:
    """|exp(A_m t)| <= M exp(-beta t)."""

    M: float
    beta: float

    def bound(self, t: float) -> float:
        return self.M * math.exp(-self.beta * t)

    def to_dict(self) -> Dict[str, float]:
        return {"M": self.M, "beta": self.beta}


def verification_grid() -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-3, 2, 400)])


def decay_certificate(A_m: np.ndarray) -> DecayCertificate:
    A_m = np.atleast_2d(np.asarray(A_m, dtype=float))
    abscissa = require_hurwitz(A_m, "A_m")
    beta = 0.95 * abs(abscissa)
    grid = verification_grid()
    # |exp(A_m t)| exp(beta t) == |exp((A_m + beta I) t)|, no overflow
    shifted = A_m + beta * np.eye(A_m.shape[0])
    growth = np.linalg.norm(linalg.expm(grid[:, None, None] * shifted), ord=2, axis=(1, 2))
    M = 1.05 * max(1.0, float(np.max(growth)))
    logger.debug(f"Decay certificate: M={M:.6g}, beta={beta:.6g}")
    return DecayCertificate(M=M, beta=beta)


def _truncation_time(cert: DecayCertificate, floor: float = 1e-12) -> float:
    return math.log(cert.M / floor) / cert.beta


def convolution_operator_norm(A_m: np.ndarray) -> float:
    """Estimate of the L-inf induced norm of v -> int exp(A_m (t-s)) v(s) ds."""
    A_m = np.atleast_2d(np.asarray(A_m, dtype=float))
    cert = decay_certificate(A_m)
    t_star = _truncation_time(cert)
    value, _ = integrate.quad(
        lambda t: float(np.linalg.norm(linalg.expm(A_m * t), 2)),
        0.0,
        t_star,
        limit=500,
        epsabs=1e-11,
        epsrel=1e-10,
    )
    tail = cert.M * math.exp(-cert.beta * t_star) / cert.beta
    return float(value + tail)


def semigroup_integral(A_m: np.ndarray) -> np.ndarray:
    """int_0^inf exp(A_m t) dt by vector quadrature, i.e. -A_m^-1."""
    A_m = np.atleast_2d(np.asarray(A_m, dtype=float))
    cert = decay_certificate(A_m)
    value, _ = integrate.quad_vec(
        lambda t: linalg.expm(A_m * t), 0.0, _truncation_time(cert), epsabs=1e-13, epsrel=1e-11
    )
    return np.asarray(value)


def differential_riccati_limit(
    sys: StateSpaceSystem,
    R: Any,
    horizon: Optional[float] = None,
    step: Optional[float] = None,
) -> np.ndarray:
    """
    Integrate the differential Riccati equation backward from Pi(T) = 0.

    Defaults follow the algebraic solution's decay rate: horizon 50/beta,
    step 1e-3/beta.
    """
    R = weight_matrix(R, sys.m)
    if horizon is None or step is None:
        beta = decay_certificate(solve_care(sys, R).A_m).beta
        horizon = 50.0 / beta if horizon is None else horizon
        step = 1e-3 / beta if step is None else step

    A, B, C = sys.A, sys.B, sys.C
    S = B @ linalg.solve(R, B.T)
    Q = C.T @ C
    n = sys.n

    def reversed_time(_: float, x: np.ndarray) -> np.ndarray:
        Pi = x.reshape(n, n)
        return (A.T @ Pi + Pi @ A + Q - Pi @ S @ Pi).reshape(-1)

    steps = max(1, int(math.ceil(horizon / step)))
    h = horizon / steps
    x = np.zeros(n * n)
    for k in range(steps):
        x = rk4_step(reversed_time, k * h, x, h)
    Pi = x.reshape(n, n)
    return np.asarray((Pi + Pi.T) / 2)
