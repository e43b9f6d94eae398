import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy import linalg, optimize

from .exceptions import (
    CompositionError,
    ConstraintInfeasibleError,
    DegeneracyError,
    DegenerateRealizationError,
    NumericalConditioningError,
)
from .riccati import require_hurwitz, weight_matrix
from .systems import StateSpaceSystem, spectral_abscissa

logger = logging.getLogger(__name__)

# Hankel singular values below this fraction of the largest one are dropped
HSV_TRUNCATION = 1e-10
GRID_POINTS = 400
FOLD_FACTOR = 1e3


@dataclass(frozen=True, eq=False)
class BalancedRealization:
    A_b: np.ndarray
    B_b: np.ndarray
    C_b: np.ndarray
    hsv: np.ndarray

    @property
    def hankel_norm(self) -> float:
        return float(self.hsv[0])


def _gramian_factor(W: np.ndarray) -> np.ndarray:
    # W = L L' from a symmetric eigendecomposition; round-off negatives clipped
    eigenvalues, vectors = linalg.eigh((W + W.T) / 2)
    return np.asarray(vectors * np.sqrt(np.clip(eigenvalues, 0.0, None)))


def balance(sys: StateSpaceSystem) -> BalancedRealization:
    """
    Square-root balancing of a stable realization.

    States whose Hankel singular value falls below 1e-10 sigma_1 are
    truncated, which leaves a minimal balanced realization.

    Raises:
        InvalidGeneratorError: If A is not Hurwitz.
        DegenerateRealizationError: If no state survives truncation.
    """
    require_hurwitz(sys.A, "A")
    Wc = linalg.solve_continuous_lyapunov(sys.A, -sys.B @ sys.B.T)
    Wo = linalg.solve_continuous_lyapunov(sys.A.T, -sys.C.T @ sys.C)
    Lc = _gramian_factor(Wc)
    Lo = _gramian_factor(Wo)

    U, s, Vh = linalg.svd(Lo.T @ Lc)
    if s.size == 0 or not s[0] > 0.0:
        raise DegenerateRealizationError(
            "every state is uncontrollable or unobservable", code="zero_hankel_norm"
        )
    keep = int(np.sum(s > HSV_TRUNCATION * s[0]))
    if keep < s.size:
        logger.debug(f"Balancing truncates {s.size - keep} of {s.size} states")

    scale = 1.0 / np.sqrt(s[:keep])
    T = Lc @ Vh[:keep].T * scale
    T_inv = (scale[:, None] * U[:, :keep].T) @ Lo.T
    return BalancedRealization(
        A_b=T_inv @ sys.A @ T,
        B_b=T_inv @ sys.B,
        C_b=sys.C @ T,
        hsv=s[:keep].copy(),
    )


def adjoint_system(G_m: StateSpaceSystem) -> StateSpaceSystem:
    """Realization of G_m(-s)' (anti-stable when G_m is stable)."""
    return StateSpaceSystem(-G_m.A.T, G_m.C.T, -G_m.B.T)


def frequency_response(
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    D: Optional[np.ndarray],
    omega: float,
) -> np.ndarray:
    """C (j omega I - A)^-1 B + D; omega = inf gives D."""
    feedthrough = np.zeros((C.shape[0], B.shape[1])) if D is None else D
    if math.isinf(omega) or A.shape[0] == 0:
        return feedthrough.astype(complex)
    n = A.shape[0]
    return np.asarray(C @ linalg.solve(1j * omega * np.eye(n) - A, B) + feedthrough)


def _peak(gain: Callable[[float], float], scale: float) -> float:
    """Sup of gain(omega) over omega >= 0: log grid, endpoints and golden refinement."""
    grid = np.logspace(-3, 3, GRID_POINTS) * scale
    values = np.array([gain(w) for w in grid])
    best = max(float(np.max(values)), gain(0.0), gain(math.inf))

    i = int(np.argmax(values))
    if 0 < i < grid.size - 1:
        x = np.log10(grid)
        try:
            result = optimize.minimize_scalar(
                lambda t: -gain(10.0**t), bracket=(x[i - 1], x[i], x[i + 1]), method="golden"
            )
            best = max(best, -float(result.fun))
        except ValueError:
            # flat neighbourhood, no strict bracket
            pass
    return best


def _frequency_scale(A: np.ndarray) -> float:
    abscissa = spectral_abscissa(A)
    return abs(abscissa) if math.isfinite(abscissa) and abscissa != 0 else 1.0


def hinf_norm(sys: StateSpaceSystem, D: Optional[np.ndarray] = None) -> float:
    require_hurwitz(sys.A, "A")

    def gain(w: float) -> float:
        return float(linalg.norm(frequency_response(sys.A, sys.B, sys.C, D, w), 2))

    return _peak(gain, _frequency_scale(sys.A))


def dc_gain(G_m: StateSpaceSystem) -> np.ndarray:
    """G_m(0) = -C A_m^-1 B."""
    return np.asarray(-G_m.C @ linalg.solve(G_m.A, G_m.B))


@dataclass(frozen=True, eq=False)
class NehariApproximant:
    """
    Causal compensator p' = H_A p + H_B sigma, output H_C p + D_H sigma.

    `optimal_error` is the Hankel norm of G_m, the best distance any
    stable approximant can reach; `achieved_error` is measured on a
    frequency grid.
    """

    H_A: np.ndarray
    H_B: np.ndarray
    H_C: np.ndarray
    D_H: np.ndarray
    achieved_error: float
    optimal_error: float
    hsv: np.ndarray
    strictly_proper: bool = False
    constrained: bool = False
    dc_correction: Optional[np.ndarray] = None

    @property
    def order(self) -> int:
        return int(self.H_A.shape[0])

    def response(self, omega: float) -> np.ndarray:
        return frequency_response(self.H_A, self.H_B, self.H_C, self.D_H, omega)

    def dc_gain(self) -> np.ndarray:
        if self.order == 0:
            return self.D_H.copy()
        return np.asarray(self.D_H - self.H_C @ linalg.solve(self.H_A, self.H_B))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "order": self.order,
            "H_A": self.H_A.tolist(),
            "H_B": self.H_B.tolist(),
            "H_C": self.H_C.tolist(),
            "D_H": self.D_H.tolist(),
            "achieved_error": self.achieved_error,
            "optimal_error": self.optimal_error,
            "hsv": self.hsv.tolist(),
            "strictly_proper": self.strictly_proper,
            "constrained": self.constrained,
            "dc_correction": None if self.dc_correction is None else self.dc_correction.tolist(),
        }


def achieved_error(G_m: StateSpaceSystem, approximant: NehariApproximant) -> float:
    """Sup over frequency of |G_m*(j w) - X(j w)|."""
    adjoint = adjoint_system(G_m)

    def gain(w: float) -> float:
        error = frequency_response(adjoint.A, adjoint.B, adjoint.C, None, w) - approximant.response(w)
        return float(linalg.norm(error, 2))

    return _peak(gain, _frequency_scale(G_m.A))


def _zero_approximant(G_m: StateSpaceSystem) -> NehariApproximant:
    return NehariApproximant(
        H_A=np.zeros((0, 0)),
        H_B=np.zeros((0, G_m.p)),
        H_C=np.zeros((G_m.m, 0)),
        D_H=np.zeros((G_m.m, G_m.p)),
        achieved_error=0.0,
        optimal_error=0.0,
        hsv=np.zeros(0),
    )


def _all_pass_approximant(balanced: BalancedRealization) -> Dict[str, np.ndarray]:
    """
    Optimal anti-stable approximant of a balanced stable system at level
    sigma_1 (all-pass embedding with the sigma_1 state ordered last).
    """
    hsv = balanced.hsv
    k = hsv.size
    sigma = hsv[0]
    order = list(range(1, k)) + [0]
    A = balanced.A_b[np.ix_(order, order)]
    B = balanced.B_b[order]
    C = balanced.C_b[:, order]

    A11, B1, C1 = A[: k - 1, : k - 1], B[: k - 1], C[:, : k - 1]
    B2, C2 = B[k - 1 :], C[:, k - 1 :]
    U = -np.linalg.pinv(C2.T) @ B2
    D_hat = -sigma * U
    if k == 1:
        return {
            "A": np.zeros((0, 0)),
            "B": np.zeros((0, B.shape[1])),
            "C": np.zeros((C.shape[0], 0)),
            "D": D_hat,
        }

    Sigma1 = np.diag(hsv[1:])
    Gamma = Sigma1 @ Sigma1 - sigma**2 * np.eye(k - 1)
    A_hat = linalg.solve(
        Gamma, sigma**2 * A11.T + Sigma1 @ A11 @ Sigma1 - sigma * C1.T @ U @ B1.T
    )
    B_hat = linalg.solve(Gamma, Sigma1 @ B1 + sigma * C1.T @ U)
    C_hat = C1 @ Sigma1 + sigma * U @ B1.T
    return {"A": A_hat, "B": B_hat, "C": C_hat, "D": D_hat}


def _truncate(
    H_A: np.ndarray, H_B: np.ndarray, H_C: np.ndarray, order: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if order >= H_A.shape[0]:
        return H_A, H_B, H_C
    if order <= 0:
        return np.zeros((0, 0)), np.zeros((0, H_B.shape[1])), np.zeros((H_C.shape[0], 0))
    try:
        reduced = balance(StateSpaceSystem(H_A, H_B, H_C))
    except DegenerateRealizationError:
        return np.zeros((0, 0)), np.zeros((0, H_B.shape[1])), np.zeros((H_C.shape[0], 0))
    keep = min(order, reduced.hsv.size)
    return reduced.A_b[:keep, :keep], reduced.B_b[:keep], reduced.C_b[:, :keep]


def solve_nehari(
    G_m: StateSpaceSystem,
    R: Any,
    enforce_strictly_proper: bool = False,
    compensator_order: Optional[int] = None,
    fold_frequency: Optional[float] = None,
) -> NehariApproximant:
    """
    Best stable approximant X of the adjoint G_m* in the H-inf sense.

    The problem is mirrored (s -> -s, transposed) onto the optimal
    anti-stable approximation of G_m(s)', solved by the all-pass
    embedding, and mapped back. The optional feedthrough is rolled
    through a fast pole at -fold_frequency when a strictly proper
    compensator is requested.

    Raises:
        InvalidGeneratorError: If G_m is not stable.
        DegeneracyError: If sigma_1 is repeated.
    """
    weight_matrix(R, G_m.m)
    abscissa = require_hurwitz(G_m.A, "A_m")
    mirror = StateSpaceSystem(G_m.A.T, G_m.C.T, G_m.B.T)
    try:
        balanced = balance(mirror)
    except DegenerateRealizationError:
        logger.info("Closed loop has zero Hankel norm, compensator is zero")
        return _zero_approximant(G_m)

    hsv = balanced.hsv
    if hsv.size > 1 and hsv[0] - hsv[1] < HSV_TRUNCATION * hsv[0]:
        raise DegeneracyError(
            f"sigma_1 = {hsv[0]} is repeated (sigma_2 = {hsv[1]}); reduce the model order first",
            code="repeated_sigma1",
            detail={"hsv": hsv.tolist()},
        )
    logger.debug(f"Hankel singular values: {hsv}")

    mirrored = _all_pass_approximant(balanced)
    H_A, H_B, H_C = -mirrored["A"], mirrored["B"], -mirrored["C"]
    D_H = mirrored["D"]
    if H_A.size and not spectral_abscissa(H_A) < 0:
        raise NumericalConditioningError(
            "all-pass construction returned an unstable compensator", code="unstable_compensator"
        )

    if compensator_order is not None:
        H_A, H_B, H_C = _truncate(H_A, H_B, H_C, compensator_order)

    if enforce_strictly_proper:
        omega_f = fold_frequency if fold_frequency is not None else FOLD_FACTOR * abs(abscissa)
        p = G_m.p
        logger.debug(f"Folding feedthrough through a pole at -{omega_f:.6g}")
        H_A = linalg.block_diag(H_A, -omega_f * np.eye(p))
        H_B = np.vstack([H_B, omega_f * np.eye(p)])
        H_C = np.hstack([H_C, D_H])
        D_H = np.zeros_like(D_H)

    approximant = NehariApproximant(
        H_A=H_A,
        H_B=H_B,
        H_C=H_C,
        D_H=D_H,
        achieved_error=math.nan,
        optimal_error=float(hsv[0]),
        hsv=hsv,
        strictly_proper=enforce_strictly_proper,
    )
    error = achieved_error(G_m, approximant)
    if error > hsv[0] * (1 + 1e-6):
        logger.info(f"Approximation error {error:.6g} exceeds the optimum {hsv[0]:.6g}")
    return replace(approximant, achieved_error=error)


def solve_constrained_nehari(
    G_m: StateSpaceSystem,
    R: Any,
    r_dim: Optional[int] = None,
    enforce_strictly_proper: bool = False,
    compensator_order: Optional[int] = None,
    fold_frequency: Optional[float] = None,
    dc_bandwidth: Optional[float] = None,
) -> NehariApproximant:
    """
    Approximant with G_m(0) R^-1 X(0) = I enforced by adding
    Delta * w_c / (s + w_c) to the unconstrained solution.

    Raises:
        ConstraintInfeasibleError: If G_m(0) R^-1 lacks full row rank.
    """
    R = weight_matrix(R, G_m.m)
    if r_dim is not None and r_dim != G_m.p:
        raise CompositionError(f"reference has {r_dim} channels, plant has {G_m.p} outputs")
    abscissa = require_hurwitz(G_m.A, "A_m")
    p = G_m.p
    M = dc_gain(G_m) @ linalg.inv(R)
    if np.linalg.matrix_rank(M) < p:
        raise ConstraintInfeasibleError(
            f"G_m(0) R^-1 has rank {np.linalg.matrix_rank(M)} < {p}",
            code="dc_rank",
            detail={"dc_gain": M.tolist()},
        )

    base = solve_nehari(G_m, R, enforce_strictly_proper, compensator_order, fold_frequency)
    X0 = base.dc_gain()
    delta = np.linalg.pinv(M) @ (np.eye(p) - M @ X0)
    if np.linalg.norm(delta) <= 1e-12 * (1.0 + np.linalg.norm(X0)):
        logger.info("DC constraint already satisfied by the unconstrained compensator")
        return replace(base, constrained=True, dc_correction=np.zeros_like(delta))

    omega_c = dc_bandwidth if dc_bandwidth is not None else abs(abscissa) / 2
    logger.debug(f"DC correction |Delta|={np.linalg.norm(delta):.6g} at w_c={omega_c:.6g}")
    approximant = NehariApproximant(
        H_A=linalg.block_diag(base.H_A, -omega_c * np.eye(p)),
        H_B=np.vstack([base.H_B, omega_c * np.eye(p)]),
        H_C=np.hstack([base.H_C, delta]),
        D_H=base.D_H,
        achieved_error=math.nan,
        optimal_error=base.optimal_error,
        hsv=base.hsv,
        strictly_proper=base.strictly_proper,
        constrained=True,
        dc_correction=delta,
    )
    return replace(approximant, achieved_error=achieved_error(G_m, approximant))


@dataclass(frozen=True)
class SuboptimalityBound:
    S: float
    hinf_norm: float
    r_inv_sqrt_norm: float
    hankel_norm: float
    weighted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "S": self.S,
            "hinf_norm": self.hinf_norm,
            "r_inv_sqrt_norm": self.r_inv_sqrt_norm,
            "hankel_norm": self.hankel_norm,
            "weighted": self.weighted,
        }


def suboptimality_constant(G_m: StateSpaceSystem, R: Any, weighted: bool = False) -> SuboptimalityBound:
    """
    S = (|G_m|_inf + |R^-1/2|) sigma_1.

    With `weighted` the first factor is |G_m R^-1|_inf, the gain that
    actually multiplies the compensator error when R is not the identity.
    """
    R = weight_matrix(R, G_m.m)
    gain_system = G_m
    if weighted:
        gain_system = StateSpaceSystem(G_m.A, G_m.B @ linalg.inv(R), G_m.C)
    peak = hinf_norm(gain_system)
    r_inv_sqrt = 1.0 / math.sqrt(float(np.min(linalg.eigvalsh(R))))
    try:
        hankel = balance(G_m).hankel_norm
    except DegenerateRealizationError:
        hankel = 0.0
    return SuboptimalityBound(
        S=(peak + r_inv_sqrt) * hankel,
        hinf_norm=peak,
        r_inv_sqrt_norm=r_inv_sqrt,
        hankel_norm=hankel,
        weighted=weighted,
    )
