import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy import integrate, linalg

from .exceptions import ConfigError, ProjectionError, StepSizeError
from .integrators import rk4_step
from .nehari import NehariApproximant
from .riccati import RiccatiSolution, convolution_operator_norm, decay_certificate
from .systems import LipschitzBounds, SemilinearPlant, eval_basis

logger = logging.getLogger(__name__)

# Relative tolerance on the projection domain check
DOMAIN_SLACK = 1e-12
# Post-step overshoot tolerated (as a fraction of the boundary layer) before failing
OVERSHOOT_FRACTION = 0.5


@dataclass(frozen=True, eq=False)
class ObserverState:
    v_hat_p: np.ndarray
    v_hat_h: np.ndarray
    alpha_hat: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.v_hat_p, self.v_hat_h, self.alpha_hat])

    @classmethod
    def unpack(cls, x: np.ndarray, n: int) -> "ObserverState":
        return cls(v_hat_p=x[:n].copy(), v_hat_h=x[n : 2 * n].copy(), alpha_hat=x[2 * n : 3 * n].copy())

    def error(self, v: np.ndarray) -> np.ndarray:
        """v_tilde = v_hat_p + v_hat_h - v."""
        return np.asarray(self.v_hat_p + self.v_hat_h - v)


@dataclass(frozen=True, eq=False)
class AdaptationConfig:
    gamma: float
    epsilon: float
    P: np.ndarray

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ConfigError(f"adaptation gain must be positive, got {self.gamma}", code="gamma")
        if not 0 < self.epsilon <= 0.1:
            raise ConfigError(
                f"projection margin must lie in (0, 0.1], got {self.epsilon}", code="epsilon"
            )


def project(alpha_hat_j: float, y_j: float, bound: float, epsilon: float) -> float:
    """
    Smooth projection of the update y_j for the estimate alpha_hat_j.

    Inside |alpha_hat_j| <= bound, or when y_j points inward, y_j passes
    unchanged. In the boundary layer the outward update is tapered
    linearly to zero at bound (1 + epsilon).

    Raises:
        ProjectionError: If alpha_hat_j already lies outside bound (1 + epsilon).
    """
    limit = bound * (1 + epsilon)
    magnitude = abs(alpha_hat_j)
    if magnitude > limit * (1 + DOMAIN_SLACK):
        raise ProjectionError(
            f"|alpha_hat| = {magnitude} outside the projection domain {limit}",
            code="projection_domain",
            detail={"alpha_hat": alpha_hat_j, "limit": limit},
        )
    if magnitude <= bound or alpha_hat_j * y_j <= 0:
        return y_j
    taper = 1.0 - (magnitude - bound) / (bound * epsilon)
    return y_j * max(0.0, taper)


def observer_rates(
    x: np.ndarray,
    v: np.ndarray,
    u_R: np.ndarray,
    phi_value: float,
    sol: RiccatiSolution,
    plant: SemilinearPlant,
    cfg: Optional[AdaptationConfig],
) -> np.ndarray:
    """Right hand side of the two observers and the adaptation law."""
    n = plant.n
    v_hat_p, v_hat_h, alpha_hat = x[:n], x[n : 2 * n], x[2 * n : 3 * n]
    rates = np.empty(3 * n)
    rates[:n] = sol.A_m @ v_hat_p + alpha_hat * phi_value
    rates[n : 2 * n] = sol.A_m @ v_hat_h + sol.system.B @ u_R
    if cfg is None:
        rates[2 * n :] = 0.0
        return rates

    limit = plant.nu_alpha * (1 + cfg.epsilon)
    # RK4 stages may leave the domain slightly; project from the clipped point
    clipped = np.clip(alpha_hat, -limit, limit)
    drive = -(cfg.P @ (v_hat_p + v_hat_h - v)) * phi_value
    rates[2 * n :] = [
        cfg.gamma * project(a, y, plant.nu_alpha, cfg.epsilon) for a, y in zip(clipped, drive)
    ]
    return rates


def enforce_projection(alpha_hat: np.ndarray, plant: SemilinearPlant, epsilon: float) -> np.ndarray:
    """
    Clamp a post-step estimate back onto the projection domain.

    Raises:
        StepSizeError: If the overshoot is larger than the integrator can explain.
    """
    limit = plant.nu_alpha * (1 + epsilon)
    overshoot = float(np.max(np.abs(alpha_hat))) - limit
    if overshoot <= 0:
        return alpha_hat
    if overshoot > OVERSHOOT_FRACTION * plant.nu_alpha * epsilon:
        raise StepSizeError(
            f"adaptation step left the projection domain by {overshoot:.3e}; reduce dt",
            code="projection_overshoot",
            detail={"overshoot": overshoot, "limit": limit},
        )
    logger.debug(f"Clamping alpha_hat overshoot {overshoot:.3e}")
    return np.asarray(np.clip(alpha_hat, -limit, limit))


def observer_step(
    state: ObserverState,
    v: np.ndarray,
    u_R: np.ndarray,
    cfg: Optional[AdaptationConfig],
    sol: RiccatiSolution,
    plant: SemilinearPlant,
    dt: float,
) -> ObserverState:
    """One RK4 step of the observers with v and u_R held over the step."""
    if not dt > 0:
        raise StepSizeError(f"dt must be positive, got {dt}", code="dt")
    phi_value = eval_basis(plant, v)
    x = rk4_step(
        lambda _, z: observer_rates(z, v, u_R, phi_value, sol, plant, cfg),
        0.0,
        state.pack(),
        dt,
    )
    next_state = ObserverState.unpack(x, plant.n)
    if cfg is None:
        return next_state
    alpha_hat = enforce_projection(next_state.alpha_hat, plant, cfg.epsilon)
    return ObserverState(next_state.v_hat_p, next_state.v_hat_h, alpha_hat)


@dataclass(frozen=True)
class DeltaConstants:
    delta_0w: float
    delta_0r: float
    delta_0u: float
    compensator_gain: float
    particular_gain: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "delta_0w": self.delta_0w,
            "delta_0r": self.delta_0r,
            "delta_0u": self.delta_0u,
            "compensator_gain": self.compensator_gain,
            "particular_gain": self.particular_gain,
        }


def compensator_gain(H: NehariApproximant) -> float:
    """L-inf induced gain bound int |H_C exp(H_A t) H_B| dt + |D_H|."""
    feedthrough = float(np.linalg.norm(H.D_H, 2)) if H.D_H.size else 0.0
    if H.order == 0:
        return feedthrough
    cert = decay_certificate(H.H_A)
    t_star = math.log(cert.M / 1e-12) / cert.beta
    value, _ = integrate.quad(
        lambda t: float(np.linalg.norm(H.H_C @ linalg.expm(H.H_A * t) @ H.H_B, 2)),
        0.0,
        t_star,
        limit=500,
        epsabs=1e-11,
        epsrel=1e-10,
    )
    return float(value) + feedthrough


def delta_constants(
    H: NehariApproximant,
    sol: RiccatiSolution,
    plant: SemilinearPlant,
    bounds: LipschitzBounds,
    epsilon: float,
    particular_gain: Optional[float] = None,
) -> DeltaConstants:
    """
    Constants of |u_R| <= d_0w |v| + d_0r |r| + d_0u along the path
    sigma = r - C v_hat_p, with v_hat_p driven by alpha_hat phi(v).

    `particular_gain` is the convolution norm of A_m; it is computed when
    not supplied.
    """
    g_H = compensator_gain(H)
    c_p = convolution_operator_norm(sol.A_m) if particular_gain is None else particular_gain
    delta_0r = float(np.linalg.norm(sol.R_inv, 2)) * g_H
    estimate_path = float(np.linalg.norm(sol.system.C, 2)) * c_p * plant.nu_alpha * (1 + epsilon)
    return DeltaConstants(
        delta_0w=delta_0r * estimate_path * bounds.nu1,
        delta_0r=delta_0r,
        delta_0u=delta_0r * estimate_path * bounds.nu2,
        compensator_gain=g_H,
        particular_gain=c_p,
    )


@dataclass(frozen=True)
class SmallGainReport:
    M: float
    rho0: float
    conv_norm: float
    nu1: float
    nu2: float
    delta_0w: float
    delta_0r: float
    delta_0u: float
    r_inf: float
    rho_w: float
    epsilon_s: float
    B_norm: float
    denominator: float
    lhs: float
    margin: float
    satisfied: bool

    @property
    def denominator_positive(self) -> bool:
        return self.denominator > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "M": self.M,
            "rho0": self.rho0,
            "conv_norm": self.conv_norm,
            "nu1": self.nu1,
            "nu2": self.nu2,
            "delta_0w": self.delta_0w,
            "delta_0r": self.delta_0r,
            "delta_0u": self.delta_0u,
            "r_inf": self.r_inf,
            "rho_w": self.rho_w,
            "epsilon_s": self.epsilon_s,
            "B_norm": self.B_norm,
            "denominator": self.denominator,
            "denominator_positive": self.denominator_positive,
            "lhs": self.lhs,
            "margin": self.margin,
            "satisfied": self.satisfied,
        }


def small_gain_check(
    M: float,
    rho0: float,
    conv_norm: float,
    nu1: float,
    nu2: float,
    delta_0w: float,
    delta_0r: float,
    delta_0u: float,
    r_inf: float,
    rho_w: float,
    epsilon_s: float,
    B_norm: float,
) -> SmallGainReport:
    """
    Evaluate the small-gain inequality

        (M rho0 + c (nu2 + d_0r |r| + d_0u)) / (1 - c (nu1 + |B| d_0w)) <= rho_w - eps_s

    A nonpositive denominator is reported as unsatisfied with lhs = inf
    and margin = -inf rather than raised.
    """
    constants = {
        "M": M,
        "rho0": rho0,
        "conv_norm": conv_norm,
        "nu1": nu1,
        "nu2": nu2,
        "delta_0w": delta_0w,
        "delta_0r": delta_0r,
        "delta_0u": delta_0u,
        "r_inf": r_inf,
        "epsilon_s": epsilon_s,
        "B_norm": B_norm,
    }
    negative = sorted(name for name, value in constants.items() if not value >= 0)
    if negative:
        raise ConfigError(
            f"small-gain constants must be nonnegative: {', '.join(negative)}",
            code="small_gain_input",
        )
    if not rho_w > 0:
        raise ConfigError(f"rho_w must be positive, got {rho_w}", code="small_gain_input")

    denominator = 1.0 - conv_norm * (nu1 + B_norm * delta_0w)
    if denominator > 0:
        lhs = (M * rho0 + conv_norm * (nu2 + delta_0r * r_inf + delta_0u)) / denominator
        margin = (rho_w - epsilon_s) - lhs
    else:
        lhs, margin = math.inf, -math.inf
    return SmallGainReport(
        denominator=denominator,
        lhs=lhs,
        margin=margin,
        satisfied=denominator > 0 and margin >= 0,
        rho_w=rho_w,
        **constants,
    )
