import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg, signal
from scipy.integrate import trapezoid

from .adaptive import AdaptationConfig, ObserverState, enforce_projection, observer_rates, observer_step
from .exceptions import CompositionError, ConfigError, DivergenceError, DomainError, PropertyFailure
from .integrators import rk4_step
from .nehari import NehariApproximant, SuboptimalityBound, suboptimality_constant
from .riccati import observability_gramian, weight_matrix
from .synthesis import ControlLaw, LawKind, backward_adjoint, tracking_input_from_adjoint
from .systems import SemilinearPlant, SignalTimeline, StateSpaceSystem, as_vector, eval_basis

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    T: float
    dt: float
    plant: SemilinearPlant
    law: ControlLaw
    reference: SignalTimeline
    adaptation: Optional[AdaptationConfig] = None
    seed: int = 0
    v0: Optional[np.ndarray] = None
    v_hat_p0: Optional[np.ndarray] = None
    v_hat_h0: Optional[np.ndarray] = None
    alpha_hat0: Optional[np.ndarray] = None
    # observers advanced once per step from the sampled v and u_R
    sampled_observers: bool = False

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}", code="dt")
        if self.T < 10 * self.dt:
            raise ConfigError(f"horizon {self.T} is shorter than 10 steps of {self.dt}", code="horizon")
        if self.reference.horizon < self.T * (1 - 1e-12):
            raise DomainError(
                f"reference covers [0, {self.reference.horizon}], horizon is {self.T}",
                code="reference_horizon",
            )
        sys = self.plant.linear
        if self.reference.dim != sys.p:
            raise CompositionError(f"reference has {self.reference.dim} channels, plant has {sys.p}")
        if self.law.K.shape != (sys.m, sys.n):
            raise CompositionError(f"law gain {self.law.K.shape} does not fit the plant")
        n = sys.n
        for name in ("v0", "v_hat_p0", "v_hat_h0", "alpha_hat0"):
            object.__setattr__(self, name, as_vector(getattr(self, name), n, name))

    @property
    def steps(self) -> int:
        return max(1, int(math.ceil(self.T / self.dt - 1e-9)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    v: np.ndarray
    v_hat_p: np.ndarray
    v_hat_h: np.ndarray
    alpha_hat: np.ndarray
    u: np.ndarray
    u_R: np.ndarray
    y: np.ndarray
    y_hat_p: np.ndarray
    y_hat_h: np.ndarray
    r: np.ndarray
    sigma: np.ndarray
    p: np.ndarray

    def observer_error(self) -> np.ndarray:
        return np.asarray(self.v_hat_p + self.v_hat_h - self.v)

    def tracking_error(self) -> np.ndarray:
        return np.asarray(np.linalg.norm(self.y - self.r, axis=1))

    def columns(self) -> Tuple[List[str], np.ndarray]:
        """Column names and one row per sample, for delimiter-separated export."""
        names = ["t"]
        blocks = [self.times[:, None]]
        for label in ("v", "v_hat_p", "v_hat_h", "alpha_hat", "u", "u_R", "y", "y_hat_p", "y_hat_h", "r", "sigma", "p"):
            block = getattr(self, label)
            names += [f"{label}_{i}" for i in range(block.shape[1])]
            blocks.append(block)
        names += ["observer_error", "tracking_error"]
        blocks.append(np.linalg.norm(self.observer_error(), axis=1)[:, None])
        blocks.append(self.tracking_error()[:, None])
        return names, np.hstack(blocks)


def rk4_order(errors: List[float]) -> List[float]:
    """Observed orders log2(e_k / e_k+1) for a sequence of halved steps."""
    return [math.log2(a / b) for a, b in zip(errors, errors[1:])]


def integrate_closed_loop(cfg: SimulationConfig) -> Trajectory:
    """
    Fixed-step RK4 of plant, observers, adaptation and compensator.

    The stacked state is [v, v_hat_p, v_hat_h, alpha_hat, p]. The
    homogeneous observer is driven by u_R = u + K v, so the sum of both
    observers reconstructs the plant whenever alpha_hat = alpha.

    With `sampled_observers` the observers are held during the plant step
    and then advanced by `observer_step` from the values of v and u_R at
    the start of the step, as a digital observer would see them.

    Raises:
        DivergenceError: At the first sample where the state is not finite.
        StepSizeError: If an adaptation step leaves the projection domain.
    """
    plant, law = cfg.plant, cfg.law
    sys = plant.linear
    sol = law.riccati
    A, B, C, K = sys.A, sys.B, sys.C, law.K
    n = sys.n
    H: Optional[NehariApproximant] = None
    if law.kind is LawKind.DYNAMIC_COMPENSATOR:
        H = law.approximant
    n_p = H.order if H is not None else 0

    steps = cfg.steps
    h = cfg.T / steps
    times = np.linspace(0.0, cfg.T, steps + 1)

    def split(z: np.ndarray) -> Tuple[np.ndarray, ...]:
        return z[:n], z[n : 2 * n], z[2 * n : 3 * n], z[3 * n : 4 * n], z[4 * n :]

    def signals(t: float, z: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
        v, v_hat_p, _, _, p = split(z)
        phi_value = eval_basis(plant, v)
        sigma = cfg.reference(t) - C @ v_hat_p
        u = law.evaluate(v, v_hat_p, p, sigma)
        return phi_value, sigma, u, u + K @ v

    def rhs(t: float, z: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(z)):
            return np.full_like(z, np.nan)
        v, _, _, _, p = split(z)
        phi_value, sigma, u, u_R = signals(t, z)
        dz = np.empty_like(z)
        dz[:n] = A @ v + B @ u + plant.alpha * phi_value
        if cfg.sampled_observers:
            dz[n : 4 * n] = 0.0
        else:
            dz[n : 4 * n] = observer_rates(z[n : 4 * n], v, u_R, phi_value, sol, plant, cfg.adaptation)
        if H is not None and n_p:
            dz[4 * n :] = H.H_A @ p + H.H_B @ sigma
        return dz

    records: Dict[str, np.ndarray] = {
        "v": np.zeros((steps + 1, n)),
        "v_hat_p": np.zeros((steps + 1, n)),
        "v_hat_h": np.zeros((steps + 1, n)),
        "alpha_hat": np.zeros((steps + 1, n)),
        "u": np.zeros((steps + 1, sys.m)),
        "u_R": np.zeros((steps + 1, sys.m)),
        "r": np.zeros((steps + 1, sys.p)),
        "sigma": np.zeros((steps + 1, sys.p)),
        "p": np.zeros((steps + 1, n_p)),
    }

    def record(k: int, z: np.ndarray) -> None:
        v, v_hat_p, v_hat_h, alpha_hat, p = split(z)
        _, sigma, u, u_R = signals(times[k], z)
        records["v"][k], records["v_hat_p"][k], records["v_hat_h"][k] = v, v_hat_p, v_hat_h
        records["alpha_hat"][k], records["p"][k] = alpha_hat, p
        records["u"][k], records["u_R"][k] = u, u_R
        records["r"][k], records["sigma"][k] = cfg.reference(times[k]), sigma

    z = np.concatenate([cfg.v0, cfg.v_hat_p0, cfg.v_hat_h0, cfg.alpha_hat0, np.zeros(n_p)])  # type: ignore[list-item]
    record(0, z)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            previous = z
            z = rk4_step(rhs, times[k], z, h)
            if cfg.sampled_observers and np.all(np.isfinite(z)):
                u_R = signals(times[k], previous)[3]
                observers = ObserverState.unpack(previous[n : 4 * n], n)
                z[n : 4 * n] = observer_step(observers, previous[:n], u_R, cfg.adaptation, sol, plant, h).pack()
            if not np.all(np.isfinite(z)):
                logger.error(f"Closed loop diverged at t={times[k + 1]}")
                raise DivergenceError(
                    f"state became non-finite at t={times[k + 1]:.6g}",
                    code="divergence",
                    detail={"time": float(times[k + 1]), "step": k + 1},
                )
            if cfg.adaptation is not None and not cfg.sampled_observers:
                z[3 * n : 4 * n] = enforce_projection(z[3 * n : 4 * n], plant, cfg.adaptation.epsilon)
            record(k + 1, z)

    return Trajectory(
        times=times,
        y=records["v"] @ C.T,
        y_hat_p=records["v_hat_p"] @ C.T,
        y_hat_h=records["v_hat_h"] @ C.T,
        **records,
    )


@dataclass(frozen=True)
class CostReport:
    J: float
    sigma_l2: float
    tracking: float
    control: float
    bound: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "J": self.J,
            "sigma_l2": self.sigma_l2,
            "tracking": self.tracking,
            "control": self.control,
            "bound": self.bound,
        }


def evaluate_cost(traj: Trajectory, R: Any, bound: Optional[float] = None) -> CostReport:
    """
    Trapezoidal J = int (y_h - sigma)'(y_h - sigma) + u'R u dt.

    Under the dyadic split y_h - sigma = y - r, which is what is integrated.
    """
    R = weight_matrix(R, traj.u.shape[1])
    residual = traj.y - traj.r
    tracking = float(trapezoid(np.sum(residual**2, axis=1), traj.times))
    control = float(trapezoid(np.einsum("ki,ij,kj->k", traj.u, R, traj.u), traj.times))
    sigma_l2 = math.sqrt(float(trapezoid(np.sum(traj.sigma**2, axis=1), traj.times)))
    return CostReport(J=tracking + control, sigma_l2=sigma_l2, tracking=tracking, control=control, bound=bound)


def _forward(A: np.ndarray, B: np.ndarray, u: SignalTimeline, x0: np.ndarray) -> np.ndarray:
    """RK4 of x' = A x + B u(t) on u's grid."""

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(A @ x + B @ u(min(t, u.horizon)))

    states = np.zeros((u.times.size, A.shape[0]))
    states[0] = x0
    for k in range(u.times.size - 1):
        states[k + 1] = rk4_step(rhs, u.times[k], states[k], u.times[k + 1] - u.times[k])
    return states


def _weighted_l2_squared(times: np.ndarray, values: np.ndarray, weight: Optional[np.ndarray] = None) -> float:
    if weight is None:
        return float(trapezoid(np.sum(values**2, axis=1), times))
    return float(trapezoid(np.einsum("ki,ij,kj->k", values, weight, values), times))


@dataclass(frozen=True)
class CostIdentityReport:
    lhs: float
    rhs: float
    diff: float

    def to_dict(self) -> Dict[str, float]:
        return {"lhs": self.lhs, "rhs": self.rhs, "diff": self.diff}


def _pure_form_signals(
    G_m: StateSpaceSystem, R: np.ndarray, sigma: SignalTimeline, v_h0: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """u_R from the backward oracle and the resulting y_h, sampled on sigma's grid."""
    q = backward_adjoint(G_m.A, G_m.C, sigma, sigma.horizon)
    u_R = tracking_input_from_adjoint(G_m.B, R, q)
    v_h = _forward(G_m.A, G_m.B, u_R, v_h0)
    return u_R.values, v_h @ G_m.C.T


def pure_form_cost(G_m: StateSpaceSystem, R: Any, sigma: SignalTimeline, v_h0: Any = None) -> float:
    """
    J_1 in operator form with P = G_m R^-1 G_m*:

        |sigma|^2 - <sigma, P sigma> + |P sigma|^2 + v_h0' W_o v_h0
            + 2 <C exp(A_m t) v_h0, (P - I) sigma>
    """
    R = weight_matrix(R, G_m.m)
    x0 = as_vector(v_h0, G_m.n, "v_h0")
    times, s = sigma.times, sigma.values

    q = backward_adjoint(G_m.A, G_m.C, sigma, sigma.horizon)
    adjoint_applied = SignalTimeline(times, q.values @ -G_m.B)
    P_sigma = _forward(G_m.A, G_m.B @ linalg.inv(R), adjoint_applied, np.zeros(G_m.n)) @ G_m.C.T
    transient = (linalg.expm(times[:, None, None] * G_m.A) @ x0) @ G_m.C.T

    W_o = observability_gramian(G_m.A, G_m.C).W
    quadratic = trapezoid(
        np.sum(s**2, axis=1) - np.sum(s * P_sigma, axis=1) + np.sum(P_sigma**2, axis=1), times
    )
    cross = 2.0 * trapezoid(np.sum(transient * (P_sigma - s), axis=1), times)
    return float(quadratic + x0 @ W_o @ x0 + cross)


def verify_cost_identity(
    G_m: StateSpaceSystem, R: Any, sigma: SignalTimeline, v_h0: Any = None
) -> CostIdentityReport:
    """
    Compare J_1 from a direct simulation of the homogeneous half under the
    pure-form u_R with its operator-form expression.
    """
    R = weight_matrix(R, G_m.m)
    x0 = as_vector(v_h0, G_m.n, "v_h0")
    u_R, y_h = _pure_form_signals(G_m, R, sigma, x0)
    lhs = _weighted_l2_squared(sigma.times, y_h - sigma.values) + _weighted_l2_squared(sigma.times, u_R, R)
    rhs = pure_form_cost(G_m, R, sigma, x0)
    return CostIdentityReport(lhs=lhs, rhs=rhs, diff=abs(lhs - rhs))


@dataclass(frozen=True)
class CostGapReport:
    J1: float
    J2: float
    gap: float
    bound: float

    def to_dict(self) -> Dict[str, float]:
        return {"J1": self.J1, "J2": self.J2, "gap": self.gap, "bound": self.bound}


def _norm_sum_cost(times: np.ndarray, residual: np.ndarray, u_R: np.ndarray, R: np.ndarray) -> float:
    return math.sqrt(_weighted_l2_squared(times, residual)) + math.sqrt(_weighted_l2_squared(times, u_R, R))


def cost_gap_check(
    G_m: StateSpaceSystem,
    R: Any,
    approximant: NehariApproximant,
    sigma: SignalTimeline,
    v_h0: Any = None,
    bound: Optional[SuboptimalityBound] = None,
) -> CostGapReport:
    """
    Costs of the pure-form oracle (J1) and of the causal compensator (J2)
    for the same exogenous sigma and v_h(0), checked against S |sigma|.

    Both costs use the norm form |y_h - sigma| + |R^1/2 u_R|.

    Raises:
        PropertyFailure: If |J2 - J1| exceeds the bound.
    """
    R = weight_matrix(R, G_m.m)
    x0 = as_vector(v_h0, G_m.n, "v_h0")
    times, s = sigma.times, sigma.values
    R_inv = linalg.inv(R)

    u_R1, y_h1 = _pure_form_signals(G_m, R, sigma, x0)
    J1 = _norm_sum_cost(times, y_h1 - s, u_R1, R)

    H = approximant
    n_p, n = H.order, G_m.n

    def rhs(t: float, z: np.ndarray) -> np.ndarray:
        p, v_h = z[:n_p], z[n_p:]
        sigma_t = sigma(min(t, sigma.horizon))
        u_R = R_inv @ ((H.H_C @ p if n_p else 0.0) + H.D_H @ sigma_t)
        dz = np.empty_like(z)
        if n_p:
            dz[:n_p] = H.H_A @ p + H.H_B @ sigma_t
        dz[n_p:] = G_m.A @ v_h + G_m.B @ u_R
        return dz

    states = np.zeros((times.size, n_p + n))
    states[0, n_p:] = x0
    for k in range(times.size - 1):
        states[k + 1] = rk4_step(rhs, times[k], states[k], times[k + 1] - times[k])
    p_samples = states[:, :n_p]
    u_R2 = (p_samples @ H.H_C.T + s @ H.D_H.T) @ R_inv.T
    y_h2 = states[:, n_p:] @ G_m.C.T
    J2 = _norm_sum_cost(times, y_h2 - s, u_R2, R)

    if bound is None:
        bound = suboptimality_constant(G_m, R, weighted=True)
    limit = bound.S * sigma.norm_l2()
    report = CostGapReport(J1=J1, J2=J2, gap=abs(J2 - J1), bound=limit)
    if report.gap > limit + 1e-6 * (1 + limit):
        logger.error(f"Cost gap bound violated: {report.to_dict()}")
        raise PropertyFailure(
            f"|J2 - J1| = {report.gap:.6g} exceeds S |sigma| = {limit:.6g}",
            code="cost_gap_bound",
            detail=report.to_dict(),
        )
    return report


def band_limited_noise(
    times: np.ndarray, dim: int, bandwidth: float, seed: int, amplitude: float = 1.0
) -> SignalTimeline:
    """Seeded white noise through a 4th order Butterworth low-pass."""
    grid = np.asarray(times, dtype=float)
    fs = 1.0 / float(np.mean(np.diff(grid)))
    cutoff = min(bandwidth, 0.45 * fs)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((grid.size, dim))
    sos = signal.butter(4, cutoff, btype="low", fs=fs, output="sos")
    return SignalTimeline(grid, amplitude * signal.sosfilt(sos, white, axis=0))
