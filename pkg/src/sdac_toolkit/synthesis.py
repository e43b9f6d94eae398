import enum
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Optional

import numpy as np
from scipy import linalg

from .exceptions import CompositionError, DomainError, InvalidGeneratorError
from .integrators import rk4_step
from .riccati import GramianResult, RiccatiSolution, require_hurwitz, semigroup_integral
from .systems import SemilinearPlant, SignalTimeline, as_vector, eval_nonlinearity

# Only import the types at typing time, not runtime
if TYPE_CHECKING:
    from .nehari import NehariApproximant
    from .simulation import Trajectory

logger = logging.getLogger(__name__)

# Gap samples at or below this floor are left out of the decay fit
GAP_FLOOR = 1e-12


class LawKind(str, enum.Enum):
    LQR = "LQR"
    LQT = "LQT"
    PURE_FORM_REGULATOR = "PureFormRegulator"
    PURE_FORM_TRACKER = "PureFormTracker"
    SDRE = "SDRE"
    DYNAMIC_COMPENSATOR = "DynamicCompensator"

    @property
    def acts_on_homogeneous_state(self) -> bool:
        return self in (LawKind.PURE_FORM_REGULATOR, LawKind.PURE_FORM_TRACKER)


def inverse_adjoint_generator(sol: RiccatiSolution) -> np.ndarray:
    """(A_m')^-1, the inverse of the adjoint closed-loop generator."""
    require_hurwitz(sol.A_m, "A_m")
    try:
        return np.asarray(linalg.inv(sol.A_m.T))
    except linalg.LinAlgError as e:
        raise InvalidGeneratorError("A_m is singular", code="singular") from e


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """
    A control law u = feedback + tracking.

    `feedback` is the -K.state part shared by every law built from one
    Riccati solution, `tracking` is everything else (u_R).
    """

    kind: LawKind
    K: np.ndarray
    riccati: RiccatiSolution
    gramian: Optional[GramianResult] = None
    feedforward: Dict[str, np.ndarray] = field(default_factory=dict)
    plant: Optional[SemilinearPlant] = None
    approximant: Optional["NehariApproximant"] = None

    def feedback(self, v: np.ndarray, v_p: np.ndarray) -> np.ndarray:
        if self.kind.acts_on_homogeneous_state:
            return np.asarray(-self.K @ (v - v_p))
        return np.asarray(-self.K @ v)

    def tracking(
        self,
        v: np.ndarray,
        v_p: np.ndarray,
        p: Optional[np.ndarray] = None,
        sigma: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        ff = self.feedforward
        if self.kind is LawKind.LQR:
            return np.zeros(self.K.shape[0])
        if self.kind is LawKind.LQT:
            return ff["reference_term"].copy()
        if self.kind in (LawKind.PURE_FORM_REGULATOR, LawKind.PURE_FORM_TRACKER):
            return np.asarray(ff["particular_gain"] @ v_p + ff["reference_term"])
        if self.kind is LawKind.SDRE:
            assert self.plant is not None
            f = eval_nonlinearity(self.plant, v)
            return np.asarray(ff["reference_term"] + ff["disturbance_gain"] @ f)
        # dynamic compensator
        assert self.approximant is not None
        if sigma is None:
            raise CompositionError("the compensator law needs sigma")
        H = self.approximant
        state = H.H_C @ p if p is not None and H.order else np.zeros(H.H_C.shape[0])
        return np.asarray(self.riccati.R_inv @ (state + H.D_H @ sigma))

    def evaluate(
        self,
        v: np.ndarray,
        v_p: np.ndarray,
        p: Optional[np.ndarray] = None,
        sigma: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        return self.feedback(v, v_p) + self.tracking(v, v_p, p, sigma)

    def split_form(self, v_h: np.ndarray, v_p: np.ndarray) -> np.ndarray:
        """u = -K v_h - R^-1 B' q(v_p), pure forms only."""
        self._require_pure_form()
        return self.evaluate(v_h + v_p, v_p)

    def combined_form(self, v: np.ndarray, v_p: np.ndarray) -> np.ndarray:
        """u = -K v + R^-1 B' (Pi - W_o) v_p - R^-1 B' (reference part)."""
        self._require_pure_form()
        ff = self.feedforward
        return np.asarray(-self.K @ v + ff["combined_gain"] @ v_p + ff["reference_term"])

    def _require_pure_form(self) -> None:
        if not self.kind.acts_on_homogeneous_state:
            raise CompositionError(f"{self.kind.value} has no split form")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "K": self.K.tolist(),
            "feedforward": {key: value.tolist() for key, value in sorted(self.feedforward.items())},
        }


def _reference(sol: RiccatiSolution, r: Any) -> np.ndarray:
    return as_vector(r, sol.system.p, "reference")


def _reference_term(sol: RiccatiSolution, r: np.ndarray) -> np.ndarray:
    B, C = sol.system.B, sol.system.C
    return np.asarray(-sol.R_inv @ B.T @ inverse_adjoint_generator(sol) @ C.T @ r)


def lqr_law(sol: RiccatiSolution) -> ControlLaw:
    return ControlLaw(kind=LawKind.LQR, K=sol.K, riccati=sol)


def lqt_law(sol: RiccatiSolution, r: Any) -> ControlLaw:
    reference = _reference(sol, r)
    return ControlLaw(
        kind=LawKind.LQT,
        K=sol.K,
        riccati=sol,
        feedforward={"reference": reference, "reference_term": _reference_term(sol, reference)},
    )


def _check_gramian(sol: RiccatiSolution, W_o: GramianResult) -> None:
    if W_o.W.shape != sol.Pi.shape:
        raise CompositionError(
            f"Gramian shape {W_o.W.shape} does not match Pi shape {sol.Pi.shape}"
        )


def pure_form_regulator(sol: RiccatiSolution, W_o: GramianResult) -> ControlLaw:
    _check_gramian(sol, W_o)
    B = sol.system.B
    return ControlLaw(
        kind=LawKind.PURE_FORM_REGULATOR,
        K=sol.K,
        riccati=sol,
        gramian=W_o,
        feedforward={
            "particular_gain": -sol.R_inv @ B.T @ W_o.W,
            "combined_gain": sol.R_inv @ B.T @ (sol.Pi - W_o.W),
            "reference_term": np.zeros(sol.system.m),
        },
    )


def pure_form_tracker(
    sol: RiccatiSolution,
    W_o: GramianResult,
    r: Any,
    disturbance: Optional[Any] = None,
) -> ControlLaw:
    """
    Gramian closed form of the tracker.

    q = W_o v_p + (A_m')^-1 C' r. With a known constant `disturbance` f the
    particular state settles at -A_m^-1 f, and q becomes
    W_o (v_p + A_m^-1 f) + (A_m')^-1 C' (r + C A_m^-1 f).
    """
    _check_gramian(sol, W_o)
    reference = _reference(sol, r)
    B, C = sol.system.B, sol.system.C
    particular_gain = -sol.R_inv @ B.T @ W_o.W
    effective_reference = reference
    offset = np.zeros(sol.system.m)
    feedforward = {"reference": reference}
    if disturbance is not None:
        f = as_vector(disturbance, sol.system.n, "disturbance")
        settled = linalg.solve(sol.A_m, f)
        effective_reference = reference + C @ settled
        offset = particular_gain @ settled
        feedforward["disturbance"] = f
    feedforward.update(
        {
            "particular_gain": particular_gain,
            "combined_gain": sol.R_inv @ B.T @ (sol.Pi - W_o.W),
            "reference_term": _reference_term(sol, effective_reference) + offset,
        }
    )
    return ControlLaw(
        kind=LawKind.PURE_FORM_TRACKER,
        K=sol.K,
        riccati=sol,
        gramian=W_o,
        feedforward=feedforward,
    )


def sdre_law(sol: RiccatiSolution, plant: SemilinearPlant, r: Any) -> ControlLaw:
    """u = -K v - R^-1 B'(A_m')^-1 C' r + R^-1 B'(A_m')^-1 Pi f(v)."""
    if plant.n != sol.system.n:
        raise CompositionError(f"plant has {plant.n} states, solution has {sol.system.n}")
    reference = _reference(sol, r)
    B = sol.system.B
    return ControlLaw(
        kind=LawKind.SDRE,
        K=sol.K,
        riccati=sol,
        plant=plant,
        feedforward={
            "reference": reference,
            "reference_term": _reference_term(sol, reference),
            "disturbance_gain": sol.R_inv @ B.T @ inverse_adjoint_generator(sol) @ sol.Pi,
        },
    )


def compensator_law(sol: RiccatiSolution, approximant: "NehariApproximant") -> ControlLaw:
    if approximant.H_C.shape[0] != sol.system.m or approximant.H_B.shape[1] != sol.system.p:
        raise CompositionError("compensator dimensions do not match the plant")
    return ControlLaw(
        kind=LawKind.DYNAMIC_COMPENSATOR,
        K=sol.K,
        riccati=sol,
        approximant=approximant,
    )


def backward_adjoint(
    A_m: np.ndarray, C: np.ndarray, sigma: SignalTimeline, horizon: float
) -> SignalTimeline:
    """q' = -A_m' q + C' sigma, q(T) = 0, integrated backward on sigma's grid."""
    if sigma.horizon < horizon * (1 - 1e-12):
        raise DomainError(
            f"sigma covers [0, {sigma.horizon}], horizon is {horizon}", code="sigma_horizon"
        )
    if sigma.dim != C.shape[0]:
        raise CompositionError(f"sigma has {sigma.dim} channels, C has {C.shape[0]} rows")
    times = sigma.times[sigma.times < horizon * (1 - 1e-12)]
    times = np.append(times, horizon)

    def rhs(t: float, q: np.ndarray) -> np.ndarray:
        return np.asarray(-A_m.T @ q + C.T @ sigma(min(t, sigma.horizon)))

    values = np.zeros((times.size, A_m.shape[0]))
    for k in range(times.size - 1, 0, -1):
        values[k - 1] = rk4_step(rhs, times[k], values[k], times[k - 1] - times[k])
    return SignalTimeline(times, values)


def solve_q_backward(sol: RiccatiSolution, sigma: SignalTimeline, T: float) -> SignalTimeline:
    """Non-causal adjoint oracle on sigma's sample grid."""
    return backward_adjoint(sol.A_m, sol.system.C, sigma, T)


def tracking_input_from_adjoint(B: np.ndarray, R: np.ndarray, q: SignalTimeline) -> SignalTimeline:
    """u_R = -R^-1 B' q."""
    gain = -linalg.solve(R, B.T)
    return SignalTimeline(q.times, q.values @ gain.T)


@dataclass(frozen=True, eq=False)
class LawGapReport:
    times: np.ndarray
    gap_norm: np.ndarray
    fitted_decay_rate: float
    sup_gap: float
    final_gap: float
    component: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "component": self.component,
            "fitted_decay_rate": self.fitted_decay_rate,
            "sup_gap": self.sup_gap,
            "final_gap": self.final_gap,
        }


def _fit_decay_rate(times: np.ndarray, gap: np.ndarray) -> float:
    horizon = times[-1]
    window = (times >= 0.1 * horizon) & (times <= 0.9 * horizon) & (gap > GAP_FLOOR)
    if np.count_nonzero(window) < 2:
        return math.inf
    slope, _ = np.polyfit(times[window], np.log(gap[window]), 1)
    return float(-slope)


def law_gap(
    law1: ControlLaw,
    law2: ControlLaw,
    traj: "Trajectory",
    component: str = "total",
) -> LawGapReport:
    """
    Compare two laws as maps, evaluated on the same recorded states.

    `component` selects the total law ("total") or the u_R part only
    ("tracking").
    """
    if component not in ("total", "tracking"):
        raise CompositionError(f"unknown law component '{component}'")
    if law1.K.shape != law2.K.shape or law1.K.shape[1] != traj.v.shape[1]:
        raise CompositionError("laws are not compatible with the trajectory")

    def evaluate(law: ControlLaw, k: int) -> np.ndarray:
        args = (traj.v[k], traj.v_hat_p[k], traj.p[k], traj.sigma[k])
        if component == "tracking":
            return law.tracking(*args)
        return law.evaluate(*args)

    gap = np.array(
        [
            float(np.linalg.norm(evaluate(law1, k) - evaluate(law2, k)))
            for k in range(traj.times.size)
        ]
    )
    report = LawGapReport(
        times=traj.times,
        gap_norm=gap,
        fitted_decay_rate=_fit_decay_rate(traj.times, gap),
        sup_gap=float(np.max(gap)),
        final_gap=float(gap[-1]),
        component=component,
    )
    logger.debug(
        f"{law1.kind.value} vs {law2.kind.value}: sup={report.sup_gap:.3e}, "
        f"rate={report.fitted_decay_rate:.4g}"
    )
    return report


def sdre_gap_asymptote(sol: RiccatiSolution, plant: SemilinearPlant, f_value: Any) -> np.ndarray:
    """
    Long-time limit of u_R - u_R,sdre under a constant nonlinearity value.

    -R^-1 B'(G' C'C G + (A_m')^-1 Pi) f with G = int_0^inf exp(A_m t) dt.
    """
    f = as_vector(f_value, plant.n, "f_value")
    require_hurwitz(sol.A_m, "A_m")
    C = sol.system.C
    G = semigroup_integral(sol.A_m)
    double_convolution = G.T @ C.T @ C @ G
    return np.asarray(
        -sol.R_inv
        @ sol.system.B.T
        @ (double_convolution + inverse_adjoint_generator(sol) @ sol.Pi)
        @ f
    )
