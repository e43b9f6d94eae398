import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .adaptive import AdaptationConfig, DeltaConstants, SmallGainReport, delta_constants, small_gain_check
from .config import ScenarioConfig, build_plant, known_disturbance, reference_vector
from .exceptions import CompositionError, ConfigError, ConstraintInfeasibleError, DependencyError, PropertyFailure
from .nehari import (
    NehariApproximant,
    SuboptimalityBound,
    achieved_error,
    dc_gain,
    solve_constrained_nehari,
    solve_nehari,
    suboptimality_constant,
)
from .riccati import (
    DecayCertificate,
    GramianResult,
    LyapunovCertificate,
    RiccatiSolution,
    convolution_operator_norm,
    decay_certificate,
    lyapunov_certificate,
    observability_gramian,
    solve_care,
)
from .simulation import (
    CostReport,
    SimulationConfig,
    Trajectory,
    band_limited_noise,
    cost_gap_check,
    evaluate_cost,
    integrate_closed_loop,
)
from .synthesis import (
    ControlLaw,
    LawGapReport,
    compensator_law,
    law_gap,
    lqr_law,
    lqt_law,
    pure_form_regulator,
    pure_form_tracker,
    sdre_gap_asymptote,
    sdre_law,
)
from .systems import (
    LipschitzBounds,
    PlantSummary,
    SemilinearPlant,
    SignalTimeline,
    as_vector,
    ball_samples,
    lipschitz_profile,
)

logger = logging.getLogger(__name__)

SMALL_GAIN_INPUTS = (
    "M",
    "rho0",
    "conv_norm",
    "nu1",
    "nu2",
    "delta_0w",
    "delta_0r",
    "delta_0u",
    "B_norm",
)
# Laws compared against the pure form, and which part of the law is compared
GAP_PAIRS = (("LQR", "total"), ("LQT", "total"), ("SDRE", "tracking"))


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    plant: SemilinearPlant
    riccati: RiccatiSolution
    gramian: GramianResult
    decay: DecayCertificate
    lyapunov: LyapunovCertificate
    unconstrained: NehariApproximant
    constrained: Optional[NehariApproximant]
    compensator: NehariApproximant
    bound: SuboptimalityBound
    weighted_bound: SuboptimalityBound
    conv_norm: float
    lipschitz: LipschitzBounds
    deltas: DeltaConstants
    lipschitz_profile: List[LipschitzBounds] = field(default_factory=list)

    def small_gain_inputs(self) -> Dict[str, float]:
        return {
            "M": self.decay.M,
            "beta": self.decay.beta,
            "rho0": self.plant.rho0,
            "conv_norm": self.conv_norm,
            "nu1": self.lipschitz.nu1,
            "nu2": self.lipschitz.nu2,
            "rho_w": self.lipschitz.rho,
            "delta_0w": self.deltas.delta_0w,
            "delta_0r": self.deltas.delta_0r,
            "delta_0u": self.deltas.delta_0u,
            "B_norm": float(np.linalg.norm(self.plant.linear.B, 2)),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plant": asdict(PlantSummary.of(self.plant)),
            "riccati": self.riccati.to_dict(),
            "gramian": self.gramian.to_dict(),
            "decay": self.decay.to_dict(),
            "lyapunov": self.lyapunov.to_dict(),
            "nehari": {
                "unconstrained": self.unconstrained.to_dict(),
                "constrained": None if self.constrained is None else self.constrained.to_dict(),
            },
            "suboptimality": self.bound.to_dict(),
            "weighted_suboptimality": self.weighted_bound.to_dict(),
            "delta_constants": self.deltas.to_dict(),
            "lipschitz_profile": [asdict(entry) for entry in self.lipschitz_profile],
            "small_gain_inputs": self.small_gain_inputs(),
        }


@dataclass(frozen=True, eq=False)
class SimulationResult:
    law: ControlLaw
    trajectory: Trajectory
    cost: CostReport
    horizon: float
    tracking_threshold: float

    @property
    def final_tracking_error(self) -> float:
        return float(self.trajectory.tracking_error()[-1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "law": self.law.kind.value,
            "horizon": self.horizon,
            "steps": int(self.trajectory.times.size - 1),
            "cost": self.cost.to_dict(),
            "final_tracking_error": self.final_tracking_error,
            "tracking_threshold": self.tracking_threshold,
            "tracking_ok": self.final_tracking_error <= self.tracking_threshold,
            "max_abs_alpha_hat": float(np.max(np.abs(self.trajectory.alpha_hat))),
        }


@dataclass(frozen=True, eq=False)
class GapEntry:
    law: str
    against: str
    report: LawGapReport
    beta: float
    asymptote: Optional[np.ndarray] = None

    @property
    def asymptote_error(self) -> Optional[float]:
        """Relative distance of the final gap from the predicted asymptote."""
        if self.asymptote is None:
            return None
        target = float(np.linalg.norm(self.asymptote))
        return abs(self.report.final_gap - target) / max(target, 1e-300)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "law": self.law,
            "against": self.against,
            "beta": self.beta,
            "asymptote": None if self.asymptote is None else self.asymptote.tolist(),
            "asymptote_applicable": self.asymptote is not None,
            "asymptote_error": self.asymptote_error,
            **self.report.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class BenchmarkResult:
    runs: Dict[str, SimulationResult]
    gaps: List[GapEntry]
    cost_gap_draws: List[Dict[str, float]] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(1 for row in self.cost_gap_draws if not row["satisfied"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "laws": {name: run.to_dict() for name, run in self.runs.items()},
            "gaps": [entry.to_dict() for entry in self.gaps],
            "cost_gap": {
                "draws": len(self.cost_gap_draws),
                "violations": self.violations,
                "max_gap_over_bound": max(
                    (row["gap"] / row["bound"] for row in self.cost_gap_draws if row["bound"] > 0), default=0.0
                ),
            },
        }


@dataclass(frozen=True, eq=False)
class NehariReport:
    synthesis: SynthesisResult

    def to_dict(self) -> Dict[str, Any]:
        syn = self.synthesis
        G_m = syn.riccati.closed_loop
        steady_state = dc_gain(G_m) @ syn.riccati.R_inv
        report: Dict[str, Any] = {
            "hankel_singular_values": syn.unconstrained.hsv.tolist(),
            "suboptimality": syn.bound.to_dict(),
            "weighted_suboptimality": syn.weighted_bound.to_dict(),
        }
        for name in ("unconstrained", "constrained"):
            H = getattr(syn, name)
            if H is None:
                report[name] = None
                continue
            report[name] = {
                "order": H.order,
                "achieved_error": H.achieved_error,
                "optimal_error": H.optimal_error,
                "strictly_proper": H.strictly_proper,
                "dc_loop_gain": (steady_state @ H.dc_gain()).tolist(),
            }
        return report


class Facade:
    """
    Runs one scenario through synthesis, simulation, benchmarking and the
    small-gain check.

    Synthesis is computed once and shared by the other operations.
    """

    def __init__(self, scenario: ScenarioConfig, threads: int = 1) -> None:
        if threads < 1:
            raise ConfigError(f"threads must be at least 1, got {threads}", code="threads")
        self.scenario = scenario
        self.threads = threads
        self._synthesis: Optional[SynthesisResult] = None

    def synthesize(self) -> SynthesisResult:
        if self._synthesis is None:
            self._synthesis = self._synthesize()
        return self._synthesis

    def _synthesize(self) -> SynthesisResult:
        cfg = self.scenario
        plant = build_plant(cfg)
        sys = plant.linear
        sol = solve_care(sys, cfg.cost.R)
        logger.info(f"Riccati residual {sol.residual_norm:.3e}")
        G_m = sol.closed_loop

        options: Dict[str, Any] = {
            "enforce_strictly_proper": cfg.compensator.strictly_proper,
            "compensator_order": cfg.compensator.order,
            "fold_frequency": cfg.compensator.fold_frequency,
        }
        unconstrained = solve_nehari(G_m, sol.R, **options)
        constrained: Optional[NehariApproximant] = None
        try:
            constrained = solve_constrained_nehari(
                G_m, sol.R, r_dim=sys.p, dc_bandwidth=cfg.compensator.dc_bandwidth, **options
            )
        except ConstraintInfeasibleError as e:
            if cfg.compensator.constrained:
                raise
            logger.warning(f"Constrained compensator skipped: {e.message}")

        if cfg.compensator.matrices is not None:
            compensator = self._imported_compensator(sol, unconstrained)
        elif cfg.compensator.constrained and constrained is not None:
            compensator = constrained
        else:
            compensator = unconstrained

        weighted = suboptimality_constant(G_m, sol.R, weighted=True)
        conv_norm = convolution_operator_norm(sol.A_m)
        small_gain = cfg.small_gain
        lipschitz, profile = self._lipschitz(plant)
        return SynthesisResult(
            plant=plant,
            riccati=sol,
            gramian=observability_gramian(sol.A_m, sys.C),
            decay=decay_certificate(sol.A_m),
            lyapunov=lyapunov_certificate(sol.A_m),
            unconstrained=unconstrained,
            constrained=constrained,
            compensator=compensator,
            bound=suboptimality_constant(G_m, sol.R),
            weighted_bound=weighted,
            conv_norm=conv_norm,
            lipschitz=lipschitz,
            deltas=delta_constants(
                compensator, sol, plant, lipschitz, cfg.adaptation.epsilon, particular_gain=conv_norm
            ),
            lipschitz_profile=profile,
        )

    def _lipschitz(self, plant: SemilinearPlant) -> Tuple[LipschitzBounds, List[LipschitzBounds]]:
        """Bounds at rho_w, dominating those at rho0, checked again on a fresh draw."""
        cfg = self.scenario.small_gain
        samples, seed = cfg.lipschitz_samples, self.scenario.seed
        profile = lipschitz_profile(plant, sorted({plant.rho0, cfg.rho_w}), samples, seed)
        bounds = next(entry for entry in profile if entry.rho == cfg.rho_w)
        if not bounds.holds(plant, ball_samples(plant.n, cfg.rho_w, samples, seed + 1)):
            logger.warning(
                f"Lipschitz bounds on ball {cfg.rho_w} fail on a fresh sample set; "
                f"increase small_gain.lipschitz_samples"
            )
        return bounds, profile

    def _imported_compensator(self, sol: RiccatiSolution, reference: NehariApproximant) -> NehariApproximant:
        assert self.scenario.compensator.matrices is not None
        H = self.scenario.compensator.matrices.to_approximant()
        if H.H_B.shape[1] != sol.system.p or H.H_C.shape[0] != sol.system.m:
            raise CompositionError(
                f"imported compensator maps {H.H_B.shape[1]} -> {H.H_C.shape[0]} channels, "
                f"plant needs {sol.system.p} -> {sol.system.m}"
            )
        H = replace(H, optimal_error=reference.optimal_error, hsv=reference.hsv)
        return replace(H, achieved_error=achieved_error(sol.closed_loop, H))

    def nehari(self) -> NehariReport:
        return NehariReport(self.synthesize())

    def build_law(self, name: str, r: np.ndarray) -> ControlLaw:
        syn = self.synthesize()
        sol = syn.riccati
        if name == "LQR":
            return lqr_law(sol)
        if name == "LQT":
            return lqt_law(sol, r)
        if name == "PureForm":
            f = known_disturbance(self.scenario, syn.plant)
            if f is None and not np.any(r):
                return pure_form_regulator(sol, syn.gramian)
            return pure_form_tracker(sol, syn.gramian, r, disturbance=f)
        if name == "SDRE":
            return sdre_law(sol, syn.plant, r)
        if name == "Compensator":
            return compensator_law(sol, syn.compensator)
        raise ConfigError(f"Unknown control law '{name}'", code="unknown_law")

    def horizon(self) -> float:
        horizon = self.scenario.simulation.horizon
        return horizon if horizon is not None else 50.0 / self.synthesize().decay.beta

    def simulation_config(self, law: ControlLaw, r: np.ndarray) -> SimulationConfig:
        cfg, syn = self.scenario, self.synthesize()
        sim = cfg.simulation
        n = syn.plant.n
        v0 = as_vector(sim.v0, n, "simulation.v0")
        adaptation = None
        if cfg.adaptation.enabled and not sim.known_nonlinearity:
            adaptation = AdaptationConfig(cfg.adaptation.gamma, cfg.adaptation.epsilon, syn.lyapunov.P)
        horizon = self.horizon()
        return SimulationConfig(
            T=horizon,
            dt=sim.dt,
            plant=syn.plant,
            law=law,
            reference=SignalTimeline.constant(r, horizon),
            adaptation=adaptation,
            seed=cfg.seed,
            v0=v0,
            v_hat_p0=v0 if sim.initial_split == "particular" else None,
            v_hat_h0=v0 if sim.initial_split == "homogeneous" else None,
            alpha_hat0=syn.plant.alpha if sim.known_nonlinearity else None,
            sampled_observers=sim.sampled_observers,
        )

    def simulate(self, controller: Optional[str] = None) -> SimulationResult:
        syn = self.synthesize()
        sim = self.scenario.simulation
        name = controller or sim.controller
        r = reference_vector(self.scenario, syn.riccati.system.p)
        law = self.build_law(name, r)
        sim_cfg = self.simulation_config(law, r)
        logger.info(f"Simulating {name} over [0, {sim_cfg.T:.6g}] with dt={sim.dt}")
        trajectory = integrate_closed_loop(sim_cfg)
        return SimulationResult(
            law=law,
            trajectory=trajectory,
            cost=evaluate_cost(trajectory, syn.riccati.R),
            horizon=sim_cfg.T,
            tracking_threshold=sim.tracking_threshold,
        )

    def benchmark(self) -> BenchmarkResult:
        syn = self.synthesize()
        laws = list(dict.fromkeys(self.scenario.benchmark.laws))
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            runs = dict(zip(laws, pool.map(self.simulate, laws)))
        return BenchmarkResult(runs=runs, gaps=self._gaps(runs), cost_gap_draws=self.cost_gap_table())

    def _gaps(self, runs: Mapping[str, SimulationResult]) -> List[GapEntry]:
        if "PureForm" not in runs:
            return []
        syn = self.synthesize()
        pure = runs["PureForm"]
        entries = []
        for name, component in GAP_PAIRS:
            if name not in runs:
                continue
            asymptote = None
            if name == "SDRE":
                asymptote = self._sdre_asymptote()
            entries.append(
                GapEntry(
                    law=name,
                    against="PureForm",
                    report=law_gap(runs[name].law, pure.law, pure.trajectory, component=component),
                    beta=syn.decay.beta,
                    asymptote=asymptote,
                )
            )
        return entries

    def _sdre_asymptote(self) -> Optional[np.ndarray]:
        """Predicted SDRE gap limit, defined only when the pure form carries the known f."""
        syn = self.synthesize()
        f = known_disturbance(self.scenario, syn.plant)
        if f is None:
            logger.info("SDRE gap asymptote not applicable: the pure form has no known disturbance")
            return None
        return sdre_gap_asymptote(syn.riccati, syn.plant, f)

    def cost_gap_bound(self) -> SuboptimalityBound:
        """Weighted bound, scaled by the error the compensator actually reaches."""
        syn = self.synthesize()
        bound = syn.weighted_bound
        error = max(bound.hankel_norm, syn.unconstrained.achieved_error)
        return replace(bound, S=(bound.hinf_norm + bound.r_inv_sqrt_norm) * error)

    def _cost_gap_draw(self, k: int, bound: SuboptimalityBound) -> Dict[str, float]:
        cfg, syn = self.scenario, self.synthesize()
        bm = cfg.benchmark
        G_m = syn.riccati.closed_loop
        steps = max(10, int(math.ceil(bm.noise_horizon / bm.noise_dt - 1e-9)))
        times = np.linspace(0.0, bm.noise_horizon, steps + 1)
        seed = cfg.seed + k
        sigma = band_limited_noise(times, G_m.p, bm.noise_bandwidth, seed, bm.noise_amplitude)
        v_h0 = 0.1 * np.random.default_rng([cfg.seed, k]).standard_normal(G_m.n)
        row: Dict[str, float] = {"draw": k, "seed": seed, "sigma_l2": sigma.norm_l2()}
        try:
            report = cost_gap_check(G_m, syn.riccati.R, syn.unconstrained, sigma, v_h0, bound=bound)
            row.update(report.to_dict())
            row["satisfied"] = 1.0
        except PropertyFailure as e:
            row.update(e.detail)
            row["satisfied"] = 0.0
        return row

    def cost_gap_table(self) -> List[Dict[str, float]]:
        """Seeded Monte-Carlo draws of sigma for the compensator cost gap."""
        draws = self.scenario.benchmark.monte_carlo_draws
        if not draws:
            return []
        bound = self.cost_gap_bound()
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            rows = list(pool.map(lambda k: self._cost_gap_draw(k, bound), range(draws)))
        failed = sum(1 for row in rows if not row["satisfied"])
        if failed:
            logger.warning(f"Cost gap bound violated in {failed} of {draws} draws")
        return rows

    def check_small_gain(self, synthesis: Mapping[str, Any]) -> SmallGainReport:
        """
        Evaluate the small-gain condition from stored synthesis output.

        Raises:
            DependencyError: If the synthesis output lacks the constants.
        """
        try:
            inputs = synthesis["small_gain_inputs"]
            values = {key: float(inputs[key]) for key in SMALL_GAIN_INPUTS}
        except (KeyError, TypeError, ValueError) as e:
            raise DependencyError(
                "synthesis output is incomplete; rerun 'synthesize'", code="synthesis_incomplete"
            ) from e
        section = self.scenario.small_gain
        r_inf = section.r_inf
        if r_inf is None:
            reference = self.scenario.simulation.reference or [0.0]
            r_inf = float(np.max(np.abs(reference)))
        return small_gain_check(
            r_inf=r_inf,
            rho_w=section.rho_w,
            epsilon_s=section.epsilon_s,
            **values,
        )

