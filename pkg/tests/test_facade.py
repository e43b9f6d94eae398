import logging
import math

import numpy as np
import pytest

from sdac_toolkit.config import load_scenario, parse_scenario
from sdac_toolkit.exceptions import CompositionError, ConfigError, ConstraintInfeasibleError, DependencyError
from sdac_toolkit.facade import Facade
from sdac_toolkit.synthesis import LawKind

from .test_config import SCENARIOS, create_raw_scenario

SQRT2 = math.sqrt(2.0)


def create_facade(name="scalar.toml", threads=1, **updates):
    scenario = load_scenario(SCENARIOS / name)
    if updates:
        scenario = scenario.model_copy(update=updates)
    return Facade(scenario, threads=threads)


def create_sdre_scenario(known_nonlinearity):
    plant = {
        "builder": "matrices",
        "A": [[1.0]],
        "B": [[1.0]],
        "C": [[1.0]],
        "nonlinearity": {"basis": "constant", "value": 1.0, "alpha": [0.5]},
    }
    return parse_scenario(
        create_raw_scenario(
            plant=plant,
            simulation={"v0": [1.0], "known_nonlinearity": known_nonlinearity},
            benchmark={"laws": ["SDRE", "PureForm"], "monte_carlo_draws": 0},
        )
    )


class TestFacade:
    def test_threads_must_be_positive(self):
        """Test that zero worker threads is a configuration error."""
        with pytest.raises(ConfigError) as excinfo:
            create_facade(threads=0)

        assert "threads must be at least 1" in str(excinfo.value)

    def test_synthesis_is_cached(self):
        """Test that synthesis runs once per facade."""
        facade = create_facade()

        assert facade.synthesize() is facade.synthesize()

    def test_horizon_defaults_to_fifty_time_constants(self):
        """Test T = 50 / beta when the scenario leaves the horizon open."""
        facade = create_facade()

        assert facade.horizon() == pytest.approx(50.0 / (0.95 * SQRT2), rel=1e-6)


class TestSynthesize:
    def test_scalar_values(self):
        """Test the scalar Riccati, Gramian and compensator values."""
        syn = create_facade().synthesize()

        assert syn.riccati.Pi[0, 0] == pytest.approx(1 + SQRT2)
        assert syn.gramian.W[0, 0] == pytest.approx(1 / (2 * SQRT2))
        assert syn.lyapunov.lambda_P == pytest.approx(2 * SQRT2)
        assert syn.conv_norm == pytest.approx(1 / SQRT2, rel=1e-8)
        assert syn.compensator is syn.constrained
        assert syn.bound.S == pytest.approx((1 / SQRT2 + 1) / (2 * SQRT2), rel=1e-8)

    def test_to_dict_sections(self):
        """Test that the synthesis report carries everything the later commands read."""
        payload = create_facade().synthesize().to_dict()

        assert set(payload["small_gain_inputs"]) >= {"M", "rho0", "conv_norm", "nu1", "nu2", "B_norm"}
        assert payload["nehari"]["constrained"] is not None
        assert payload["small_gain_inputs"]["nu1"] == 0.0
        assert [entry["rho"] for entry in payload["lipschitz_profile"]] == [1.0, 2.0]

    def test_lipschitz_redraw_failure_is_logged(self, mocker, caplog):
        """Test that bounds failing on a fresh sample set only produce a warning."""
        holds = mocker.patch("sdac_toolkit.facade.LipschitzBounds.holds", return_value=False)

        with caplog.at_level(logging.WARNING, logger="sdac_toolkit.facade"):
            syn = create_facade().synthesize()

        holds.assert_called_once()
        assert syn.lipschitz.rho == 2.0
        assert "fail on a fresh sample set" in caplog.text

    def test_infeasible_constraint_is_skipped_when_optional(self, mocker, caplog):
        """Test that the unconstrained compensator is used when the DC constraint cannot be met."""
        mocker.patch(
            "sdac_toolkit.facade.solve_constrained_nehari",
            side_effect=ConstraintInfeasibleError("rank 0 < 1", code="dc_rank"),
        )
        scenario = parse_scenario(create_raw_scenario())

        with caplog.at_level(logging.WARNING, logger="sdac_toolkit.facade"):
            syn = Facade(scenario).synthesize()

        assert syn.constrained is None
        assert syn.compensator is syn.unconstrained
        assert "Constrained compensator skipped: rank 0 < 1" in caplog.text

    def test_infeasible_constraint_is_raised_when_requested(self, mocker):
        """Test that a requested constrained compensator fails synthesis."""
        mocker.patch(
            "sdac_toolkit.facade.solve_constrained_nehari",
            side_effect=ConstraintInfeasibleError("rank 0 < 1", code="dc_rank"),
        )

        with pytest.raises(ConstraintInfeasibleError) as excinfo:
            create_facade().synthesize()

        assert excinfo.value.exit_code == 3

    def test_imported_compensator(self):
        """Test that an imported realization replaces the synthesized compensator."""
        matrices = {"order": 0, "inputs": 1, "outputs": 1, "D_H": [[0.5]]}
        scenario = parse_scenario(create_raw_scenario(compensator={"matrices": matrices}))

        syn = Facade(scenario).synthesize()

        assert syn.compensator.D_H[0, 0] == 0.5
        assert syn.compensator.optimal_error == pytest.approx(1 / (2 * SQRT2))
        assert syn.compensator.achieved_error >= syn.compensator.optimal_error * (1 - 1e-6)

    def test_imported_compensator_channels(self):
        """Test that an imported realization must map the plant outputs to its inputs."""
        matrices = {"order": 0, "inputs": 2, "outputs": 1, "D_H": [[0.5, 0.5]]}
        scenario = parse_scenario(create_raw_scenario(compensator={"matrices": matrices}))

        with pytest.raises(CompositionError) as excinfo:
            Facade(scenario).synthesize()

        assert "maps 2 -> 1 channels" in str(excinfo.value)

    def test_nehari_report(self):
        """Test that the DC loop gain of the constrained compensator is one."""
        report = create_facade().nehari().to_dict()

        assert report["constrained"]["dc_loop_gain"][0][0] == pytest.approx(1.0, rel=1e-8)
        assert report["unconstrained"]["dc_loop_gain"][0][0] == pytest.approx(0.25, rel=1e-8)
        assert report["hankel_singular_values"] == pytest.approx([1 / (2 * SQRT2)])


class TestBuildLaw:
    def test_pure_form_without_reference_is_regulator(self):
        """Test that a zero reference without disturbance gives the regulator."""
        law = create_facade().build_law("PureForm", np.zeros(1))

        assert law.kind is LawKind.PURE_FORM_REGULATOR

    def test_pure_form_with_reference_is_tracker(self):
        """Test that a nonzero reference gives the tracker."""
        law = create_facade().build_law("PureForm", np.ones(1))

        assert law.kind is LawKind.PURE_FORM_TRACKER

    def test_every_configured_name(self):
        """Test the mapping from law names to law kinds."""
        facade = create_facade()
        expected = {
            "LQR": LawKind.LQR,
            "LQT": LawKind.LQT,
            "SDRE": LawKind.SDRE,
            "Compensator": LawKind.DYNAMIC_COMPENSATOR,
        }

        for name, kind in expected.items():
            assert facade.build_law(name, np.ones(1)).kind is kind

    def test_unknown_name(self):
        """Test that an unknown law name is a configuration error."""
        with pytest.raises(ConfigError) as excinfo:
            create_facade().build_law("MPC", np.zeros(1))

        assert "Unknown control law 'MPC'" in str(excinfo.value)
        assert excinfo.value.code == "unknown_law"


class TestSimulate:
    def test_scalar_regulator(self):
        """Test that the pure-form regulator settles and costs no less than the LQR optimum."""
        facade = create_facade()

        result = facade.simulate()

        assert result.law.kind is LawKind.PURE_FORM_REGULATOR
        assert result.horizon == facade.horizon()
        assert result.cost.J >= (1 + SQRT2) * (1 - 1e-3)
        assert result.to_dict()["tracking_ok"] is True

    def test_heat_rod_tracks_with_unknown_disturbance(self):
        """Test that the adaptive constrained compensator brings the heat rod to the reference."""
        result = create_facade("heat_adaptive.toml").simulate()

        payload = result.to_dict()
        assert payload["law"] == LawKind.DYNAMIC_COMPENSATOR.value
        assert payload["tracking_ok"] is True
        assert payload["max_abs_alpha_hat"] <= 1.05

    def test_larger_adaptation_gain_shrinks_observer_error(self):
        """Test that sup |v_tilde| on [2, 5] does not grow with gamma for a rod starting at rest."""
        scenario = load_scenario(SCENARIOS / "heat_sweep.toml")
        errors = []
        for gamma in (1.0, 10.0, 100.0):
            adaptation = scenario.adaptation.model_copy(update={"gamma": gamma})
            result = Facade(scenario.model_copy(update={"adaptation": adaptation})).simulate()

            traj = result.trajectory
            window = traj.times >= 2.0
            errors.append(float(np.max(np.linalg.norm(traj.observer_error()[window], axis=1))))
            assert np.max(np.abs(traj.alpha_hat)) <= 1.05 * (1 + 1e-9)

        assert errors[1] <= errors[0] * (1 + 1e-9)
        assert errors[2] <= errors[1] * (1 + 1e-9)

    def test_controller_override(self):
        """Test that the controller argument overrides the scenario."""
        result = create_facade().simulate("LQR")

        assert result.law.kind is LawKind.LQR


class TestBenchmark:
    def test_pure_form_gap_decays_with_closed_loop_rate(self):
        """Test that LQR and the pure-form regulator differ by a term decaying like exp(-sqrt(2) t)."""
        result = create_facade().benchmark()

        assert list(result.runs) == ["LQR", "PureForm"]
        assert [entry.law for entry in result.gaps] == ["LQR"]
        assert result.gaps[0].report.fitted_decay_rate == pytest.approx(SQRT2, rel=1e-3)

    def test_cost_gap_draws(self):
        """Test that every seeded draw satisfies the compensator cost bound."""
        result = create_facade().benchmark()

        assert len(result.cost_gap_draws) == 5
        assert [row["satisfied"] for row in result.cost_gap_draws] == [1.0] * 5
        assert result.violations == 0

    def test_draws_are_reproducible_across_threads(self):
        """Test that the draw table does not depend on the worker count."""
        serial = create_facade().cost_gap_table()
        parallel = create_facade(threads=3).cost_gap_table()

        assert [row["gap"] for row in serial] == [row["gap"] for row in parallel]

    def test_sdre_gap_reaches_nonzero_asymptote(self):
        """Test that with a known constant f the SDRE gap settles on the predicted nonzero limit."""
        result = Facade(create_sdre_scenario(known_nonlinearity=True)).benchmark()

        (entry,) = result.gaps
        assert entry.law == "SDRE"
        # -R^-1 B'(G'C'CG + (A_m')^-1 Pi) f with G = 1/sqrt(2), f = 0.5
        expected = -0.5 * (0.5 - (1 + SQRT2) / SQRT2)
        assert entry.asymptote[0] == pytest.approx(expected, rel=1e-8)
        assert entry.asymptote_error <= 1e-3
        assert entry.to_dict()["asymptote_applicable"] is True

    def test_sdre_asymptote_needs_known_disturbance(self):
        """Test that no asymptote is reported when the pure form is built without f."""
        result = Facade(create_sdre_scenario(known_nonlinearity=False)).benchmark()

        (entry,) = result.gaps
        assert entry.asymptote is None
        assert entry.asymptote_error is None
        assert entry.to_dict()["asymptote_applicable"] is False

    @pytest.mark.parametrize("name", ["scalar.toml", "heat_adaptive.toml"])
    def test_cost_gap_bound_over_hundred_draws(self, name):
        """Test |J2 - J1| <= S |sigma| on 100 seeded noise draws."""
        scenario = load_scenario(SCENARIOS / name)
        benchmark = scenario.benchmark.model_copy(update={"monte_carlo_draws": 100})

        rows = Facade(scenario.model_copy(update={"benchmark": benchmark}), threads=4).cost_gap_table()

        assert len(rows) == 100
        assert all(row["gap"] <= row["bound"] for row in rows)

    def test_no_gaps_without_pure_form(self):
        """Test that gaps are only computed against the pure form."""
        scenario = parse_scenario(create_raw_scenario(benchmark={"laws": ["LQR"], "monte_carlo_draws": 0}))

        result = Facade(scenario).benchmark()

        assert result.gaps == []
        assert result.to_dict()["cost_gap"]["draws"] == 0


class TestCheckSmallGain:
    def test_disturbance_free_scalar(self):
        """Test lhs = M rho0 when there is no nonlinearity and no reference."""
        facade = create_facade()
        inputs = facade.synthesize().small_gain_inputs()

        report = facade.check_small_gain({"small_gain_inputs": inputs})

        assert report.lhs == pytest.approx(inputs["M"] * inputs["rho0"])
        assert report.rho_w == 2.0

    def test_incomplete_synthesis_output(self):
        """Test that missing constants ask for synthesize to be rerun."""
        with pytest.raises(DependencyError) as excinfo:
            create_facade().check_small_gain({"small_gain_inputs": {"M": 1.0}})

        assert "rerun 'synthesize'" in str(excinfo.value)
        assert excinfo.value.exit_code == 6
