import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .nehari import NehariApproximant
from .systems import SemilinearPlant, StateSpaceSystem, as_vector, build_heat_plant, make_basis, zero_plant

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

LawName = Literal["LQR", "LQT", "PureForm", "SDRE", "Compensator"]
Matrix = List[List[float]]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NonlinearityConfig(Section):
    basis: Literal["zero", "constant", "norm", "sampled_norm", "sin"] = "zero"
    value: float = 1.0
    scale: float = 1.0
    weight: Optional[float] = Field(None, gt=0)
    direction: Optional[List[float]] = None
    alpha: Optional[List[float]] = None
    nu_alpha: float = Field(1.0, gt=0)
    rho0: float = Field(1.0, gt=0)


class PlantConfig(Section):
    builder: Literal["heat", "matrices"]
    grid_points: int = 5
    length: float = 1.0
    diffusion: float = 0.1
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    C: Optional[Matrix] = None
    nonlinearity: NonlinearityConfig = Field(default_factory=NonlinearityConfig)

    @model_validator(mode="after")
    def check_builder_inputs(self) -> "PlantConfig":
        if self.builder == "matrices" and (self.A is None or self.B is None or self.C is None):
            raise ValueError("the matrices builder needs A, B and C")
        return self


class CostConfig(Section):
    R: Union[float, Matrix]


class CompensatorMatrices(Section):
    """A compensator realization as exported by the nehari subcommand."""

    order: int = Field(ge=0)
    inputs: int = Field(ge=1)
    outputs: int = Field(ge=1)
    H_A: Matrix = Field(default_factory=list)
    H_B: Matrix = Field(default_factory=list)
    H_C: Matrix = Field(default_factory=list)
    D_H: Matrix

    @model_validator(mode="after")
    def check_shapes(self) -> "CompensatorMatrices":
        shapes = {
            "H_A": (self.order, self.order),
            "H_B": (self.order, self.inputs),
            "H_C": (self.outputs, self.order),
            "D_H": (self.outputs, self.inputs),
        }
        for name, expected in shapes.items():
            array = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if array.size != expected[0] * expected[1]:
                raise ValueError(f"{name} must be {expected[0]}x{expected[1]}")
        return self

    def to_approximant(self) -> NehariApproximant:
        def block(name: str, rows: int, cols: int) -> np.ndarray:
            return np.asarray(getattr(self, name), dtype=float).reshape(rows, cols)

        return NehariApproximant(
            H_A=block("H_A", self.order, self.order),
            H_B=block("H_B", self.order, self.inputs),
            H_C=block("H_C", self.outputs, self.order),
            D_H=block("D_H", self.outputs, self.inputs),
            achieved_error=math.nan,
            optimal_error=math.nan,
            hsv=np.zeros(0),
        )


class CompensatorConfig(Section):
    constrained: bool = False
    strictly_proper: bool = False
    order: Optional[int] = Field(None, ge=0)
    fold_frequency: Optional[float] = Field(None, gt=0)
    dc_bandwidth: Optional[float] = Field(None, gt=0)
    matrices: Optional[CompensatorMatrices] = None


class SimulationSection(Section):
    horizon: Optional[float] = Field(None, gt=0)
    dt: float = Field(0.01, gt=0)
    v0: Optional[List[float]] = None
    reference: Optional[List[float]] = None
    controller: LawName = "PureForm"
    tracking_threshold: float = Field(1e-3, gt=0)
    known_nonlinearity: bool = False
    # which observer starts from v0
    initial_split: Literal["zero", "particular", "homogeneous"] = "zero"
    # advance the observers once per step from sampled measurements
    sampled_observers: bool = False


class AdaptationSection(Section):
    enabled: bool = False
    gamma: float = Field(10.0, gt=0)
    epsilon: float = Field(0.05, gt=0, le=0.1)


class SmallGainSection(Section):
    rho_w: float = Field(1.0, gt=0)
    epsilon_s: float = Field(0.0, ge=0)
    r_inf: Optional[float] = Field(None, ge=0)
    lipschitz_samples: int = Field(256, ge=1)


class BenchmarkSection(Section):
    laws: List[LawName] = Field(default_factory=lambda: ["LQR", "PureForm"], min_length=1)
    monte_carlo_draws: int = Field(100, ge=0)
    noise_bandwidth: float = Field(1.0, gt=0)
    noise_horizon: float = Field(8.0, gt=0)
    noise_dt: float = Field(0.02, gt=0)
    noise_amplitude: float = Field(1.0, gt=0)


class ScenarioConfig(Section):
    plant: PlantConfig
    cost: CostConfig
    compensator: CompensatorConfig = Field(default_factory=CompensatorConfig)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    adaptation: AdaptationSection = Field(default_factory=AdaptationSection)
    small_gain: SmallGainSection = Field(default_factory=SmallGainSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)
    seed: int = 0

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_scenario(raw: Dict[str, Any]) -> ScenarioConfig:
    """
    Validate a scenario mapping.

    Raises:
        ConfigError: Naming the dotted path of the first invalid field.
    """
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        logger.error(f"Invalid scenario payload: {raw}")
        errors = [
            {"field": ".".join(str(part) for part in error["loc"]), "message": error["msg"]}
            for error in e.errors()
        ]
        first = errors[0]
        raise ConfigError(
            f"{first['field']}: {first['message']}",
            code="invalid_field",
            detail={"errors": errors},
        ) from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Scenario file not found: {path}", code="not_found") from e
    except tomllib.TOMLDecodeError as e:
        logger.error(f"Could not parse {path}: {e}")
        # the decoder message carries line and column
        raise ConfigError(f"{path}: {e}", code="toml_syntax") from e
    return parse_scenario(raw)


def build_linear_system(cfg: PlantConfig) -> StateSpaceSystem:
    if cfg.builder == "heat":
        return build_heat_plant(cfg.grid_points, cfg.length, cfg.diffusion)
    return StateSpaceSystem(cfg.A, cfg.B, cfg.C)


def build_plant(cfg: ScenarioConfig) -> SemilinearPlant:
    linear = build_linear_system(cfg.plant)
    nl = cfg.plant.nonlinearity
    if nl.basis == "zero" and nl.alpha is None:
        return zero_plant(linear, nl.nu_alpha, nl.rho0)
    params: Dict[str, Any] = {"value": nl.value, "scale": nl.scale}
    if nl.weight is not None:
        params["weight"] = nl.weight
    if nl.direction is not None:
        params["direction"] = nl.direction
    return SemilinearPlant(
        linear=linear,
        phi=make_basis(nl.basis, linear.n, **params),
        alpha=as_vector(nl.alpha, linear.n, "plant.nonlinearity.alpha"),
        nu_alpha=nl.nu_alpha,
        rho0=nl.rho0,
        phi_name=nl.basis,
    )


def reference_vector(cfg: ScenarioConfig, outputs: int) -> np.ndarray:
    return as_vector(cfg.simulation.reference, outputs, "simulation.reference")


def known_disturbance(cfg: ScenarioConfig, plant: SemilinearPlant) -> Optional[np.ndarray]:
    """f when the nonlinearity is a known constant, None otherwise."""
    nl = cfg.plant.nonlinearity
    if nl.basis != "constant" or not cfg.simulation.known_nonlinearity:
        return None
    return np.asarray(plant.alpha * nl.value)
