import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.integrate import trapezoid
from scipy.stats import norm, qmc

from .exceptions import (
    CompositionError,
    ConfigError,
    DomainError,
    InvalidDiscretizationError,
    NonlinearityError,
)

logger = logging.getLogger(__name__)

# Relative singular-value threshold for every rank decision
RANK_TOLERANCE = 1e-8

Basis = Callable[[np.ndarray], float]


def _frozen_array(value: object, ndim: int, name: str) -> np.ndarray:
    array = np.array(value, dtype=float)
    if ndim == 2:
        array = np.atleast_2d(array)
    elif ndim == 1:
        array = np.atleast_1d(array).reshape(-1)
    if array.ndim != ndim:
        raise CompositionError(f"{name} must be {ndim}-dimensional, got {array.shape}")
    array.setflags(write=False)
    return array


def _numerical_rank(matrix: np.ndarray, tol: float = RANK_TOLERANCE) -> int:
    if matrix.size == 0:
        return 0
    s = linalg.svdvals(matrix)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


@dataclass(frozen=True, eq=False)
class StateSpaceSystem:
    """Finite-dimensional realization v' = A v + B u, y = C v."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self) -> None:
        A = _frozen_array(self.A, 2, "A")
        B = _frozen_array(self.B, 2, "B")
        C = _frozen_array(self.C, 2, "C")
        n = A.shape[0]
        if A.shape != (n, n):
            raise CompositionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise CompositionError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise CompositionError(f"C must have {n} columns, got {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B.shape[1])

    @property
    def p(self) -> int:
        return int(self.C.shape[0])

    def is_stabilizable(self) -> bool:
        """PBH test on every eigenvalue with nonnegative real part."""
        return _pbh_passes(self.A, self.B)

    def is_detectable(self) -> bool:
        return _pbh_passes(self.A.T, self.C.T)

    def transformed(self, T: np.ndarray) -> "StateSpaceSystem":
        """Realization in coordinates v = T w."""
        T = np.asarray(T, dtype=float)
        T_inv = linalg.inv(T)
        return StateSpaceSystem(T_inv @ self.A @ T, T_inv @ self.B, self.C @ T)

    def to_dict(self) -> Dict[str, object]:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}


def _pbh_passes(A: np.ndarray, B: np.ndarray) -> bool:
    n = A.shape[0]
    for eigenvalue in linalg.eigvals(A):
        if eigenvalue.real < -RANK_TOLERANCE * max(1.0, abs(eigenvalue)):
            continue
        pencil = np.hstack([A - eigenvalue * np.eye(n), B.astype(complex)])
        if _numerical_rank(pencil) < n:
            logger.debug(f"PBH rank test fails at eigenvalue {eigenvalue}")
            return False
    return True


def spectral_abscissa(A: np.ndarray) -> float:
    if A.size == 0:
        return -math.inf
    return float(np.max(linalg.eigvals(A).real))


def make_basis(name: str, n: int, **params: object) -> Basis:
    """
    Build one of the scalar nonlinearity bases by name.

    Known names are `zero`, `constant` (value), `norm` (scale),
    `sampled_norm` (weight, the grid spacing of a discretized field) and
    `sin` (direction, the sampling functional c in sin(c.v)).
    """
    if name == "zero":
        return lambda v: 0.0
    if name == "constant":
        value = float(params.get("value", 1.0))  # type: ignore[arg-type]
        return lambda v: value
    if name == "norm":
        scale = float(params.get("scale", 1.0))  # type: ignore[arg-type]
        return lambda v: scale * float(np.linalg.norm(v))
    if name == "sampled_norm":
        weight = params.get("weight")
        w = 1.0 / n if weight is None else float(weight)  # type: ignore[arg-type]
        return lambda v: math.sqrt(w * float(np.dot(v, v)))
    if name == "sin":
        direction = params.get("direction")
        c = np.ones(n) if direction is None else np.asarray(direction, dtype=float)
        if c.shape != (n,):
            raise CompositionError(f"sin basis direction must have {n} entries")
        return lambda v: math.sin(float(c @ v))
    raise ConfigError(f"Unknown nonlinearity basis '{name}'", code="unknown_basis")


@dataclass(frozen=True, eq=False)
class SemilinearPlant:
    """Linear part plus the nonlinearity f(v) = alpha * phi(v)."""

    linear: StateSpaceSystem
    phi: Basis
    alpha: np.ndarray
    nu_alpha: float
    rho0: float
    phi_name: str = "custom"

    def __post_init__(self) -> None:
        alpha = _frozen_array(self.alpha, 1, "alpha")
        if alpha.shape != (self.linear.n,):
            raise CompositionError(
                f"alpha must have {self.linear.n} entries, got {alpha.shape[0]}"
            )
        if self.nu_alpha <= 0 or self.rho0 <= 0:
            raise ConfigError("nu_alpha and rho0 must be positive", code="plant_bounds")
        if alpha.size and np.max(np.abs(alpha)) >= self.nu_alpha:
            raise ConfigError(
                f"|alpha|_inf = {np.max(np.abs(alpha))} must be below nu_alpha = {self.nu_alpha}",
                code="alpha_bound",
            )
        object.__setattr__(self, "alpha", alpha)

    @property
    def n(self) -> int:
        return self.linear.n


def eval_basis(plant: SemilinearPlant, v: np.ndarray) -> float:
    value = float(plant.phi(np.asarray(v, dtype=float)))
    if not math.isfinite(value):
        raise NonlinearityError(
            f"phi returned a non-finite value ({value})",
            code="non_finite_phi",
            detail={"basis": plant.phi_name},
        )
    return value


def eval_nonlinearity(plant: SemilinearPlant, v: np.ndarray) -> np.ndarray:
    """f(v) = alpha phi(v) with the plant's true parameter."""
    return np.asarray(plant.alpha * eval_basis(plant, v))


@dataclass(frozen=True, eq=False)
class SignalTimeline:
    """Sampled signal on [0, T] with piecewise-linear interpolation."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        times = _frozen_array(self.times, 1, "times")
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if times.size < 2:
            raise DomainError("a timeline needs at least two samples")
        if times[0] != 0.0:
            raise DomainError(f"timeline must start at 0, starts at {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise DomainError("timeline samples must be strictly increasing")
        if values.ndim != 2 or values.shape[0] != times.size:
            raise DomainError(
                f"expected {times.size} samples, got values of shape {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __call__(self, t: float) -> np.ndarray:
        if t < -1e-12 or t > self.horizon * (1 + 1e-12) + 1e-12:
            raise DomainError(f"t = {t} outside [0, {self.horizon}]")
        return np.array([np.interp(t, self.times, column) for column in self.values.T])

    def norm_l2(self) -> float:
        return math.sqrt(float(trapezoid(np.sum(self.values**2, axis=1), self.times)))

    @classmethod
    def constant(cls, value: Sequence[float], horizon: float) -> "SignalTimeline":
        row = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.array([0.0, horizon]), np.vstack([row, row]))

    @classmethod
    def from_function(
        cls, fn: Callable[[float], object], times: Sequence[float]
    ) -> "SignalTimeline":
        grid = np.asarray(times, dtype=float)
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid], dtype=float))


@dataclass(frozen=True)
class LipschitzBounds:
    rho: float
    nu1: float
    nu2: float

    def __post_init__(self) -> None:
        if self.nu1 < 0 or self.nu2 < 0:
            raise DomainError("Lipschitz bounds must be nonnegative")

    def holds(self, plant: SemilinearPlant, states: np.ndarray, slack: float = 1e-12) -> bool:
        """Check |f(v)| <= nu1 |v| + nu2 on every row of `states`."""
        for v in states:
            lhs = float(np.linalg.norm(eval_nonlinearity(plant, v)))
            if lhs > self.nu1 * float(np.linalg.norm(v)) + self.nu2 + slack:
                return False
        return True


def build_heat_plant(grid_points: int, length: float, diffusion: float) -> StateSpaceSystem:
    """
    Central-difference discretization of dv/dt = kappa d2v/dx2 on [0, L]
    with homogeneous Dirichlet boundaries.

    The actuator sits at node ceil(N/2) and the output averages the field.
    """
    if grid_points < 2:
        raise InvalidDiscretizationError(
            f"heat plant needs at least 2 grid points, got {grid_points}"
        )
    if diffusion <= 0:
        raise InvalidDiscretizationError(f"diffusion must be positive, got {diffusion}")
    if length <= 0:
        raise InvalidDiscretizationError(f"length must be positive, got {length}")

    n = grid_points
    h = length / (n + 1)
    coupling = diffusion / h**2
    A = (
        np.diag(np.full(n, -2.0 * coupling))
        + np.diag(np.full(n - 1, coupling), 1)
        + np.diag(np.full(n - 1, coupling), -1)
    )
    B = np.zeros((n, 1))
    B[math.ceil(n / 2) - 1, 0] = 1.0
    C = np.full((1, n), h)
    logger.debug(f"Heat plant N={n}, h={h}, actuator node {math.ceil(n / 2)}")
    return StateSpaceSystem(A, B, C)


def ball_samples(n: int, rho: float, samples: int, seed: int) -> np.ndarray:
    """Quasi-random states in the ball of radius rho."""
    # Halton points mapped to Gaussian directions and radius rho * u^(1/n)
    sampler = qmc.Halton(d=n + 1, scramble=True, seed=seed)
    unit = np.clip(sampler.random(samples), 1e-12, 1 - 1e-12)
    directions = norm.ppf(unit[:, :n])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rho * unit[:, n] ** (1.0 / n)
    return directions * radii[:, None]


def estimate_lipschitz_bounds(
    plant: SemilinearPlant, rho: float, samples: int = 256, seed: int = 0
) -> LipschitzBounds:
    if rho <= 0:
        raise DomainError(f"rho must be positive, got {rho}", code="rho")
    if samples < 1:
        raise DomainError(f"samples must be positive, got {samples}", code="samples")

    states = ball_samples(plant.n, rho, samples, seed)
    nu2 = float(np.linalg.norm(eval_nonlinearity(plant, np.zeros(plant.n))))
    slopes = [
        (float(np.linalg.norm(eval_nonlinearity(plant, v))) - nu2) / float(np.linalg.norm(v))
        for v in states
    ]
    nu1 = max(0.0, max(slopes))
    # 10% inflation
    bounds = LipschitzBounds(rho=rho, nu1=1.1 * nu1, nu2=1.1 * nu2)
    logger.debug(f"Lipschitz bounds on ball {rho}: nu1={bounds.nu1}, nu2={bounds.nu2}")
    return bounds


def lipschitz_profile(
    plant: SemilinearPlant,
    radii: Sequence[float],
    samples: int = 256,
    seed: int = 0,
) -> List[LipschitzBounds]:
    """Bounds over increasing radii, made nondecreasing by a running maximum."""
    profile: List[LipschitzBounds] = []
    nu1 = nu2 = 0.0
    for rho in sorted(radii):
        raw = estimate_lipschitz_bounds(plant, rho, samples, seed)
        nu1, nu2 = max(nu1, raw.nu1), max(nu2, raw.nu2)
        profile.append(LipschitzBounds(rho=rho, nu1=nu1, nu2=nu2))
    return profile


@dataclass(frozen=True)
class PlantSummary:
    """Plain numbers describing a plant, used in reports."""

    n: int
    m: int
    p: int
    stabilizable: bool
    detectable: bool
    spectral_abscissa: float
    basis: str
    extra: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def of(cls, plant: SemilinearPlant) -> "PlantSummary":
        sys = plant.linear
        return cls(
            n=sys.n,
            m=sys.m,
            p=sys.p,
            stabilizable=sys.is_stabilizable(),
            detectable=sys.is_detectable(),
            spectral_abscissa=spectral_abscissa(sys.A),
            basis=plant.phi_name,
            extra={"nu_alpha": plant.nu_alpha, "rho0": plant.rho0},
        )


def zero_plant(sys: StateSpaceSystem, nu_alpha: float = 1.0, rho0: float = 1.0) -> SemilinearPlant:
    return SemilinearPlant(
        linear=sys,
        phi=make_basis("zero", sys.n),
        alpha=np.zeros(sys.n),
        nu_alpha=nu_alpha,
        rho0=rho0,
        phi_name="zero",
    )


def as_vector(value: Optional[Sequence[float]], size: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros(size)
    vector = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
    if vector.shape != (size,):
        raise CompositionError(f"{name} must have {size} entries, got {vector.shape[0]}")
    return vector
