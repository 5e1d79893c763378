"""Network, activation, data distribution and parameter-ensemble types.

The one-hidden-layer network is g(x) = (1/N) sum_i c_i sigma(w_i . x), which
is the pairing of c sigma(w . x) against the empirical measure of the
particles (c_i, w_i). Every reduction over particles goes through
``accurate_sum`` so that large ensembles stay reproducible to ~1e-12.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit  # type: ignore[import-untyped]

from .constants import (
    DEFAULT_ACTIVATION,
    DEFAULT_DATA_POINTS,
    DEFAULT_HORIZON,
    DEFAULT_INIT_HALF_WIDTH,
    DEFAULT_LEARNING_RATE,
    DEFAULT_REPLICAS,
    DEFAULT_SEED,
    DEFAULT_WIDTH,
    FD_CHECK_POINTS,
    FD_CHECK_RANGE,
    FD_DERIVATIVE_RTOL,
    FD_DERIVATIVE_STEP,
    SIGMOID_BOUNDS,
    STEP_INDEX_EPSILON,
    TANH_BOUNDS,
    WEIGHT_SUM_TOLERANCE,
)
from .exceptions import InvalidInputError
from .rng import validate_seed

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ArrayMap = Callable[[FloatArray], FloatArray]
ParameterFunction = Callable[[FloatArray, FloatArray], FloatArray]


def accurate_sum(values: ArrayLike) -> float:
    """Error-free-transform sum (Shewchuk) of all entries."""
    return math.fsum(np.ravel(np.asarray(values, dtype=np.float64)).tolist())


def accurate_mean(values: ArrayLike) -> float:
    flat = np.ravel(np.asarray(values, dtype=np.float64))
    if flat.size == 0:
        raise InvalidInputError("Cannot average an empty array")
    return math.fsum(flat.tolist()) / flat.size


def accurate_column_means(matrix: FloatArray) -> FloatArray:
    """Compensated mean of every column of a 2-D array."""
    rows = matrix.shape[0]
    if rows == 0:
        raise InvalidInputError("Cannot average an empty array")
    return np.array([math.fsum(column) / rows for column in matrix.T.tolist()])


class ActivationKind(StrEnum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    CUSTOM = "custom-smooth"


def _tanh(u: FloatArray) -> FloatArray:
    return np.tanh(u)


def _tanh_prime(u: FloatArray) -> FloatArray:
    t = np.tanh(u)
    return 1.0 - t * t


def _tanh_second(u: FloatArray) -> FloatArray:
    t = np.tanh(u)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid(u: FloatArray) -> FloatArray:
    return np.asarray(expit(u), dtype=np.float64)


def _sigmoid_prime(u: FloatArray) -> FloatArray:
    s = _sigmoid(u)
    return s * (1.0 - s)


def _sigmoid_second(u: FloatArray) -> FloatArray:
    s = _sigmoid(u)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


@dataclass(frozen=True)
class Activation:
    """A bounded smooth activation with its first two derivatives.

    ``bounds`` declares (sup|sigma|, sup|sigma'|, sup|sigma''|). For custom
    activations the bounds are spot-checked on a grid, not proven.
    """

    kind: ActivationKind
    name: str
    value: ArrayMap
    derivative: ArrayMap
    second_derivative: ArrayMap
    bounds: tuple[float, float, float]

    def __call__(self, u: FloatArray) -> FloatArray:
        return self.value(u)

    @classmethod
    def tanh(cls) -> "Activation":
        return cls(
            ActivationKind.TANH, "tanh", _tanh, _tanh_prime, _tanh_second, TANH_BOUNDS
        )

    @classmethod
    def sigmoid(cls) -> "Activation":
        return cls(
            ActivationKind.SIGMOID,
            "sigmoid",
            _sigmoid,
            _sigmoid_prime,
            _sigmoid_second,
            SIGMOID_BOUNDS,
        )

    @classmethod
    def custom(
        cls,
        name: str,
        value: ArrayMap,
        derivative: ArrayMap,
        second_derivative: ArrayMap,
        bounds: tuple[float, float, float],
    ) -> "Activation":
        """Build a user activation after spot-checking its declared bounds."""
        activation = cls(
            ActivationKind.CUSTOM, name, value, derivative, second_derivative, bounds
        )
        activation.check_bounds()
        activation.check_derivative()
        return activation

    def check_bounds(self, points: FloatArray | None = None) -> None:
        """Raise if sigma, sigma' or sigma'' exceed the declared bounds on ``points``."""
        u = (
            np.linspace(-10 * FD_CHECK_RANGE, 10 * FD_CHECK_RANGE, 10 * FD_CHECK_POINTS)
            if points is None
            else np.asarray(points, dtype=np.float64)
        )
        maps = (self.value, self.derivative, self.second_derivative)
        for order, (fn, bound) in enumerate(zip(maps, self.bounds)):
            observed = float(np.max(np.abs(fn(u))))
            if not np.isfinite(observed) or observed > bound * (1.0 + 1e-12):
                raise InvalidInputError(
                    f"Activation {self.name}: derivative of order {order} reaches "
                    f"{observed:.6g}, above declared bound {bound:.6g}"
                )

    def check_derivative(
        self,
        step: float = FD_DERIVATIVE_STEP,
        rtol: float = FD_DERIVATIVE_RTOL,
    ) -> float:
        """Compare sigma' with central differences of sigma; return the max relative error."""
        u = np.linspace(-FD_CHECK_RANGE, FD_CHECK_RANGE, FD_CHECK_POINTS)
        finite_diff = (self.value(u + step) - self.value(u - step)) / (2.0 * step)
        exact = self.derivative(u)
        scale = np.maximum(np.abs(exact), np.finfo(np.float64).tiny)
        error = float(np.max(np.abs(finite_diff - exact) / scale))
        if error > rtol:
            raise InvalidInputError(
                f"Activation {self.name}: derivative disagrees with finite "
                f"differences (relative error {error:.3g} > {rtol:.1g})"
            )
        return error


_ACTIVATIONS: dict[str, Callable[[], Activation]] = {
    ActivationKind.TANH.value: Activation.tanh,
    ActivationKind.SIGMOID.value: Activation.sigmoid,
}


def get_activation(name: str) -> Activation:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        known = ", ".join(sorted(_ACTIVATIONS))
        raise InvalidInputError(
            f"Unknown activation '{name}' (known: {known})"
        ) from None


@dataclass(frozen=True, eq=False)
class DataDistribution:
    """Finite weighted dataset standing in for pi(dx, dy)."""

    x: FloatArray
    y: FloatArray
    weights: FloatArray
    support_bound: float

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if x.shape[0] != y.shape[0] or y.shape[0] != weights.shape[0]:
            raise InvalidInputError(
                f"Dataset shapes disagree: x {x.shape}, y {y.shape}, weights {weights.shape}"
            )
        if y.shape[0] == 0:
            raise InvalidInputError("Dataset must contain at least one point")
        if np.any(weights < 0):
            raise InvalidInputError("Dataset weights must be non-negative")
        total = accurate_sum(weights)
        if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise InvalidInputError(f"Dataset weights sum to {total!r}, not 1")
        extent = max(float(np.max(np.abs(x))), float(np.max(np.abs(y))))
        if extent > self.support_bound:
            raise InvalidInputError(
                f"Dataset point magnitude {extent} exceeds support bound {self.support_bound}"
            )
        for array in (x, y, weights):
            array.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return int(self.y.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.x.shape[1])

    @classmethod
    def from_points(
        cls,
        points: Sequence[Sequence[float]],
        weights: Sequence[float] | None = None,
        support_bound: float | None = None,
    ) -> "DataDistribution":
        """Build from rows ``[x_1, ..., x_d, y]``; uniform weights by default."""
        rows = np.asarray(points, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] < 2:
            raise InvalidInputError("Points must be rows of the form [x..., y]")
        if weights is None:
            probabilities = np.full(rows.shape[0], 1.0 / rows.shape[0])
        else:
            probabilities = np.asarray(weights, dtype=np.float64)
        if support_bound is None:
            support_bound = float(np.max(np.abs(rows)))
        return cls(rows[:, :-1], rows[:, -1], probabilities, support_bound)

    def to_dict(self) -> dict[str, Any]:
        points = np.column_stack([self.x, self.y])
        return {
            "d": self.input_dim,
            "points": points.tolist(),
            "weights": self.weights.tolist(),
            "support_bound": self.support_bound,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "DataDistribution":
        unknown = set(payload) - {"d", "points", "weights", "support_bound"}
        if unknown:
            raise InvalidInputError(f"Unknown dataset fields: {sorted(unknown)}")
        try:
            dist = cls.from_points(
                payload["points"], payload.get("weights"), payload.get("support_bound")
            )
        except KeyError as e:
            raise InvalidInputError(f"Dataset is missing field {e}") from None
        if "d" in payload and int(payload["d"]) != dist.input_dim:
            raise InvalidInputError(
                f"Dataset declares d={payload['d']} but points have d={dist.input_dim}"
            )
        return dist


def default_dataset() -> DataDistribution:
    """Three-point, one-dimensional dataset used by the acceptance experiments."""
    return DataDistribution.from_points([list(p) for p in DEFAULT_DATA_POINTS])


def sample_datum(
    dist: DataDistribution, rng: np.random.Generator
) -> tuple[FloatArray, float]:
    """Draw (x, y) with probability p_m."""
    m = int(rng.choice(dist.size, p=dist.weights))
    return dist.x[m], float(dist.y[m])


def sample_indices(
    dist: DataDistribution, rng: np.random.Generator, count: int
) -> NDArray[np.int64]:
    """Draw ``count`` i.i.d. data indices in one call."""
    return np.asarray(rng.choice(dist.size, size=count, p=dist.weights), dtype=np.int64)


@dataclass
class ParticleEnsemble:
    """N particles (c_i, w_i); mutated only by the simulation that owns it.

    ``observed_bound`` is the running maximum of |c_i| + ||w_i|| over the
    life of a run and serves as the empirical estimate of C_o.
    """

    c: FloatArray
    w: FloatArray
    step: int = 0
    time: float = 0.0
    observed_bound: float = 0.0

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim == 1:
            self.w = self.w.reshape(-1, 1)
        if self.w.ndim != 2 or self.w.shape[0] != self.c.shape[0]:
            raise InvalidInputError(
                f"Ensemble arrays disagree: c {self.c.shape}, w {self.w.shape}"
            )
        if self.c.shape[0] < 1:
            raise InvalidInputError("Ensemble must contain at least one particle")
        self.observed_bound = max(self.observed_bound, self.current_bound())

    @property
    def size(self) -> int:
        return int(self.c.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.w.shape[1])

    def current_bound(self) -> float:
        return float(np.max(np.abs(self.c) + np.linalg.norm(self.w, axis=1)))

    def points(self) -> FloatArray:
        """Particles as an (N, 1 + d) array of z = (c, w)."""
        return np.column_stack([self.c, self.w])

    def advanced(
        self, c: FloatArray, w: FloatArray, step: int, time: float
    ) -> "ParticleEnsemble":
        """New state of the same run; the observed bound carries over."""
        return ParticleEnsemble(c, w, step, time, self.observed_bound)

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.c.copy(), self.w.copy(), self.step, self.time, self.observed_bound
        )

    def same_particles(self, other: "ParticleEnsemble") -> bool:
        """Bitwise equality of the particle arrays."""
        return bool(
            np.array_equal(self.c, other.c) and np.array_equal(self.w, other.w)
        )


@dataclass(frozen=True)
class InitLaw:
    """Product-uniform initial law: c ~ U(-a_c, a_c), w ~ U(-a_w, a_w)^d."""

    c_half_width: float = DEFAULT_INIT_HALF_WIDTH
    w_half_width: float = DEFAULT_INIT_HALF_WIDTH

    def __post_init__(self) -> None:
        if self.c_half_width <= 0 or self.w_half_width <= 0:
            raise InvalidInputError("Initial law half-widths must be positive")

    def half_widths(self, input_dim: int) -> FloatArray:
        return np.array([self.c_half_width] + [self.w_half_width] * input_dim)

    def sample(
        self, count: int, input_dim: int, rng: np.random.Generator
    ) -> ParticleEnsemble:
        c = rng.uniform(-self.c_half_width, self.c_half_width, size=count)
        w = rng.uniform(-self.w_half_width, self.w_half_width, size=(count, input_dim))
        return ParticleEnsemble(c, w)


@dataclass(frozen=True)
class RunConfig:
    width: int = DEFAULT_WIDTH
    horizon: float = DEFAULT_HORIZON
    alpha: float = DEFAULT_LEARNING_RATE
    seed: int = DEFAULT_SEED
    input_dim: int = 1
    activation: str = DEFAULT_ACTIVATION
    dataset: DataDistribution = field(default_factory=default_dataset)
    replicas: int = DEFAULT_REPLICAS
    init_law: InitLaw = field(default_factory=InitLaw)

    def __post_init__(self) -> None:
        if self.width < 1:
            raise InvalidInputError(f"Width N must be >= 1, got {self.width}")
        if not self.horizon > 0:
            raise InvalidInputError(f"Horizon T must be > 0, got {self.horizon}")
        if not self.alpha > 0:
            raise InvalidInputError(f"Learning rate must be > 0, got {self.alpha}")
        if self.replicas < 1:
            raise InvalidInputError(f"Replica count must be >= 1, got {self.replicas}")
        validate_seed(self.seed)
        get_activation(self.activation)
        if self.dataset.input_dim != self.input_dim:
            raise InvalidInputError(
                f"Dataset has d={self.dataset.input_dim}, config has d={self.input_dim}"
            )

    @property
    def total_steps(self) -> int:
        return step_index(self.width, self.horizon)

    def activation_fn(self) -> Activation:
        return get_activation(self.activation)

    def to_dict(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "horizon": self.horizon,
            "alpha": self.alpha,
            "seed": self.seed,
            "input_dim": self.input_dim,
            "activation": self.activation,
            "dataset": self.dataset.to_dict(),
            "replicas": self.replicas,
            "init_law": {
                "c_half_width": self.init_law.c_half_width,
                "w_half_width": self.init_law.w_half_width,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunConfig":
        known = {
            "width",
            "horizon",
            "alpha",
            "seed",
            "input_dim",
            "activation",
            "dataset",
            "replicas",
            "init_law",
        }
        unknown = set(payload) - known
        if unknown:
            raise InvalidInputError(f"Unknown run config fields: {sorted(unknown)}")
        values = dict(payload)
        if "dataset" in values:
            values["dataset"] = DataDistribution.from_dict(values["dataset"])
        if "init_law" in values:
            values["init_law"] = InitLaw(**values["init_law"])
        return cls(**values)


def step_index(width: int, t: float) -> int:
    """floor(N t), robust to representation error in t."""
    scaled = width * t
    return int(math.floor(scaled + STEP_INDEX_EPSILON * max(1.0, abs(scaled))))


def network_eval(ens: ParticleEnsemble, x: ArrayLike, act: Activation) -> float:
    """g(x) = (1/N) sum_i c_i sigma(w_i . x)."""
    point = np.asarray(x, dtype=np.float64).reshape(-1)
    if point.shape[0] != ens.input_dim:
        raise InvalidInputError(
            f"Input has dimension {point.shape[0]}, ensemble expects {ens.input_dim}"
        )
    return accurate_mean(ens.c * act(ens.w @ point))


def network_outputs(ens: ParticleEnsemble, xs: FloatArray, act: Activation) -> FloatArray:
    """g evaluated at every row of ``xs``."""
    return accurate_column_means(ens.c[:, None] * act(ens.w @ xs.T))


def pair_measure(ens: ParticleEnsemble, f: ParameterFunction) -> float:
    """<f, nu^N> = (1/N) sum_i f(c_i, w_i)."""
    return accurate_mean(np.broadcast_to(f(ens.c, ens.w), ens.c.shape))
