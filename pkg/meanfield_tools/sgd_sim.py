"""Discrete-time SGD particle system and its pre-limit decomposition.

One SGD step moves every particle with the same pre-step network output
g(x_k). Optional diagnostics split each step's change of <f, nu^N_k> into
drift (the pi-average), a centered martingale increment and a second-order
Taylor remainder G_k^N / N^2.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core_model import (
    Activation,
    DataDistribution,
    FloatArray,
    ParticleEnsemble,
    RunConfig,
    accurate_mean,
    accurate_sum,
    network_outputs,
    pair_measure,
    sample_indices,
    step_index,
)
from .constants import GRID_MATCH_TOLERANCE
from .exceptions import GridRangeError, InvalidInputError, NumericOverflowError
from .observables import Observable, gradient_pairings
from .rng import replica_streams

logger = logging.getLogger(__name__)


@dataclass
class MartingaleDiagnostics:
    """Per-step decomposition records, one column per observable."""

    width: int
    alpha: float
    names: list[str]
    drift1: FloatArray
    drift2: FloatArray
    mart1: FloatArray
    mart2: FloatArray
    drift_rate: FloatArray
    conditional_variance: FloatArray
    g_surrogate: FloatArray
    g_exact: FloatArray
    steps_recorded: int = 0

    @classmethod
    def empty(
        cls, width: int, alpha: float, names: list[str], steps: int
    ) -> "MartingaleDiagnostics":
        shape = (steps, len(names))
        return cls(
            width,
            alpha,
            names,
            *(np.zeros(shape) for _ in range(9)),
        )

    def column(self, f: str | int = 0) -> int:
        if isinstance(f, int):
            if not 0 <= f < len(self.names):
                raise InvalidInputError(f"No observable with index {f}")
            return f
        try:
            return self.names.index(f)
        except ValueError:
            raise InvalidInputError(f"Observable '{f}' was not recorded") from None

    def increments(self, f: str | int = 0) -> FloatArray:
        j = self.column(f)
        return (self.mart1[: self.steps_recorded, j] + self.mart2[: self.steps_recorded, j])

    def drifts(self, f: str | int = 0) -> FloatArray:
        j = self.column(f)
        return self.drift1[: self.steps_recorded, j] + self.drift2[: self.steps_recorded, j]

    def steps_until(self, t: float) -> int:
        k = step_index(self.width, t)
        if t < 0 or k > self.steps_recorded:
            raise GridRangeError(
                f"t={t} needs {k} steps but only {self.steps_recorded} were recorded"
            )
        return k

    def martingale(self, t: float, f: str | int = 0) -> float:
        """<f, M^N_t>: sum of centered increments over the first floor(Nt) steps."""
        return accurate_sum(self.increments(f)[: self.steps_until(t)])


@dataclass
class SgdTrajectory:
    width: int
    horizon: float
    alpha: float
    dist: DataDistribution
    act: Activation
    grid: FloatArray
    snapshots: list[ParticleEnsemble]
    initial: ParticleEnsemble
    steps_executed: int
    diagnostics: MartingaleDiagnostics | None = None
    observables: list[Observable] = field(default_factory=lambda: [])
    config: RunConfig | None = None

    def grid_index(self, t: float) -> int:
        return grid_position(self.grid, t)

    def snapshot_at(self, t: float) -> ParticleEnsemble:
        return self.snapshots[self.grid_index(t)]

    def pairing(self, f: Observable, t: float) -> float:
        return pair_measure(self.snapshot_at(t), f)


def grid_position(grid: FloatArray, t: float) -> int:
    """Index of ``t`` in ``grid``; off-grid requests are refused."""
    hits = np.flatnonzero(np.abs(grid - t) <= GRID_MATCH_TOLERANCE * max(1.0, abs(t)))
    if hits.size == 0:
        raise GridRangeError(f"t={t} is not on the recorded grid {grid.tolist()}")
    return int(hits[0])


def _check_finite(*arrays: FloatArray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericOverflowError("Non-finite parameters produced by SGD update")


def sgd_step(
    ens: ParticleEnsemble,
    datum: tuple[ArrayLike, float],
    alpha: float,
    act: Activation,
) -> ParticleEnsemble:
    """One step of single-sample SGD on all N particles at once."""
    x = np.asarray(datum[0], dtype=np.float64).reshape(-1)
    if x.shape[0] != ens.input_dim:
        raise InvalidInputError(
            f"Datum has dimension {x.shape[0]}, ensemble expects {ens.input_dim}"
        )
    u = ens.w @ x
    s = act(u)
    residual = float(datum[1]) - accurate_mean(ens.c * s)
    scale = alpha / ens.size * residual
    if not math.isfinite(scale):
        raise NumericOverflowError(f"Non-finite residual at step {ens.step}")
    # both updates read the pre-step arrays
    dc = scale * s
    dw = (scale * ens.c * act.derivative(u))[:, None] * x[None, :]
    c_next = ens.c + dc
    w_next = ens.w + dw
    _check_finite(c_next, w_next)
    step = ens.step + 1
    return ens.advanced(c_next, w_next, step, step / ens.size)


def martingale_increment(
    ens: ParticleEnsemble,
    datum: tuple[ArrayLike, float],
    f: Observable,
    alpha: float,
    dist: DataDistribution,
    act: Activation,
) -> float:
    """<f, M^{1,N}_k> + <f, M^{2,N}_k>: realized first-order change minus its pi-average."""
    x_k = np.asarray(datum[0], dtype=np.float64).reshape(1, -1)
    xs = np.vstack([x_k, dist.x])
    first, second = gradient_pairings(ens.c, ens.w, f, xs, act)
    residuals = np.concatenate([[float(datum[1])], dist.y]) - network_outputs(ens, xs, act)
    terms = residuals * (first + second)
    average = accurate_sum(dist.weights * terms[1:])
    return alpha / ens.size * (float(terms[0]) - average)


def drift_rate(
    ens: ParticleEnsemble,
    f: Observable,
    alpha: float,
    dist: DataDistribution,
    act: Activation,
) -> float:
    """alpha sum_m p_m (y_m - g(x_m)) <grad(c sigma(w.x_m)) . grad f, nu>."""
    first, second = gradient_pairings(ens.c, ens.w, f, dist.x, act)
    residuals = dist.y - network_outputs(ens, dist.x, act)
    return alpha * accurate_sum(dist.weights * residuals * (first + second))


def _record_step(
    diag: MartingaleDiagnostics,
    k: int,
    before: ParticleEnsemble,
    after: ParticleEnsemble,
    m: int,
    observables: Sequence[Observable],
    dist: DataDistribution,
    act: Activation,
) -> None:
    n = before.size
    scale = diag.alpha / n
    residuals = dist.y - network_outputs(before, dist.x, act)
    delta = np.column_stack([after.c - before.c, after.w - before.w])
    for j, f in enumerate(observables):
        first, second = gradient_pairings(before.c, before.w, f, dist.x, act)
        d1 = scale * accurate_sum(dist.weights * residuals * first)
        d2 = scale * accurate_sum(dist.weights * residuals * second)
        terms = residuals * (first + second)
        mean_term = accurate_sum(dist.weights * terms)
        diag.drift1[k, j] = d1
        diag.drift2[k, j] = d2
        diag.mart1[k, j] = scale * residuals[m] * first[m] - d1
        diag.mart2[k, j] = scale * residuals[m] * second[m] - d2
        diag.drift_rate[k, j] = diag.alpha * mean_term
        diag.conditional_variance[k, j] = scale**2 * (
            accurate_sum(dist.weights * terms**2) - mean_term**2
        )
        dc, dw = f.gradient(before.c, before.w)
        linear = dc * delta[:, 0] + np.sum(dw * delta[:, 1:], axis=1)
        exact = f(after.c, after.w) - f(before.c, before.w) - linear
        diag.g_exact[k, j] = n * n * accurate_mean(exact)
        # Hessian at the post-step point stands in for the mean-value point
        hess = f.hessian(after.c, after.w)
        quadratic = 0.5 * np.einsum("ni,nij,nj->n", delta, hess, delta)
        diag.g_surrogate[k, j] = n * n * accurate_mean(quadratic)
    diag.steps_recorded = k + 1


def _validate_grid(time_grid: ArrayLike, horizon: float) -> FloatArray:
    grid = np.asarray(time_grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise InvalidInputError("Time grid must not be empty")
    if np.any(grid < 0) or np.any(grid > horizon * (1 + GRID_MATCH_TOLERANCE)):
        raise InvalidInputError(f"Time grid must lie in [0, {horizon}]")
    return grid


def simulate_sgd(
    init: ParticleEnsemble,
    dist: DataDistribution,
    act: Activation,
    alpha: float,
    horizon: float,
    time_grid: ArrayLike,
    data_indices: NDArray[np.int64],
    observables: Sequence[Observable] = (),
) -> SgdTrajectory:
    """Run floor(N T) SGD steps on ``init`` with the given data draws."""
    if alpha < 0:
        raise InvalidInputError(f"Learning rate must be >= 0, got {alpha}")
    grid = _validate_grid(time_grid, horizon)
    n = init.size
    total = step_index(n, horizon)
    if data_indices.shape[0] < total:
        raise InvalidInputError(
            f"{total} steps need {total} data draws, got {data_indices.shape[0]}"
        )
    wanted = [step_index(n, float(t)) for t in grid]
    diag = (
        MartingaleDiagnostics.empty(n, alpha, [f.name for f in observables], total)
        if observables
        else None
    )
    snapshots: dict[int, ParticleEnsemble] = {}
    ens = init
    for k in range(total + 1):
        if k in wanted:
            snapshots[k] = ens
        if k == total:
            break
        m = int(data_indices[k])
        after = sgd_step(ens, (dist.x[m], float(dist.y[m])), alpha, act)
        if diag is not None:
            _record_step(diag, k, ens, after, m, observables, dist, act)
        ens = after
    logger.debug(
        "SGD run finished: N=%d, steps=%d, observed bound %.4g",
        n,
        total,
        ens.observed_bound,
    )
    return SgdTrajectory(
        width=n,
        horizon=horizon,
        alpha=alpha,
        dist=dist,
        act=act,
        grid=grid,
        snapshots=[snapshots[k] for k in wanted],
        initial=init,
        steps_executed=total,
        diagnostics=diag,
        observables=list(observables),
    )


def run_sgd(
    config: RunConfig,
    dist: DataDistribution,
    act: Activation,
    time_grid: ArrayLike,
    replica: int = 0,
    observables: Sequence[Observable] = (),
) -> SgdTrajectory:
    """Seeded SGD run for one replica of ``config``; bitwise deterministic."""
    init_rng, data_rng = replica_streams(config.seed, replica, config.width)
    init = config.init_law.sample(config.width, config.input_dim, init_rng)
    indices = sample_indices(dist, data_rng, config.total_steps)
    trajectory = simulate_sgd(
        init, dist, act, config.alpha, config.horizon, time_grid, indices, observables
    )
    trajectory.config = config
    return trajectory


def initial_ensemble(config: RunConfig, replica: int = 0) -> ParticleEnsemble:
    """The initial particles ``run_sgd`` would draw for this replica."""
    init_rng, _ = replica_streams(config.seed, replica, config.width)
    return config.init_law.sample(config.width, config.input_dim, init_rng)


def quadratic_variation(
    diag: MartingaleDiagnostics, t: float, f: str | int = 0
) -> float:
    """[sqrt(N) <f, M^N>]_t = N sum_{k < floor(Nt)} increment_k^2."""
    k = diag.steps_until(t)
    return diag.width * accurate_sum(diag.increments(f)[:k] ** 2)


def prelimit_qv_compensator(
    diag: MartingaleDiagnostics, t: float, f: str | int = 0
) -> float:
    """sum_k E[(X^N_k)^2 | F_k], the predictable part of the quadratic variation."""
    k = diag.steps_until(t)
    j = diag.column(f)
    return diag.width * accurate_sum(diag.conditional_variance[:k, j])


@dataclass(frozen=True)
class RemainderTraces:
    v_sup: float
    r1_sup: float
    v_sup_continuum: float
    r2_sup: float
    telescoping_error: float


def remainder_traces(trajectory: SgdTrajectory, f: Observable) -> RemainderTraces:
    """Sizes of the remainders V^N and R^{1,N} = N^{-3/2} sum G_k^N for ``f``."""
    diag = trajectory.diagnostics
    if diag is None:
        raise InvalidInputError("Remainder traces need a run with diagnostics enabled")
    j = diag.column(f.name)
    n = trajectory.width
    k_total = diag.steps_recorded
    v_grid: list[float] = []
    residual: list[float] = []
    increments = diag.increments(j)
    drifts = diag.drifts(j)
    g_exact = diag.g_exact[:k_total, j]
    start = pair_measure(trajectory.initial, f)
    for t, snapshot in zip(trajectory.grid, trajectory.snapshots):
        k = step_index(n, float(t))
        gap = float(t) - k / n
        rate = (
            0.0
            if gap <= 0.0
            else drift_rate(snapshot, f, trajectory.alpha, trajectory.dist, trajectory.act)
        )
        v_grid.append(abs(gap * rate))
        predicted = accurate_sum(
            np.concatenate([increments[:k], drifts[:k], g_exact[:k] / n**2])
        )
        residual.append(abs(pair_measure(snapshot, f) - start - predicted))
    v_continuum = (
        float(np.max(np.abs(diag.drift_rate[:k_total, j]))) / n if k_total else 0.0
    )
    return RemainderTraces(
        v_sup=max(v_grid),
        r1_sup=n**-1.5 * accurate_sum(np.abs(diag.g_surrogate[:k_total, j])),
        v_sup_continuum=v_continuum,
        r2_sup=math.sqrt(n) * v_continuum,
        telescoping_error=max(residual),
    )
