"""Deterministic mean-field particle flow integrated with classical RK4.

Each particle follows

    dc/dt = alpha sum_m p_m r_m(t) sigma(w . x_m)
    dw/dt = alpha sum_m p_m r_m(t) c sigma'(w . x_m) x_m

where r_m(t) = y_m - <c sigma(w . x_m), mu_t>. In the self-consistent mode
mu_t is the ensemble's own empirical measure. In the driven mode the residuals
come from a reference trajectory, stage by stage, so a coupled ensemble moves
exactly as the joint RK4 solution of (reference, coupled) would move it.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import ArrayLike

from .constants import DEFAULT_STEP_FRACTION, GRID_FRACTIONS, GRID_MATCH_TOLERANCE, RK4_ORDER
from .core_model import (
    Activation,
    DataDistribution,
    FloatArray,
    ParameterFunction,
    ParticleEnsemble,
    RunConfig,
    accurate_column_means,
    accurate_sum,
    network_outputs,
    pair_measure,
)
from .exceptions import InvalidInputError, NumericOverflowError
from .rng import StreamKind, stream
from .sgd_sim import grid_position, initial_ensemble

logger = logging.getLogger(__name__)


RK4_STAGE_OFFSETS = (0.0, 0.5, 0.5, 1.0)


class Coupling(StrEnum):
    DRIVEN = "driven"
    SELF = "self"


@dataclass
class MeanFieldTrajectory:
    size: int
    alpha: float
    horizon: float
    step_size: float
    grid: FloatArray
    snapshots: list[ParticleEnsemble]
    dist: DataDistribution
    act: Activation
    stage_residuals: FloatArray
    initial: ParticleEnsemble
    coupling: Coupling = Coupling.SELF
    scheme: str = "rk4"
    order: int = RK4_ORDER

    @property
    def n_steps(self) -> int:
        return int(self.stage_residuals.shape[0])

    def snapshot_at(self, t: float) -> ParticleEnsemble:
        return self.snapshots[grid_position(self.grid, t)]

    def metadata(self) -> dict[str, object]:
        return {
            "scheme": self.scheme,
            "order": self.order,
            "step_size": self.step_size,
            "size": self.size,
            "coupling": str(self.coupling),
        }


def default_grid(horizon: float) -> FloatArray:
    return np.array([fraction * horizon for fraction in GRID_FRACTIONS])


def data_residuals(
    c: FloatArray, w: FloatArray, dist: DataDistribution, act: Activation
) -> FloatArray:
    """y_m - <c sigma(w . x_m), empirical measure of (c, w)> for every m."""
    return dist.y - accurate_column_means(c[:, None] * act(w @ dist.x.T))


def _velocity(
    c: FloatArray,
    w: FloatArray,
    dist: DataDistribution,
    alpha: float,
    act: Activation,
    residuals: FloatArray,
) -> FloatArray:
    u = w @ dist.x.T
    weighted = alpha * dist.weights * residuals
    dc = act(u) @ weighted
    dw = (c[:, None] * act.derivative(u) * weighted[None, :]) @ dist.x
    return np.column_stack([dc, dw])


def meanfield_rhs(
    ens: ParticleEnsemble,
    dist: DataDistribution,
    alpha: float,
    act: Activation,
    residuals: FloatArray | None = None,
) -> FloatArray:
    """(N, 1 + d) time derivative of every particle.

    Without ``residuals`` the interaction term uses the ensemble itself.
    """
    if ens.input_dim != dist.input_dim:
        raise InvalidInputError(
            f"Ensemble has d={ens.input_dim}, dataset has d={dist.input_dim}"
        )
    if residuals is None:
        residuals = data_residuals(ens.c, ens.w, dist, act)
    return _velocity(ens.c, ens.w, dist, alpha, act, residuals)


def _grid_steps(grid: FloatArray, step_size: float, n_steps: int) -> list[int]:
    steps: list[int] = []
    for t in grid.tolist():
        k = int(round(t / step_size))
        if abs(k * step_size - t) > GRID_MATCH_TOLERANCE * max(1.0, abs(t)) or not (
            0 <= k <= n_steps
        ):
            raise InvalidInputError(
                f"Grid time {t} is not a multiple of h={step_size} inside [0, T]"
            )
        steps.append(k)
    return steps


def integrate_meanfield(
    init: ParticleEnsemble,
    dist: DataDistribution,
    alpha: float,
    act: Activation,
    horizon: float,
    step_size: float | None = None,
    time_grid: ArrayLike | None = None,
    driver: MeanFieldTrajectory | None = None,
) -> MeanFieldTrajectory:
    """Fixed-step RK4 integration on [0, horizon], snapshots on ``time_grid``.

    With ``driver`` the residuals of every RK4 stage are taken from the
    driver's recorded stages instead of from ``init``'s own measure.
    """
    if not horizon > 0:
        raise InvalidInputError(f"Horizon T must be > 0, got {horizon}")
    h = DEFAULT_STEP_FRACTION * horizon if step_size is None else float(step_size)
    if not h > 0:
        raise InvalidInputError(f"Step size h must be > 0, got {h}")
    n_steps = int(round(horizon / h))
    if n_steps < 1 or abs(n_steps * h - horizon) > GRID_MATCH_TOLERANCE * horizon:
        raise InvalidInputError(f"Horizon {horizon} is not a multiple of h={h}")
    grid = default_grid(horizon) if time_grid is None else np.asarray(time_grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise InvalidInputError("Time grid must not be empty")
    wanted = _grid_steps(grid, h, n_steps)
    if driver is not None:
        if driver.step_size != h or driver.n_steps < n_steps:
            raise InvalidInputError(
                "Driver trajectory must use the same step size and cover the horizon"
            )
        if driver.dist.size != dist.size:
            raise InvalidInputError("Driver trajectory was integrated on another dataset")

    stages = np.empty((n_steps, 4, dist.size))
    snapshots: dict[int, ParticleEnsemble] = {}
    ens = init
    c, w = init.c, init.w
    for k in range(n_steps + 1):
        if k in wanted:
            snapshots[k] = ens
        if k == n_steps:
            break
        z = np.column_stack([c, w])
        slopes: list[FloatArray] = []
        for s, offset in enumerate(RK4_STAGE_OFFSETS):
            zs = z if s == 0 else z + (offset * h) * slopes[-1]
            cs, ws = zs[:, 0], zs[:, 1:]
            if driver is None:
                residuals = data_residuals(cs, ws, dist, act)
            else:
                residuals = driver.stage_residuals[k, s]
            stages[k, s] = residuals
            slopes.append(_velocity(cs, ws, dist, alpha, act, residuals))
        z_next = z + (h / 6.0) * (slopes[0] + 2.0 * slopes[1] + 2.0 * slopes[2] + slopes[3])
        if not np.all(np.isfinite(z_next)):
            raise NumericOverflowError(f"Non-finite mean-field state at step {k + 1}")
        c, w = z_next[:, 0], z_next[:, 1:]
        ens = ens.advanced(c, w, k + 1, (k + 1) * h)

    logger.debug(
        "Integrated %d particles over %d RK4 steps (h=%.3g, %s)",
        init.size,
        n_steps,
        h,
        "driven" if driver is not None else "self",
    )
    return MeanFieldTrajectory(
        size=init.size,
        alpha=alpha,
        horizon=horizon,
        step_size=h,
        grid=grid,
        snapshots=[snapshots[k] for k in wanted],
        dist=dist,
        act=act,
        stage_residuals=stages,
        initial=init,
        coupling=Coupling.SELF if driver is None else Coupling.DRIVEN,
    )


def meanfield_pairing(traj: MeanFieldTrajectory, f: ParameterFunction, t: float) -> float:
    """(1/M) sum_i f(c_i(t), w_i(t)), the estimate of <f, mu-bar_t>."""
    return pair_measure(traj.snapshot_at(t), f)


def meanfield_loss(traj: MeanFieldTrajectory) -> FloatArray:
    """sum_m p_m (y_m - <c sigma(w . x_m), mu_t>)^2 at every grid time."""
    losses: list[float] = []
    for snapshot in traj.snapshots:
        residuals = traj.dist.y - network_outputs(snapshot, traj.dist.x, traj.act)
        losses.append(accurate_sum(traj.dist.weights * residuals**2))
    return np.array(losses)


def reference_initial(config: RunConfig, size: int, index: int = 0) -> ParticleEnsemble:
    """Independent draw of ``size`` particles from the initial law."""
    if size < 1:
        raise InvalidInputError(f"Reference size must be >= 1, got {size}")
    rng = stream(config.seed, StreamKind.REFERENCE, index, size)
    return config.init_law.sample(size, config.input_dim, rng)


def coupled_initial(config: RunConfig, replica: int = 0) -> ParticleEnsemble:
    """The SGD replica's own initial particles, shared by its coupled flow."""
    return initial_ensemble(config, replica)


def integrate_reference(
    config: RunConfig,
    dist: DataDistribution,
    size: int,
    time_grid: Sequence[float] | FloatArray | None = None,
    step_size: float | None = None,
    index: int = 0,
) -> MeanFieldTrajectory:
    return integrate_meanfield(
        reference_initial(config, size, index),
        dist,
        config.alpha,
        config.activation_fn(),
        config.horizon,
        step_size,
        time_grid,
    )
