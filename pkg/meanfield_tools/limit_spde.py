"""Limit objects along the mean-field reference: the R operator, the Gaussian
martingale covariance and a Galerkin closure of the limit fluctuation equation.

With f_a the first m normalized sine modes and h_a(t) = <f_a, eta-bar_t>, the
closure is the linear SDE dh = G(s) h ds + dxi(s), where row a of G(s) holds
the L2 projection coefficients of the drift generator applied to f_a and
xi has covariance rate Q(s).
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from scipy.integrate import cumulative_trapezoid  # type: ignore[import-untyped]

from .constants import (
    DEFAULT_SPDE_DT,
    GALERKIN_NODES,
    GRID_MATCH_TOLERANCE,
    PROJECTION_RESIDUAL_THRESHOLD,
    PSD_TOLERANCE,
)
from .core_model import (
    FloatArray,
    ParticleEnsemble,
    accurate_column_means,
    accurate_sum,
    network_outputs,
)
from .exceptions import GridRangeError, InvalidInputError, ModelError
from .meanfield import MeanFieldTrajectory
from .observables import Observable, gradient_pairings
from .rng import StreamKind, stream
from .sgd_sim import grid_position
from .sobolev import (
    BasisFunction,
    BumpFunction,
    SobolevDomain,
    bump_radius,
    tensor_quadrature,
)

logger = logging.getLogger(__name__)


class RKernel:
    """R_{x,y,mu-bar_t}[f] evaluated against the reference ensemble, cached per (t, f)."""

    def __init__(self, ref: MeanFieldTrajectory):
        self.ref = ref
        self.dist = ref.dist
        self.act = ref.act
        self.alpha = ref.alpha
        self._cache: dict[tuple[int, str], FloatArray] = {}

    @property
    def grid(self) -> FloatArray:
        return self.ref.grid

    def _pairings(self, snapshot: ParticleEnsemble, f: Observable, xs: FloatArray) -> FloatArray:
        first, second = gradient_pairings(snapshot.c, snapshot.w, f, xs, self.act)
        return first + second

    def r_eval(self, t: float, f: Observable, datum: tuple[ArrayLike, float]) -> float:
        snapshot = self.ref.snapshot_at(t)
        x = np.asarray(datum[0], dtype=np.float64).reshape(1, -1)
        residual = float(datum[1]) - float(network_outputs(snapshot, x, self.act)[0])
        return residual * float(self._pairings(snapshot, f, x)[0])

    def r_values(self, t: float, f: Observable) -> FloatArray:
        """R[f] at every data point of the dataset."""
        key = (grid_position(self.grid, t), f.name)
        cached = self._cache.get(key)
        if cached is None:
            snapshot = self.ref.snapshots[key[0]]
            residuals = self.dist.y - network_outputs(snapshot, self.dist.x, self.act)
            cached = residuals * self._pairings(snapshot, f, self.dist.x)
            self._cache[key] = cached
        return cached

    def centered(self, t: float, f: Observable) -> FloatArray:
        values = self.r_values(t, f)
        return values - accurate_sum(self.dist.weights * values)

    def covariance_rate(self, t: float, observables: Sequence[Observable]) -> FloatArray:
        """Q(t) = alpha^2 sum_m p_m (R_m - R-bar)(R_m - R-bar)^T over the observables."""
        centered = np.vstack([self.centered(t, f) for f in observables])
        rate = self.alpha**2 * (centered * self.dist.weights[None, :]) @ centered.T
        return 0.5 * (rate + rate.T)


def _grid_upto(grid: FloatArray, t: float) -> int:
    if t < 0:
        raise GridRangeError(f"t={t} is negative")
    return grid_position(grid, t)


def martingale_covariance(kernel: RKernel, t: float, f: Observable, g: Observable) -> float:
    """alpha^2 int_0^t sum_m p_m (R[f] - R-bar[f])(R[g] - R-bar[g]) ds by trapezoid."""
    stop = _grid_upto(kernel.grid, t)
    if stop == 0:
        return 0.0
    times = kernel.grid[: stop + 1]
    integrand = np.array(
        [
            kernel.alpha**2
            * accurate_sum(kernel.dist.weights * kernel.centered(s, f) * kernel.centered(s, g))
            for s in times.tolist()
        ]
    )
    return float(np.trapezoid(integrand, times))


@dataclass
class GaussianMartingaleModel:
    names: list[str]
    grid: FloatArray
    rates: FloatArray
    accumulated: FloatArray

    def covariance(self, t: float) -> FloatArray:
        return self.accumulated[grid_position(self.grid, t)]

    def min_rate_eigenvalue(self) -> float:
        return float(min(np.linalg.eigvalsh(q).min() for q in self.rates))


def accumulate(grid: FloatArray, rates: FloatArray) -> FloatArray:
    """int_0^t Q(s) ds at every grid time, trapezoid per entry."""
    if grid.size == 1:
        return np.zeros_like(rates)
    return np.asarray(cumulative_trapezoid(rates, grid, axis=0, initial=0.0))


def martingale_model(kernel: RKernel, observables: Sequence[Observable]) -> GaussianMartingaleModel:
    rates = np.stack([kernel.covariance_rate(t, observables) for t in kernel.grid.tolist()])
    for t, q in zip(kernel.grid.tolist(), rates):
        floor = float(np.linalg.eigvalsh(q).min())
        if floor < -PSD_TOLERANCE:
            raise ModelError(f"Covariance rate at t={t} has eigenvalue {floor:.3g}")
    return GaussianMartingaleModel(
        names=[f.name for f in observables],
        grid=kernel.grid.copy(),
        rates=rates,
        accumulated=accumulate(kernel.grid, rates),
    )


def psd_sqrt(matrix: FloatArray, tolerance: float = PSD_TOLERANCE) -> FloatArray:
    """Symmetric square root; eigenvalues in [-tolerance, 0) are clamped to 0."""
    sym = 0.5 * (matrix + matrix.T)
    values, vectors = np.linalg.eigh(sym)
    if values.size and values.min() < -tolerance:
        raise ModelError(f"Matrix is not PSD: smallest eigenvalue {values.min():.3g}")
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def leading_indices(modes: int, dim: int) -> list[tuple[int, ...]]:
    """First ``modes`` multi-indices ordered by |a|, then lexicographically."""
    if modes < 1:
        raise InvalidInputError(f"Galerkin truncation needs >= 1 mode, got {modes}")
    found: list[tuple[int, ...]] = []
    total = dim
    while len(found) < modes:
        level = [
            tuple(int(v) for v in row)
            for row in np.indices((total,) * dim).reshape(dim, -1).T + 1
            if int(np.sum(row)) == total
        ]
        found.extend(sorted(level))
        total += 1
    return found[:modes]


def galerkin_basis(modes: int, dom: SobolevDomain) -> list[BasisFunction]:
    return [BasisFunction(index, dom) for index in leading_indices(modes, dom.dim)]


@dataclass(frozen=True)
class Projection:
    coefficients: FloatArray
    residuals: FloatArray


def project_onto_basis(
    values: FloatArray,
    basis: Sequence[BasisFunction],
    points: FloatArray,
    weights: FloatArray,
) -> Projection:
    """L2(Theta) coefficients of each row of ``values`` on span{f_b}.

    ``values`` holds functions sampled at the quadrature ``points``; the
    relative L2 residual of every row is reported alongside.
    """
    values = np.atleast_2d(values)
    modes = np.vstack([f.value(points) for f in basis])
    dom = basis[0].domain
    scales = np.array([f.scale for f in basis])
    mass = dom.box**dom.dim * scales**2
    coefficients = (values * weights[None, :]) @ modes.T / mass[None, :]
    remainder = values - coefficients @ modes
    total = np.sqrt((values**2) @ weights)
    leftover = np.sqrt((remainder**2) @ weights)
    residuals = np.where(total > 0, leftover / np.where(total > 0, total, 1.0), 0.0)
    return Projection(coefficients, residuals)


def project_function(
    func: Callable[[FloatArray], FloatArray],
    basis: Sequence[BasisFunction],
    nodes: int = GALERKIN_NODES,
) -> Projection:
    points, weights = tensor_quadrature(basis[0].domain, nodes)
    return project_onto_basis(func(points), basis, points, weights)


@dataclass(frozen=True)
class DriftProjection:
    matrix: FloatArray
    residuals: FloatArray
    warnings: list[str] = field(default_factory=lambda: [])


def galerkin_drift(
    kernel: RKernel,
    s: float,
    basis: Sequence[BasisFunction],
    nodes: int = GALERKIN_NODES,
    quadrature: tuple[FloatArray, FloatArray] | None = None,
) -> DriftProjection:
    """Projected drift generator at time s; row a expands (B_s + C_s) f_a in span{f_b}.

    The generator output is cut off with the bump so it is compactly
    supported in Theta; it is unchanged on the compact core K.
    """
    dom = basis[0].domain
    points, weights = quadrature if quadrature is not None else tensor_quadrature(dom, nodes)
    snapshot = kernel.ref.snapshot_at(s)
    dist, act, alpha = kernel.dist, kernel.act, kernel.alpha
    residuals = dist.y - network_outputs(snapshot, dist.x, act)
    cutoff = BumpFunction(bump_radius(dom)).value(points)
    c, w = points[:, 0], points[:, 1:]
    u = w @ dist.x.T
    sig, dsig = act(u), act.derivative(u)
    rows: list[FloatArray] = []
    for f in basis:
        observable = f.observable()
        dc, dw = observable.gradient(c, w)
        transport = sig * dc[:, None] + (c[:, None] * dsig) * (dw @ dist.x.T)
        first, second = gradient_pairings(snapshot.c, snapshot.w, observable, dist.x, act)
        interaction = (c[:, None] * sig) * (first + second)[None, :]
        generator = alpha * ((transport * residuals[None, :] - interaction) @ dist.weights)
        rows.append(cutoff * generator)
    projection = project_onto_basis(np.vstack(rows), basis, points, weights)
    warnings = [
        f"mode {basis[a].index} at t={s:g}: projection residual {r:.3g}"
        for a, r in enumerate(projection.residuals.tolist())
        if r > PROJECTION_RESIDUAL_THRESHOLD
    ]
    for message in warnings:
        logger.warning("Galerkin accuracy: %s", message)
    return DriftProjection(projection.coefficients, projection.residuals, warnings)


def initial_covariance(snapshot: ParticleEnsemble, basis: Sequence[BasisFunction]) -> FloatArray:
    """(Sigma_0)_{ab} = <f_a f_b, mu-bar_0> - <f_a, mu-bar_0><f_b, mu-bar_0>."""
    values = np.vstack([f.value(snapshot.points()) for f in basis])
    means = accurate_column_means(values.T)
    centered = values - means[:, None]
    sigma = centered @ centered.T / snapshot.size
    return 0.5 * (sigma + sigma.T)


@dataclass
class GalerkinSystem:
    indices: list[tuple[int, ...]]
    domain: SobolevDomain
    grid: FloatArray
    drift: FloatArray
    sigma0: FloatArray
    martingale: GaussianMartingaleModel
    residuals: FloatArray
    warnings: list[str] = field(default_factory=lambda: [])

    @property
    def modes(self) -> int:
        return len(self.indices)

    @property
    def noise_rates(self) -> FloatArray:
        return self.martingale.rates


def assemble_galerkin_system(
    ref: MeanFieldTrajectory,
    modes: int,
    dom: SobolevDomain | None = None,
    nodes: int = GALERKIN_NODES,
) -> GalerkinSystem:
    """Sigma_0, G(s) and Q(s) for the first ``modes`` sine modes on the reference grid."""
    if dom is None:
        bound = max(snapshot.observed_bound for snapshot in ref.snapshots)
        dom = SobolevDomain.from_observed_bound(bound, 1 + ref.dist.input_dim)
    if dom.dim != 1 + ref.dist.input_dim:
        raise InvalidInputError(
            f"Domain dimension {dom.dim} does not match parameters of dimension {1 + ref.dist.input_dim}"
        )
    basis = galerkin_basis(modes, dom)
    kernel = RKernel(ref)
    quadrature = tensor_quadrature(dom, nodes)
    drifts: list[FloatArray] = []
    residuals: list[FloatArray] = []
    warnings: list[str] = []
    for s in ref.grid.tolist():
        projection = galerkin_drift(kernel, s, basis, nodes, quadrature)
        drifts.append(projection.matrix)
        residuals.append(projection.residuals)
        warnings.extend(projection.warnings)
    model = martingale_model(kernel, [f.observable() for f in basis])
    sigma0 = initial_covariance(ref.snapshot_at(0.0), basis)
    psd_sqrt(sigma0)  # raises ModelError unless PSD
    logger.info(
        "Assembled %d-mode Galerkin system on %d grid times (B=%.4g)",
        modes,
        ref.grid.size,
        dom.box,
    )
    return GalerkinSystem(
        indices=[f.index for f in basis],
        domain=dom,
        grid=ref.grid.copy(),
        drift=np.stack(drifts),
        sigma0=sigma0,
        martingale=model,
        residuals=np.vstack(residuals),
        warnings=warnings,
    )


def _substeps(grid: FloatArray, dt: float) -> list[int]:
    if not dt > 0:
        raise InvalidInputError(f"Time step must be > 0, got {dt}")
    counts: list[int] = []
    for gap in np.diff(grid).tolist():
        n = int(round(gap / dt))
        if n < 1 or abs(n * dt - gap) > GRID_MATCH_TOLERANCE * max(1.0, gap):
            raise InvalidInputError(f"dt={dt} does not divide grid spacing {gap}")
        counts.append(n)
    return counts


def _interval_averages(system: GalerkinSystem, i: int) -> tuple[FloatArray, FloatArray]:
    drift = 0.5 * (system.drift[i] + system.drift[i + 1])
    rate = 0.5 * (system.noise_rates[i] + system.noise_rates[i + 1])
    return drift, rate


@dataclass
class SpdePaths:
    indices: list[tuple[int, ...]]
    grid: FloatArray
    values: FloatArray

    @property
    def n_paths(self) -> int:
        return int(self.values.shape[1])

    def at(self, t: float) -> FloatArray:
        return self.values[grid_position(self.grid, t)]

    def covariance(self, t: float) -> FloatArray:
        return np.cov(self.at(t), rowvar=False, ddof=1).reshape(len(self.indices), len(self.indices))


def simulate_spde(
    system: GalerkinSystem, n_paths: int, dt: float = DEFAULT_SPDE_DT, seed: int = 0
) -> SpdePaths:
    """Euler-Maruyama paths of the Galerkin SDE, recorded on the system grid.

    G and Q are held at their interval averages inside each grid interval.
    """
    if n_paths < 1:
        raise InvalidInputError(f"Need at least one path, got {n_paths}")
    counts = _substeps(system.grid, dt)
    rng = stream(seed, StreamKind.SPDE, system.modes, n_paths)
    m = system.modes
    h = rng.standard_normal((n_paths, m)) @ psd_sqrt(system.sigma0).T
    recorded = [h.copy()]
    for i, count in enumerate(counts):
        drift, rate = _interval_averages(system, i)
        step = np.eye(m) + dt * drift
        noise = psd_sqrt(rate * dt)
        for _ in range(count):
            h = h @ step.T + rng.standard_normal((n_paths, m)) @ noise.T
        recorded.append(h.copy())
    return SpdePaths(list(system.indices), system.grid.copy(), np.stack(recorded))


def model_covariance(
    system: GalerkinSystem, t: float, dt: float = DEFAULT_SPDE_DT
) -> FloatArray:
    """Covariance of the Euler-Maruyama chain at t without sampling paths.

    P <- (I + dt G) P (I + dt G)^T + Q dt with the same interval averages.
    """
    stop = grid_position(system.grid, t)
    counts = _substeps(system.grid, dt)
    p = system.sigma0.copy()
    m = system.modes
    for i in range(stop):
        drift, rate = _interval_averages(system, i)
        step = np.eye(m) + dt * drift
        for _ in range(counts[i]):
            p = step @ p @ step.T + rate * dt
    return 0.5 * (p + p.T)


@dataclass(frozen=True)
class SensitivityReport:
    modes: int
    absolute: float
    relative: float


def truncation_sensitivity(
    coarse: GalerkinSystem, fine: GalerkinSystem, t: float, dt: float = DEFAULT_SPDE_DT
) -> SensitivityReport:
    """Change of the leading m x m covariance block when the truncation grows."""
    m = coarse.modes
    if fine.indices[:m] != coarse.indices:
        raise InvalidInputError("The finer system must extend the coarse system's modes")
    small = model_covariance(coarse, t, dt)
    large = model_covariance(fine, t, dt)[:m, :m]
    absolute = float(np.max(np.abs(large - small)))
    scale = float(np.max(np.abs(large)))
    return SensitivityReport(m, absolute, absolute / scale if scale > 0 else 0.0)

