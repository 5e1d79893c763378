"""Fluctuation pairings <f, eta^N_t> and the statistics run on them.

eta^N = sqrt(N)(mu^N - mu-bar) splits into Xi^N = sqrt(N)(mu^N - mu-tilde^N),
measured against the coupled flow sharing the SGD initial particles, and
Z^N = sqrt(N)(mu-tilde^N - mu-bar), measured against the large reference.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy import stats  # type: ignore[import-untyped]
from scipy.integrate import cumulative_trapezoid  # type: ignore[import-untyped]

from .constants import (
    DEFAULT_SIGNIFICANCE,
    MIN_COVARIANCE_REPLICAS,
    MIN_NORMALITY_SAMPLES,
    MIN_RATE_POINTS,
)
from .core_model import FloatArray, accurate_mean, accurate_sum, network_outputs, pair_measure
from .exceptions import DegenerateInputError, GridRangeError, InvalidInputError
from .meanfield import MeanFieldTrajectory, meanfield_pairing
from .observables import ConstantObservable, Observable, gradient_pairings
from .sgd_sim import SgdTrajectory, grid_position
from .sobolev import DualNormReport, SignedMeasure, SobolevDomain, dual_norm_truncated

logger = logging.getLogger(__name__)


@dataclass
class FluctuationSamples:
    """Cross-replica samples indexed [replica, time, observable]."""

    names: list[str]
    grid: FloatArray
    width: int
    eta: FloatArray
    xi: FloatArray
    z: FloatArray
    martingale: FloatArray

    @property
    def replicas(self) -> int:
        return int(self.eta.shape[0])

    def column(self, f: str | int) -> int:
        if isinstance(f, int):
            return f
        try:
            return self.names.index(f)
        except ValueError:
            raise InvalidInputError(f"No samples for observable '{f}'") from None

    def time_index(self, t: float) -> int:
        return grid_position(self.grid, t)

    def at(self, t: float, f: str | int) -> FloatArray:
        return self.eta[:, self.time_index(t), self.column(f)]

    def decomposition_error(self) -> float:
        if self.eta.size == 0:
            return 0.0
        return float(np.nanmax(np.abs(self.eta - self.xi - self.z)))

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (replica, t, observable)."""
        replicas, times, funcs = self.eta.shape
        r, k, j = np.meshgrid(
            np.arange(replicas), np.arange(times), np.arange(funcs), indexing="ij"
        )
        return pd.DataFrame(
            {
                "replica": r.ravel(),
                "t": self.grid[k.ravel()],
                "f": np.asarray(self.names, dtype=object)[j.ravel()],
                "eta": self.eta.ravel(),
                "xi": self.xi.ravel(),
                "z": self.z.ravel(),
                "martingale": self.martingale.ravel(),
            }
        )


def eta_pairing(
    sgd: SgdTrajectory, ref: MeanFieldTrajectory, f: Observable, t: float
) -> float:
    """sqrt(N)(<f, mu^N_t> - <f, mu-bar_t>)."""
    return math.sqrt(sgd.width) * (sgd.pairing(f, t) - meanfield_pairing(ref, f, t))


def check_coupling(sgd: SgdTrajectory, coupled: MeanFieldTrajectory) -> None:
    if coupled.size != sgd.width or not coupled.initial.same_particles(sgd.initial):
        raise InvalidInputError(
            "Coupled mean-field run does not share the SGD run's initial particles"
        )


def xi_z_split(
    sgd: SgdTrajectory,
    coupled: MeanFieldTrajectory,
    ref: MeanFieldTrajectory,
    f: Observable,
    t: float,
) -> tuple[float, float]:
    check_coupling(sgd, coupled)
    root = math.sqrt(sgd.width)
    particle = sgd.pairing(f, t)
    tilde = meanfield_pairing(coupled, f, t)
    return root * (particle - tilde), root * (tilde - meanfield_pairing(ref, f, t))


def mass_defect(sgd: SgdTrajectory, ref: MeanFieldTrajectory, t: float) -> float:
    """<1, eta^N_t>; zero whenever both sides are probability measures."""
    return eta_pairing(sgd, ref, ConstantObservable(1.0), t)


def collect_samples(
    runs: Sequence[SgdTrajectory],
    ref: MeanFieldTrajectory,
    observables: Sequence[Observable],
    grid: ArrayLike,
    coupled: Sequence[MeanFieldTrajectory] | None = None,
) -> FluctuationSamples:
    """Assemble eta, Xi, Z and sqrt(N) M samples from finished replicas."""
    if not runs:
        raise InvalidInputError("At least one replica is required")
    if coupled is not None and len(coupled) != len(runs):
        raise InvalidInputError("Need one coupled flow per replica")
    times = np.asarray(grid, dtype=np.float64).reshape(-1)
    width = runs[0].width
    shape = (len(runs), times.size, len(observables))
    eta, xi, z, mart = (np.full(shape, np.nan) for _ in range(4))
    root = math.sqrt(width)
    for r, run in enumerate(runs):
        if run.width != width:
            raise InvalidInputError("All replicas must share the width N")
        for k, t in enumerate(times.tolist()):
            for j, f in enumerate(observables):
                eta[r, k, j] = eta_pairing(run, ref, f, t)
                if coupled is not None:
                    xi[r, k, j], z[r, k, j] = xi_z_split(run, coupled[r], ref, f, t)
                diag = run.diagnostics
                if diag is not None and f.name in diag.names:
                    mart[r, k, j] = root * diag.martingale(t, f.name)
    return FluctuationSamples(
        names=[f.name for f in observables],
        grid=times,
        width=width,
        eta=eta,
        xi=xi,
        z=z,
        martingale=mart,
    )


@dataclass(frozen=True)
class NormalityReport:
    statistic: float
    p_value: float
    reject: bool
    samples: int
    significance: float


def gaussianity_test(
    samples: ArrayLike, significance: float = DEFAULT_SIGNIFICANCE
) -> NormalityReport:
    """One-sample KS test of the standardized samples against N(0, 1)."""
    values = np.asarray(samples, dtype=np.float64).reshape(-1)
    if values.size < MIN_NORMALITY_SAMPLES:
        raise InvalidInputError(
            f"Normality test needs >= {MIN_NORMALITY_SAMPLES} samples, got {values.size}"
        )
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("Samples contain non-finite values")
    if not 0 < significance < 1:
        raise InvalidInputError(f"Significance must lie in (0, 1), got {significance}")
    sd = float(np.std(values, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("Samples have zero variance")
    standardized = (values - accurate_mean(values)) / sd
    result = stats.kstest(standardized, "norm")
    p_value = float(result.pvalue)
    return NormalityReport(
        statistic=float(result.statistic),
        p_value=p_value,
        reject=p_value < significance,
        samples=int(values.size),
        significance=significance,
    )


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def rate_fit(widths: ArrayLike, errors: ArrayLike) -> RateFit:
    """Least-squares line through (log N, log error)."""
    n = np.asarray(widths, dtype=np.float64).reshape(-1)
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if n.shape != e.shape:
        raise InvalidInputError("Widths and errors must have the same length")
    if n.size < MIN_RATE_POINTS:
        raise InvalidInputError(f"Rate fit needs >= {MIN_RATE_POINTS} widths, got {n.size}")
    if np.any(e <= 0) or np.any(n <= 0):
        raise InvalidInputError("Rate fit needs positive widths and errors")
    fit = stats.linregress(np.log(n), np.log(e))
    return RateFit(float(fit.slope), float(fit.intercept), float(fit.rvalue) ** 2)


@dataclass(frozen=True)
class CovarianceEstimate:
    names: list[str]
    matrix: FloatArray
    standard_errors: FloatArray
    replicas: int


def covariance_from_matrix(values: ArrayLike, names: Sequence[str] | None = None) -> CovarianceEstimate:
    """Unbiased covariance of the columns with leave-one-out jackknife errors."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    r = x.shape[0]
    if r < MIN_COVARIANCE_REPLICAS:
        raise InvalidInputError(
            f"Covariance needs >= {MIN_COVARIANCE_REPLICAS} replicas, got {r}"
        )
    centered = x - x.mean(axis=0)
    scatter = centered.T @ centered
    matrix = scatter / (r - 1)
    outer = np.einsum("ri,rj->rij", centered, centered)
    leave_one_out = (scatter[None, :, :] - r / (r - 1) * outer) / (r - 2)
    spread = leave_one_out - leave_one_out.mean(axis=0)
    errors = np.sqrt((r - 1) / r * np.sum(spread**2, axis=0))
    labels = list(names) if names is not None else [f"f{j}" for j in range(x.shape[1])]
    return CovarianceEstimate(labels, matrix, errors, r)


def covariance_estimate(
    samples: FluctuationSamples, t: float, f_list: Sequence[str | int] | None = None
) -> CovarianceEstimate:
    columns = [samples.column(f) for f in f_list] if f_list else list(range(len(samples.names)))
    k = samples.time_index(t)
    values = samples.eta[:, k, columns]
    return covariance_from_matrix(values, [samples.names[j] for j in columns])


@dataclass(frozen=True)
class VarianceCheck:
    sample_variance: float
    predicted: float
    standard_error: float


def sample_variance_check(
    samples: FluctuationSamples, f: Observable, ref: MeanFieldTrajectory
) -> VarianceCheck:
    """t = 0 replica variance of <f, eta> against <f^2, mu-bar_0> - <f, mu-bar_0>^2."""
    values = samples.eta[:, samples.time_index(0.0), samples.column(f.name)]
    if values.size < 2:
        raise InvalidInputError("Variance check needs at least two replicas")
    initial = ref.snapshot_at(0.0)
    mean = pair_measure(initial, f)
    predicted = pair_measure(initial, lambda c, w: f(c, w) ** 2) - mean**2
    squares = (values - values.mean()) ** 2
    return VarianceCheck(
        sample_variance=float(np.var(values, ddof=1)),
        predicted=predicted,
        standard_error=float(np.std(squares, ddof=1) / math.sqrt(values.size)),
    )


def xi_dual_norm(
    sgd: SgdTrajectory,
    coupled: MeanFieldTrajectory,
    t: float,
    dom: SobolevDomain,
    a_max: int,
) -> DualNormReport:
    """Truncated ||Xi^N_t||_{-J} of the coupled difference measure."""
    check_coupling(sgd, coupled)
    eta = SignedMeasure.scaled_difference(
        sgd.snapshot_at(t), coupled.snapshot_at(t), math.sqrt(sgd.width)
    )
    return dual_norm_truncated(eta, dom, a_max)


@dataclass(frozen=True)
class GammaTraces:
    grid: FloatArray
    gamma1: FloatArray
    gamma2: FloatArray

    def sup(self) -> tuple[float, float]:
        return float(np.max(np.abs(self.gamma1))), float(np.max(np.abs(self.gamma2)))

    def terminal(self) -> tuple[float, float]:
        """|Gamma^1_T| and |Gamma^2_T| at the last grid time."""
        return abs(float(self.gamma1[-1])), abs(float(self.gamma2[-1]))


def gamma_remainders(
    sgd: SgdTrajectory, ref: MeanFieldTrajectory, f: Observable
) -> GammaTraces:
    """Quadratic-in-eta remainders integrated by trapezoid over the SGD grid.

    Gamma^1_t = -alpha/sqrt(N) int sum_m p_m <c sigma_m, eta><sigma_m d_c f, eta> ds
    and Gamma^2 uses <c sigma'_m x_m . grad_w f, eta> in the second factor.
    """
    grid = sgd.grid
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise GridRangeError("Remainder integration needs an increasing grid of >= 2 times")
    root = math.sqrt(sgd.width)
    dist, act = sgd.dist, sgd.act
    rate1: list[float] = []
    rate2: list[float] = []
    for t in grid.tolist():
        particles, reference = sgd.snapshot_at(t), ref.snapshot_at(t)
        output = root * (
            network_outputs(particles, dist.x, act) - network_outputs(reference, dist.x, act)
        )
        p_first, p_second = gradient_pairings(particles.c, particles.w, f, dist.x, act)
        r_first, r_second = gradient_pairings(reference.c, reference.w, f, dist.x, act)
        rate1.append(-sgd.alpha * accurate_sum(dist.weights * output * root * (p_first - r_first)))
        rate2.append(-sgd.alpha * accurate_sum(dist.weights * output * root * (p_second - r_second)))
    gamma1 = cumulative_trapezoid(np.array(rate1), grid, initial=0.0) / root
    gamma2 = cumulative_trapezoid(np.array(rate2), grid, initial=0.0) / root
    return GammaTraces(grid.copy(), np.asarray(gamma1), np.asarray(gamma2))
