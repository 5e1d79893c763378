"""Experiment orchestration: replica cells on a process pool, statistics,
data files and a manifest with content digests.

A cell is one (master seed, width N, replica) SGD run. Cells share nothing
but the read-only reference trajectory installed in every worker, and their
results are collected in cell order so reruns write identical files.
"""

import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import UTC, datetime
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .constants import (
    CODE_VERSION,
    DECOMPOSITION_TOLERANCE,
    DEFAULT_ACTIVATION,
    DEFAULT_GALERKIN_MODES,
    DEFAULT_HORIZON,
    DEFAULT_LEARNING_RATE,
    DEFAULT_REFERENCE_SIZE,
    DEFAULT_SEED,
    DEFAULT_SIGNIFICANCE,
    DEFAULT_SPDE_DT,
    DEFAULT_SPDE_PATHS,
    DEFAULT_STEP_FRACTION,
    DEFAULT_THREADS,
    DEFAULT_TRUNCATION,
    GALERKIN_NODES,
    GAMMA_SLOPE_RANGE,
    GRID_FRACTIONS,
    GRID_MATCH_TOLERANCE,
    LLN_SLOPE_RANGE,
    MANIFEST_NAME,
    MIN_COVARIANCE_REPLICAS,
    NORMALITY_PASS_FRACTION,
    QUADRATURE_INTERVALS,
    QV_RTOL,
    SPDE_BLOCK,
    SPDE_RTOL,
    SPDE_SE_FACTOR,
    V_SLOPE_RANGE,
    VARIANCE_RTOL,
    XI_RATIO_MAX,
)
from .core_model import DataDistribution, FloatArray, InitLaw, RunConfig, default_dataset
from .exceptions import InvalidInputError, MeanFieldToolsError
from .fluctuation import (
    FluctuationSamples,
    covariance_estimate,
    covariance_from_matrix,
    eta_pairing,
    gamma_remainders,
    gaussianity_test,
    rate_fit,
    sample_variance_check,
    xi_dual_norm,
    xi_z_split,
)
from .limit_spde import (
    RKernel,
    assemble_galerkin_system,
    galerkin_basis,
    martingale_covariance,
    model_covariance,
    simulate_spde,
    truncation_sensitivity,
)
from .meanfield import Coupling, MeanFieldTrajectory, integrate_meanfield, integrate_reference
from .observables import Observable
from .persistence import (
    digest_files,
    payload_digest,
    plot_frame,
    read_json,
    save_matrices,
    verify_files,
    write_frame,
    write_json,
)
from .rng import validate_seed
from .sgd_sim import prelimit_qv_compensator, quadratic_variation, remainder_traces, run_sgd
from .sobolev import BasisObservable, SobolevDomain, dual_order

logger = logging.getLogger(__name__)


class ExperimentKind(StrEnum):
    LLN_RATE = "lln-rate"
    CLT_GAUSS = "clt-gauss"
    QV_MATCH = "qv-match"
    SPDE_COMPARE = "spde-compare"
    REMAINDER_SCALING = "remainder-scaling"
    XI_BOUND = "xi-bound"


class Scale(StrEnum):
    FULL = "full"
    SMOKE = "smoke"


_FULL_SIZES: dict[ExperimentKind, dict[str, Any]] = {
    ExperimentKind.LLN_RATE: {"widths": (250, 1000, 4000, 16000), "replicas": 64},
    ExperimentKind.CLT_GAUSS: {"widths": (4000,), "replicas": 500, "n_observables": 5},
    ExperimentKind.QV_MATCH: {"widths": (16000,), "replicas": 16, "n_observables": 2},
    ExperimentKind.SPDE_COMPARE: {"widths": (4000,), "replicas": 500},
    ExperimentKind.REMAINDER_SCALING: {"widths": (250, 1000, 4000, 16000), "replicas": 8},
    ExperimentKind.XI_BOUND: {"widths": (250, 1000, 4000), "replicas": 32},
}

_SMOKE_SIZES: dict[ExperimentKind, dict[str, Any]] = {
    ExperimentKind.LLN_RATE: {"widths": (20, 40, 80), "replicas": 4},
    ExperimentKind.CLT_GAUSS: {"widths": (40,), "replicas": 60, "n_observables": 3},
    ExperimentKind.QV_MATCH: {"widths": (40,), "replicas": 3, "n_observables": 2},
    ExperimentKind.SPDE_COMPARE: {
        "widths": (40,),
        "replicas": 40,
        "modes": 2,
        "spde_paths": 400,
    },
    ExperimentKind.REMAINDER_SCALING: {"widths": (20, 40, 80), "replicas": 2},
    ExperimentKind.XI_BOUND: {"widths": (20, 40, 80), "replicas": 2},
}

_SMOKE_COMMON: dict[str, Any] = {
    "reference_size": 400,
    "step_fraction": 0.01,
    "spde_dt": 0.01,
    "quadrature_nodes": 16,
    "truncation": 6,
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: ExperimentKind
    out_dir: str = "results"
    scale: Scale = Scale.FULL
    seeds: tuple[int, ...] = (DEFAULT_SEED,)
    widths: tuple[int, ...] = (1000,)
    replicas: int = 1
    horizon: float = DEFAULT_HORIZON
    alpha: float = DEFAULT_LEARNING_RATE
    activation: str = DEFAULT_ACTIVATION
    dataset: DataDistribution = field(default_factory=default_dataset)
    init_law: InitLaw = field(default_factory=InitLaw)
    grid: tuple[float, ...] | None = None
    reference_size: int = DEFAULT_REFERENCE_SIZE
    step_fraction: float = DEFAULT_STEP_FRACTION
    n_observables: int = 1
    modes: int = DEFAULT_GALERKIN_MODES
    spde_paths: int = DEFAULT_SPDE_PATHS
    spde_dt: float = DEFAULT_SPDE_DT
    quadrature_nodes: int = GALERKIN_NODES
    truncation: int = DEFAULT_TRUNCATION
    significance: float = DEFAULT_SIGNIFICANCE
    coupling: Coupling = Coupling.DRIVEN
    threads: int = DEFAULT_THREADS

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", ExperimentKind(self.kind))
            object.__setattr__(self, "scale", Scale(self.scale))
            object.__setattr__(self, "coupling", Coupling(self.coupling))
        except ValueError as e:
            raise InvalidInputError(str(e)) from e
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(t) for t in self.grid))
        if not self.widths or not self.seeds:
            raise InvalidInputError("Sweep lists (widths, seeds) must not be empty")
        if any(n < 1 for n in self.widths):
            raise InvalidInputError(f"Widths must be >= 1, got {self.widths}")
        for seed in self.seeds:
            validate_seed(seed)
        if self.replicas < 1 or self.threads < 1 or self.reference_size < 1:
            raise InvalidInputError("Replicas, threads and reference size must be >= 1")
        if self.n_observables < 1 or self.modes < 1 or self.spde_paths < 1:
            raise InvalidInputError("Observable, mode and path counts must be >= 1")
        if not self.horizon > 0 or not 0 < self.step_fraction <= 1:
            raise InvalidInputError("Need T > 0 and a step fraction in (0, 1]")
        if self.dataset.input_dim < 1:
            raise InvalidInputError("Dataset must have input dimension >= 1")
        grid = self.time_grid
        if grid.size == 0:
            raise InvalidInputError("Time grid must not be empty")
        if np.any(grid < 0) or np.any(grid > self.horizon * (1 + GRID_MATCH_TOLERANCE)):
            raise InvalidInputError(f"Time grid must lie in [0, {self.horizon}]")
        multiples = grid / self.step_size
        if np.any(np.abs(multiples - np.round(multiples)) > 1e-6):
            raise InvalidInputError(
                f"Grid times must be multiples of the mean-field step h={self.step_size}"
            )

    @property
    def time_grid(self) -> FloatArray:
        if self.grid is None:
            return np.array([fraction * self.horizon for fraction in GRID_FRACTIONS])
        return np.array(self.grid, dtype=np.float64)

    @property
    def step_size(self) -> float:
        return self.step_fraction * self.horizon

    @property
    def input_dim(self) -> int:
        return self.dataset.input_dim

    def run_config(self, width: int, seed: int) -> RunConfig:
        return RunConfig(
            width=width,
            horizon=self.horizon,
            alpha=self.alpha,
            seed=seed,
            input_dim=self.input_dim,
            activation=self.activation,
            dataset=self.dataset,
            replicas=self.replicas,
            init_law=self.init_law,
        )

    def with_overrides(self, **changes: Any) -> "ExperimentSpec":
        """Copy with the non-None entries of ``changes`` applied."""
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def for_kind(
        cls,
        kind: ExperimentKind | str,
        scale: Scale | str = Scale.FULL,
        out_dir: str = "results",
        **overrides: Any,
    ) -> "ExperimentSpec":
        """Acceptance-sized defaults for ``kind`` (or desk-sized with scale=smoke)."""
        kind = ExperimentKind(kind)
        scale = Scale(scale)
        values: dict[str, Any] = {}
        if scale is Scale.SMOKE:
            values.update(_SMOKE_COMMON)
            values.update(_SMOKE_SIZES[kind])
        else:
            values.update(_FULL_SIZES[kind])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(kind=kind, scale=scale, out_dir=out_dir, **values)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": str(self.kind),
            "out_dir": self.out_dir,
            "scale": str(self.scale),
            "seeds": list(self.seeds),
            "widths": list(self.widths),
            "replicas": self.replicas,
            "horizon": self.horizon,
            "alpha": self.alpha,
            "activation": self.activation,
            "dataset": self.dataset.to_dict(),
            "init_law": {
                "c_half_width": self.init_law.c_half_width,
                "w_half_width": self.init_law.w_half_width,
            },
            "grid": None if self.grid is None else list(self.grid),
            "reference_size": self.reference_size,
            "step_fraction": self.step_fraction,
            "n_observables": self.n_observables,
            "modes": self.modes,
            "spde_paths": self.spde_paths,
            "spde_dt": self.spde_dt,
            "quadrature_nodes": self.quadrature_nodes,
            "truncation": self.truncation,
            "significance": self.significance,
            "coupling": str(self.coupling),
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise InvalidInputError(f"Unknown experiment fields: {sorted(unknown)}")
        if "kind" not in payload:
            raise InvalidInputError("Experiment spec needs a 'kind'")
        values = dict(payload)
        if "dataset" in values:
            values["dataset"] = DataDistribution.from_dict(values["dataset"])
        if "init_law" in values:
            values["init_law"] = InitLaw(**values["init_law"])
        return cls(**values)

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentSpec":
        payload = read_json(path)
        if not isinstance(payload, dict):
            raise InvalidInputError(f"Experiment file {path} must hold a JSON object")
        return cls.from_dict(payload)  # type: ignore[arg-type]

    def to_file(self, path: Path) -> Path:
        return write_json(path, self.to_dict())

    def spec_hash(self) -> str:
        """Digest of everything that determines the outputs (threads excluded)."""
        payload = self.to_dict()
        payload.pop("threads")
        payload.pop("out_dir")
        return payload_digest(payload)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    tolerance: str
    files: list[str] = field(default_factory=lambda: [])
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Check":
        return cls(**payload)


@dataclass
class RunManifest:
    kind: str
    spec_hash: str
    seeds: list[int]
    version: str
    started: str
    finished: str = ""
    files: dict[str, str] = field(default_factory=lambda: {})
    checks: list[Check] = field(default_factory=lambda: [])
    metrics: dict[str, float] = field(default_factory=lambda: {})
    failed_cells: list[dict[str, Any]] = field(default_factory=lambda: [])
    status: str = "ok"

    def to_dict(self) -> dict[str, Any]:
        payload = dataclasses.asdict(self)
        payload["checks"] = [c.to_dict() for c in self.checks]
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunManifest":
        values = dict(payload)
        values["checks"] = [Check.from_dict(c) for c in values.get("checks", [])]
        try:
            return cls(**values)
        except TypeError as e:
            raise InvalidInputError(f"Malformed manifest: {e}") from e

    def write(self, out_dir: Path) -> Path:
        return write_json(out_dir / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if path.is_dir():
            path = path / MANIFEST_NAME
        payload = read_json(path)
        if not isinstance(payload, dict):
            raise InvalidInputError(f"Manifest {path} must hold a JSON object")
        return cls.from_dict(payload)  # type: ignore[arg-type]


@dataclass(frozen=True)
class CellTask:
    index: int
    seed: int
    width: int
    replica: int


@dataclass
class CellResult:
    task: CellTask
    eta: FloatArray
    xi: FloatArray
    z: FloatArray
    martingale: FloatArray
    qv: FloatArray
    compensator: FloatArray
    xi_norms: FloatArray
    v_sup: float = math.nan
    r1_sup: float = math.nan
    gamma: float = math.nan
    gamma_sup: float = math.nan
    support_violations: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class WorkerState:
    spec: ExperimentSpec
    reference: MeanFieldTrajectory
    observables: list[Observable]
    domain: SobolevDomain


_WORKER_STATE: WorkerState | None = None


def _install_worker_state(state: WorkerState) -> None:
    """Pool initializer: every worker keeps one copy of the shared reference."""
    global _WORKER_STATE
    _WORKER_STATE = state


def _empty_result(task: CellTask, times: int, funcs: int, error: str | None = None) -> CellResult:
    blank = np.full((times, funcs), np.nan)
    return CellResult(
        task,
        blank.copy(),
        blank.copy(),
        blank.copy(),
        blank.copy(),
        blank.copy(),
        blank.copy(),
        np.full(times, np.nan),
        error=error,
    )


def _simulate_cell(state: WorkerState, task: CellTask) -> CellResult:
    spec, ref, observables = state.spec, state.reference, state.observables
    kind = spec.kind
    config = spec.run_config(task.width, task.seed)
    act = config.activation_fn()
    grid = spec.time_grid
    diagnosed = kind in (ExperimentKind.QV_MATCH, ExperimentKind.REMAINDER_SCALING)
    sgd = run_sgd(
        config,
        spec.dataset,
        act,
        grid,
        replica=task.replica,
        observables=observables if diagnosed else (),
    )
    result = _empty_result(task, grid.size, len(observables))
    coupled = None
    if kind in (ExperimentKind.CLT_GAUSS, ExperimentKind.XI_BOUND):
        coupled = integrate_meanfield(
            sgd.initial,
            spec.dataset,
            spec.alpha,
            act,
            spec.horizon,
            spec.step_size,
            grid,
            driver=ref if spec.coupling is Coupling.DRIVEN else None,
        )
    root = math.sqrt(task.width)
    for k, t in enumerate(grid.tolist()):
        for j, f in enumerate(observables):
            result.eta[k, j] = eta_pairing(sgd, ref, f, t)
            if coupled is not None:
                result.xi[k, j], result.z[k, j] = xi_z_split(sgd, coupled, ref, f, t)
            if sgd.diagnostics is not None:
                result.martingale[k, j] = root * sgd.diagnostics.martingale(t, f.name)
                result.qv[k, j] = quadratic_variation(sgd.diagnostics, t, f.name)
                result.compensator[k, j] = prelimit_qv_compensator(sgd.diagnostics, t, f.name)
        if kind is ExperimentKind.XI_BOUND and coupled is not None:
            result.xi_norms[k] = xi_dual_norm(sgd, coupled, t, state.domain, spec.truncation).value
    if kind is ExperimentKind.REMAINDER_SCALING:
        traces = remainder_traces(sgd, observables[0])
        result.v_sup = traces.v_sup_continuum
        result.r1_sup = traces.r1_sup
        gamma = gamma_remainders(sgd, ref, observables[0])
        result.gamma = sum(gamma.terminal())
        result.gamma_sup = sum(gamma.sup())
    final = sgd.snapshots[int(np.argmax(grid))]
    result.support_violations = state.domain.support_violations(final.points())
    return result


def _run_cell(task: CellTask) -> CellResult:
    state = _WORKER_STATE
    if state is None:
        raise RuntimeError("Worker is not initialized; use initializer=_install_worker_state")
    try:
        return _simulate_cell(state, task)
    except (MeanFieldToolsError, ArithmeticError, ValueError) as e:
        logger.warning("Cell %s failed: %s", task, e)
        return _empty_result(task, state.spec.time_grid.size, len(state.observables), str(e))


def run_cells(state: WorkerState, tasks: Sequence[CellTask]) -> list[CellResult]:
    """Execute cells, inline for one thread, ordered by cell index either way."""
    if state.spec.threads == 1:
        _install_worker_state(state)
        return [_run_cell(task) for task in tasks]
    with ProcessPoolExecutor(
        max_workers=state.spec.threads,
        initializer=_install_worker_state,
        initargs=(state,),
    ) as pool:
        return list(pool.map(_run_cell, tasks))


def merge_grids(*grids: FloatArray) -> FloatArray:
    """Sorted union with near-duplicates collapsed."""
    merged = np.sort(np.concatenate(grids))
    keep = [float(merged[0])]
    for t in merged[1:].tolist():
        if t - keep[-1] > GRID_MATCH_TOLERANCE * max(1.0, abs(t)):
            keep.append(t)
    return np.array(keep)


def build_reference(spec: ExperimentSpec, seed: int) -> MeanFieldTrajectory:
    grid = spec.time_grid
    if spec.kind in (ExperimentKind.QV_MATCH, ExperimentKind.SPDE_COMPARE):
        grid = merge_grids(grid, np.linspace(0.0, spec.horizon, QUADRATURE_INTERVALS + 1))
    config = spec.run_config(spec.widths[0], seed)
    return integrate_reference(
        config, spec.dataset, spec.reference_size, grid, spec.step_size
    )


def experiment_domain(spec: ExperimentSpec, ref: MeanFieldTrajectory) -> SobolevDomain:
    dim = 1 + spec.input_dim
    bound = max(snapshot.observed_bound for snapshot in ref.snapshots)
    return SobolevDomain.from_observed_bound(bound, dim, order=dual_order(dim))


def experiment_observables(spec: ExperimentSpec, dom: SobolevDomain) -> list[Observable]:
    if spec.kind is ExperimentKind.XI_BOUND:
        return []
    count = spec.modes if spec.kind is ExperimentKind.SPDE_COMPARE else spec.n_observables
    return [BasisObservable(f) for f in galerkin_basis(count, dom)]


class _Outputs:
    """Writes data files under the run directory and remembers their names."""

    def __init__(self, out_dir: Path, prefix: str):
        self.out_dir = out_dir
        self.prefix = prefix
        self.names: list[str] = []

    def frame(self, name: str, frame: pd.DataFrame) -> str:
        relative = f"{self.prefix}{name}"
        write_frame(self.out_dir / relative, frame)
        self.names.append(relative)
        return relative

    def matrices(self, name: str, arrays: dict[str, Any], metadata: dict[str, Any]) -> str:
        relative = f"{self.prefix}{name}"
        save_matrices(self.out_dir / relative, arrays, metadata)
        self.names.append(relative)
        return relative


def fluctuation_samples(
    results: Sequence[CellResult], names: list[str], grid: FloatArray, width: int
) -> FluctuationSamples:
    chosen = [r for r in results if r.ok and r.task.width == width]
    if not chosen:
        empty = np.zeros((0, grid.size, len(names)))
        return FluctuationSamples(names, grid, width, empty, empty, empty, empty)
    return FluctuationSamples(
        names=names,
        grid=grid,
        width=width,
        eta=np.stack([r.eta for r in chosen]),
        xi=np.stack([r.xi for r in chosen]),
        z=np.stack([r.z for r in chosen]),
        martingale=np.stack([r.martingale for r in chosen]),
    )


def samples_frame(
    results: Sequence[CellResult], names: list[str], grid: FloatArray
) -> pd.DataFrame:
    rows: list[dict[str, Any]] = []
    for r in results:
        if not r.ok:
            continue
        for k, t in enumerate(grid.tolist()):
            for j, name in enumerate(names):
                rows.append(
                    {
                        "N": r.task.width,
                        "replica": r.task.replica,
                        "t": t,
                        "f": name,
                        "eta": r.eta[k, j],
                        "xi": r.xi[k, j],
                        "z": r.z[k, j],
                        "mart": r.martingale[k, j],
                    }
                )
    return pd.DataFrame(rows, columns=["N", "replica", "t", "f", "eta", "xi", "z", "mart"])


@dataclass
class _Context:
    spec: ExperimentSpec
    seed: int
    reference: MeanFieldTrajectory
    domain: SobolevDomain
    observables: list[Observable]
    results: list[CellResult]
    outputs: _Outputs
    checks: list[Check] = field(default_factory=lambda: [])
    metrics: dict[str, float] = field(default_factory=lambda: {})

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.observables]

    def grid_index(self, t: float) -> int | None:
        hits = np.flatnonzero(np.abs(self.spec.time_grid - t) <= GRID_MATCH_TOLERANCE * max(1.0, t))
        return int(hits[0]) if hits.size else None

    def ok_results(self, width: int) -> list[CellResult]:
        return [r for r in self.results if r.ok and r.task.width == width]

    def check(
        self,
        name: str,
        passed: bool,
        value: float,
        tolerance: str,
        files: list[str],
        detail: str = "",
    ) -> None:
        self.checks.append(
            Check(self.label(name), bool(passed), float(value), tolerance, files, detail)
        )

    def label(self, name: str) -> str:
        return name if len(self.spec.seeds) == 1 else f"{name} [seed {self.seed}]"


def _mean_and_se(values: FloatArray) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), math.nan
    return float(values.mean()), float(np.std(values, ddof=1) / math.sqrt(values.size))


def _range_label(bounds: tuple[float, float]) -> str:
    return f"[{bounds[0]:g}, {bounds[1]:g}]"


def _slope_check(
    ctx: _Context,
    name: str,
    widths: Sequence[int],
    values: Sequence[float],
    bounds: tuple[float, float],
    files: list[str],
) -> None:
    try:
        fit = rate_fit(widths, values)
    except InvalidInputError as e:
        ctx.check(name, False, math.nan, _range_label(bounds), files, str(e))
        return
    ctx.metrics[f"{name} r2"] = fit.r_squared
    ctx.check(name, bounds[0] <= fit.slope <= bounds[1], fit.slope, _range_label(bounds), files)


def _analyze_lln(ctx: _Context) -> None:
    spec = ctx.spec
    last = int(np.argmax(spec.time_grid))
    rows: list[tuple[str, float, float, float]] = []
    widths: list[int] = []
    means: list[float] = []
    for width in spec.widths:
        chosen = ctx.ok_results(width)
        if not chosen:
            continue
        errors = np.array([abs(r.eta[last, 0]) / math.sqrt(width) for r in chosen])
        mean, se = _mean_and_se(errors)
        widths.append(width)
        means.append(mean)
        rows.append(("lln", float(width), mean, se))
    data = ctx.outputs.frame("lln_rate.csv", plot_frame(rows))
    _slope_check(ctx, "lln-rate slope", widths, means, LLN_SLOPE_RANGE, [data])


def _normality_rows(
    ctx: _Context, samples: FluctuationSamples, t: float, k: int
) -> tuple[list[dict[str, Any]], int]:
    rows: list[dict[str, Any]] = []
    passes = 0
    for j, name in enumerate(ctx.names):
        row: dict[str, Any] = {"N": samples.width, "t": t, "f": name}
        try:
            result = gaussianity_test(samples.eta[:, k, j], ctx.spec.significance)
        except MeanFieldToolsError as e:
            row.update(statistic=math.nan, p_value=math.nan, reject=True, note=str(e))
        else:
            passes += 0 if result.reject else 1
            row.update(
                statistic=result.statistic, p_value=result.p_value, reject=result.reject, note=""
            )
        rows.append(row)
    return rows, passes


def _analyze_clt(ctx: _Context) -> None:
    spec = ctx.spec
    needed = math.ceil(NORMALITY_PASS_FRACTION * len(ctx.names))
    for width in spec.widths:
        samples = fluctuation_samples(ctx.results, ctx.names, spec.time_grid, width)
        suffix = f" (N={width})"
        if samples.replicas == 0:
            ctx.check(f"clt samples{suffix}", False, 0.0, ">= 1 replica", [], "every cell failed")
            continue
        rows: list[dict[str, Any]] = []
        tallies: list[tuple[float, int]] = []
        for t in (spec.horizon / 2, spec.horizon):
            k = ctx.grid_index(t)
            if k is None:
                continue
            found, passes = _normality_rows(ctx, samples, t, k)
            rows.extend(found)
            tallies.append((t, passes))
        normality = ctx.outputs.frame(
            f"normality_N{width}.csv",
            pd.DataFrame(
                rows, columns=["N", "t", "f", "statistic", "p_value", "reject", "note"]
            ),
        )
        for t, passes in tallies:
            ctx.check(
                f"gaussianity t={t:g}{suffix}",
                passes >= needed,
                passes,
                f">= {needed} of {len(ctx.names)}",
                [normality],
            )

        if ctx.grid_index(0.0) is not None and samples.replicas >= 2:
            check = sample_variance_check(samples, ctx.observables[0], ctx.reference)
            if check.predicted > 0:
                relative = abs(check.sample_variance - check.predicted) / check.predicted
            else:
                relative = math.inf
            variance = ctx.outputs.frame(
                f"variance_N{width}.csv",
                pd.DataFrame(
                    [
                        {
                            "N": width,
                            "f": ctx.names[0],
                            "sample_variance": check.sample_variance,
                            "predicted": check.predicted,
                            "standard_error": check.standard_error,
                            "relative_error": relative,
                        }
                    ]
                ),
            )
            ctx.check(
                f"initial variance{suffix}",
                relative <= VARIANCE_RTOL,
                relative,
                f"<= {VARIANCE_RTOL:g} relative",
                [variance],
            )

        error = samples.decomposition_error()
        ctx.check(
            f"eta = xi + z{suffix}",
            error <= DECOMPOSITION_TOLERANCE,
            error,
            f"<= {DECOMPOSITION_TOLERANCE:g}",
            [],
        )
        if samples.replicas >= MIN_COVARIANCE_REPLICAS:
            cov = covariance_estimate(samples, spec.horizon)
            table = [
                {"f_i": a, "f_j": b, "cov": cov.matrix[i, j], "se": cov.standard_errors[i, j]}
                for i, a in enumerate(cov.names)
                for j, b in enumerate(cov.names)
            ]
            ctx.outputs.frame(f"covariance_N{width}.csv", pd.DataFrame(table))


def _analyze_qv(ctx: _Context) -> None:
    spec = ctx.spec
    kernel = RKernel(ctx.reference)
    last = int(np.argmax(spec.time_grid))
    rows: list[dict[str, Any]] = []
    pending: list[tuple[str, float]] = []
    for width in spec.widths:
        chosen = ctx.ok_results(width)
        if not chosen:
            continue
        for j, f in enumerate(ctx.observables):
            predicted = martingale_covariance(kernel, spec.horizon, f, f)
            observed = float(np.mean([r.qv[last, j] for r in chosen]))
            compensator = float(np.mean([r.compensator[last, j] for r in chosen]))
            relative = abs(observed - predicted) / predicted if predicted > 0 else math.inf
            rows.append(
                {
                    "N": width,
                    "f": f.name,
                    "qv_mean": observed,
                    "compensator_mean": compensator,
                    "predicted": predicted,
                    "relative_error": relative,
                }
            )
            pending.append((f"quadratic variation {f.name} (N={width})", relative))
    columns = ["N", "f", "qv_mean", "compensator_mean", "predicted", "relative_error"]
    table = ctx.outputs.frame("qv.csv", pd.DataFrame(rows, columns=columns))
    for name, relative in pending:
        ctx.check(name, relative <= QV_RTOL, relative, f"<= {QV_RTOL:g} relative", [table])


def _analyze_spde(ctx: _Context) -> None:
    spec = ctx.spec
    horizon = spec.horizon
    system = assemble_galerkin_system(ctx.reference, spec.modes, ctx.domain, spec.quadrature_nodes)
    finer = assemble_galerkin_system(
        ctx.reference, 2 * spec.modes, ctx.domain, spec.quadrature_nodes
    )
    paths = simulate_spde(system, spec.spde_paths, spec.spde_dt, ctx.seed)
    path_cov = covariance_from_matrix(paths.at(horizon))
    model = model_covariance(system, horizon, spec.spde_dt)
    sensitivity = truncation_sensitivity(system, finer, horizon, spec.spde_dt)
    ctx.metrics["truncation sensitivity (absolute)"] = sensitivity.absolute
    ctx.metrics["truncation sensitivity (relative)"] = sensitivity.relative
    ctx.metrics["projection warnings"] = float(len(system.warnings))
    archive = ctx.outputs.matrices(
        "galerkin.npz",
        {
            "grid": system.grid,
            "G": system.drift,
            "Q": system.noise_rates,
            "C": system.martingale.accumulated,
            "sigma0": system.sigma0,
            "residuals": system.residuals,
            "indices": np.array(system.indices),
        },
        {
            "modes": system.modes,
            "box": ctx.domain.box,
            "order": ctx.domain.order,
            "dt": spec.spde_dt,
        },
    )
    block = min(SPDE_BLOCK, spec.modes)
    for width in spec.widths:
        samples = fluctuation_samples(ctx.results, ctx.names, spec.time_grid, width)
        if samples.replicas < MIN_COVARIANCE_REPLICAS:
            ctx.check(
                f"spde covariance (N={width})",
                False,
                math.nan,
                f">= {MIN_COVARIANCE_REPLICAS} replicas",
                [archive],
                f"only {samples.replicas} replicas",
            )
            continue
        replica_cov = covariance_estimate(samples, horizon)
        rows: list[dict[str, Any]] = []
        worst = 0.0
        passed = True
        for a in range(block):
            for b in range(block):
                target = replica_cov.matrix[a, b]
                combined = math.hypot(
                    replica_cov.standard_errors[a, b], path_cov.standard_errors[a, b]
                )
                tolerance = max(SPDE_RTOL * abs(target), SPDE_SE_FACTOR * combined)
                gap = abs(path_cov.matrix[a, b] - target)
                passed = passed and gap <= tolerance
                worst = max(worst, gap / tolerance if tolerance > 0 else math.inf)
                rows.append(
                    {
                        "a": a,
                        "b": b,
                        "paths": path_cov.matrix[a, b],
                        "model": model[a, b],
                        "replicas": target,
                        "tolerance": tolerance,
                    }
                )
        table = ctx.outputs.frame(f"spde_covariance_N{width}.csv", pd.DataFrame(rows))
        ctx.check(
            f"spde covariance {block}x{block} (N={width})",
            passed,
            worst,
            f"max({SPDE_RTOL:g} rel, {SPDE_SE_FACTOR:g} SE)",
            [table, archive],
            "value is the worst gap/tolerance ratio",
        )


def _analyze_remainders(ctx: _Context) -> None:
    rows: list[tuple[str, float, float, float]] = []
    widths: list[int] = []
    v_means: list[float] = []
    g_means: list[float] = []
    for width in ctx.spec.widths:
        chosen = ctx.ok_results(width)
        if not chosen:
            continue
        series: dict[str, Callable[[CellResult], float]] = {
            "V_sup": lambda r: r.v_sup,
            "R1_sup": lambda r: r.r1_sup,
            "gamma": lambda r: r.gamma,
            "gamma_sup": lambda r: r.gamma_sup,
        }
        means: dict[str, float] = {}
        for label, pick in series.items():
            values = np.array([pick(r) for r in chosen])
            means[label], se = _mean_and_se(values)
            rows.append((label, float(width), means[label], se))
        widths.append(width)
        v_means.append(means["V_sup"])
        g_means.append(means["gamma"])
    data = ctx.outputs.frame("remainders.csv", plot_frame(rows))
    _slope_check(ctx, "V remainder slope", widths, v_means, V_SLOPE_RANGE, [data])
    _slope_check(ctx, "gamma remainder slope", widths, g_means, GAMMA_SLOPE_RANGE, [data])


def _analyze_xi(ctx: _Context) -> None:
    spec = ctx.spec
    rows: list[tuple[str, float, float, float]] = []
    pending: list[tuple[float, list[float]]] = []
    for t in (spec.horizon / 2, spec.horizon):
        k = ctx.grid_index(t)
        if k is None:
            continue
        means: list[float] = []
        for width in spec.widths:
            chosen = ctx.ok_results(width)
            if not chosen:
                continue
            values = np.array([r.xi_norms[k] for r in chosen])
            mean, se = _mean_and_se(values)
            means.append(mean)
            rows.append((f"t={t:g}", float(width), mean, se))
        pending.append((t, means))
    data = ctx.outputs.frame("xi_bound.csv", plot_frame(rows))
    for t, means in pending:
        if len(means) < 2 or min(means) <= 0:
            ctx.check(
                f"xi bound t={t:g}",
                False,
                math.nan,
                f"<= {XI_RATIO_MAX:g}",
                [data],
                "not enough widths",
            )
            continue
        ratio = max(means) / min(means)
        ctx.check(f"xi bound t={t:g}", ratio <= XI_RATIO_MAX, ratio, f"<= {XI_RATIO_MAX:g}", [data])


_ANALYSES: dict[ExperimentKind, Callable[[_Context], None]] = {
    ExperimentKind.LLN_RATE: _analyze_lln,
    ExperimentKind.CLT_GAUSS: _analyze_clt,
    ExperimentKind.QV_MATCH: _analyze_qv,
    ExperimentKind.SPDE_COMPARE: _analyze_spde,
    ExperimentKind.REMAINDER_SCALING: _analyze_remainders,
    ExperimentKind.XI_BOUND: _analyze_xi,
}


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def run_seed(spec: ExperimentSpec, seed: int) -> tuple[WorkerState, list[CellResult]]:
    """Reference flow, observables and every (width, replica) cell for one master seed."""
    logger.info("Integrating reference (M=%d) for seed %d", spec.reference_size, seed)
    reference = build_reference(spec, seed)
    domain = experiment_domain(spec, reference)
    observables = experiment_observables(spec, domain)
    cells = [(width, replica) for width in spec.widths for replica in range(spec.replicas)]
    tasks = [CellTask(index, seed, width, replica) for index, (width, replica) in enumerate(cells)]
    state = WorkerState(spec, reference, observables, domain)
    logger.info("Running %d cells for %s", len(tasks), spec.kind)
    return state, run_cells(state, tasks)


def run_experiment(spec: ExperimentSpec) -> RunManifest:
    """Run every cell of ``spec``, write its data files and a manifest."""
    out_dir = Path(spec.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidInputError(f"Output directory {out_dir} is not writable: {e}") from e
    manifest = RunManifest(
        kind=str(spec.kind),
        spec_hash=spec.spec_hash(),
        seeds=list(spec.seeds),
        version=CODE_VERSION,
        started=_now(),
    )
    files = [spec.to_file(out_dir / "spec.json").name]
    for seed in spec.seeds:
        prefix = "" if len(spec.seeds) == 1 else f"seed-{seed}/"
        state, results = run_seed(spec, seed)
        reference, domain, observables = state.reference, state.domain, state.observables
        outputs = _Outputs(out_dir, prefix)
        if observables:
            names = [f.name for f in observables]
            outputs.frame("samples.csv", samples_frame(results, names, spec.time_grid))
        ctx = _Context(spec, seed, reference, domain, observables, results, outputs)
        _ANALYSES[spec.kind](ctx)
        violations = sum(r.support_violations for r in results if r.ok)
        ctx.metrics["support violations"] = float(violations)
        if violations:
            logger.warning(
                "%d particles left K = [-%.4g, %.4g]^%d",
                violations,
                domain.support_bound,
                domain.support_bound,
                domain.dim,
            )
        manifest.checks.extend(ctx.checks)
        for key, value in ctx.metrics.items():
            manifest.metrics[ctx.label(key)] = value
        manifest.failed_cells.extend(
            {"seed": r.task.seed, "N": r.task.width, "replica": r.task.replica, "error": r.error}
            for r in results
            if not r.ok
        )
        files.extend(outputs.names)
    manifest.files = digest_files(out_dir, files)
    manifest.status = "failed" if manifest.failed_cells else "ok"
    manifest.finished = _now()
    manifest.write(out_dir)
    logger.info("Experiment %s finished with status %s", spec.kind, manifest.status)
    return manifest


def report(manifest_path: Path) -> tuple[RunManifest, list[str]]:
    """Verify every digest in the manifest, then render the summary lines."""
    from .formatting import format_manifest_report

    manifest = RunManifest.load(manifest_path)
    root = manifest_path if manifest_path.is_dir() else manifest_path.parent
    verify_files(root, manifest.files)
    return manifest, format_manifest_report(manifest, root)
