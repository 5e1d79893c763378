import logging
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from .constants import (
    CHART_HEIGHT,
    CHART_WIDTH,
    DEFAULT_GALERKIN_MODES,
    DEFAULT_REFERENCE_SIZE,
    DEFAULT_SIGNIFICANCE,
    DEFAULT_SPDE_DT,
    DEFAULT_SPDE_PATHS,
    DEFAULT_THREADS,
    DEFAULT_TRUNCATION,
    GALERKIN_NODES,
    MIN_COVARIANCE_REPLICAS,
    QUADRATURE_INTERVALS,
)
from .core_model import RunConfig
from .exceptions import InvalidInputError
from .fluctuation import covariance_estimate, gaussianity_test, xi_dual_norm
from .formatting import (
    format_covariance,
    format_dual_norm,
    format_galerkin_system,
    format_meanfield_summary,
    format_normality,
    format_number,
    format_sgd_summary,
    print_lines,
)
from .harness import (
    ExperimentKind,
    ExperimentSpec,
    Scale,
    fluctuation_samples,
    report,
    run_experiment,
    run_seed,
    samples_frame,
)
from .limit_spde import (
    assemble_galerkin_system,
    model_covariance,
    simulate_spde,
    truncation_sensitivity,
)
from .meanfield import default_grid, integrate_meanfield, integrate_reference, meanfield_loss
from .observables import CoordinateObservable, NeuronOutput, Observable
from .persistence import (
    load_config,
    read_frame,
    save_config,
    save_matrices,
    snapshot_frame,
    write_frame,
    write_json,
)
from .sgd_sim import (
    SgdTrajectory,
    prelimit_qv_compensator,
    quadratic_variation,
    remainder_traces,
    run_sgd,
)
from .sobolev import SobolevDomain
from .visualization import (
    create_rate_chart,
    create_series_chart,
    validate_rate_data,
    validate_series_data,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def parse_grid(text: str | None) -> tuple[float, ...] | None:
    """Comma-separated times, e.g. '0,0.5,1'."""
    if text is None:
        return None
    try:
        values = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise InvalidInputError(f"Grid must be a comma-separated list of times, got '{text}'") from None
    if not values:
        raise InvalidInputError("Time grid must not be empty")
    return values


def resolve_config(
    config: Path | None, seed: int | None, n: int | None, alpha: float | None
) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    base = load_config(config) if config is not None else RunConfig()
    payload = base.to_dict()
    for key, value in (("seed", seed), ("width", n), ("alpha", alpha)):
        if value is not None:
            payload[key] = value
    return RunConfig.from_dict(payload)


def default_observables(config: RunConfig) -> list[Observable]:
    return [
        CoordinateObservable(0),
        NeuronOutput(config.dataset.x[0], config.activation_fn()),
    ]


def xi_norm_lines(trajectory: SgdTrajectory) -> list[str]:
    """Dual norm of sqrt(N)(mu^N_t - mu-tilde_t) against the self-coupled flow."""
    coupled = integrate_meanfield(
        trajectory.initial,
        trajectory.dist,
        trajectory.alpha,
        trajectory.act,
        trajectory.horizon,
        time_grid=trajectory.grid,
    )
    bound = max(
        max(s.observed_bound for s in trajectory.snapshots),
        max(s.observed_bound for s in coupled.snapshots),
    )
    domain = SobolevDomain.from_observed_bound(bound, 1 + trajectory.dist.input_dim)
    return [
        format_dual_norm(t, xi_dual_norm(trajectory, coupled, t, domain, DEFAULT_TRUNCATION))
        for t in trajectory.grid.tolist()
    ]


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-v) or debug detail (-vv)")
def main(verbose: int) -> None:
    """Mean-field SGD simulation and fluctuation analysis tools."""
    logging.basicConfig(
        level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)],
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", type=click.Path(exists=True, path_type=Path), help="Run config JSON file")
@click.option("--seed", type=int, help="Master seed (unsigned 64-bit)")
@click.option("--n", type=int, help="Number of neurons N")
@click.option("--alpha", type=float, help="Learning rate")
@click.option("--grid", help="Comma-separated snapshot times (default: 0, T/4, T/2, 3T/4, T)")
@click.option("--replica", default=0, help="Replica index (default: 0)")
@click.option("--xi-norm", is_flag=True, help="Also report the truncated dual norm of Xi_t")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=DEFAULT_THREADS,
    help="Accepted like the multi-cell commands; one trajectory always runs in this process",
)
@click.option("--out", type=click.Path(path_type=Path), help="Directory for snapshot and diagnostics CSV")
def simulate(
    config: Path | None,
    seed: int | None,
    n: int | None,
    alpha: float | None,
    grid: str | None,
    replica: int,
    xi_norm: bool,
    threads: int,
    out: Path | None,
) -> None:
    """Run one SGD trajectory and report its martingale diagnostics.

    The trajectory is sequential, so it runs single-process whatever --threads says.
    """
    if threads > 1:
        logger.debug("simulate runs one trajectory in-process; ignoring --threads=%d", threads)
    try:
        run_config = resolve_config(config, seed, n, alpha)
        times = parse_grid(grid)
        time_grid = default_grid(run_config.horizon) if times is None else np.array(times)
        observables = default_observables(run_config)
        trajectory = run_sgd(
            run_config,
            run_config.dataset,
            run_config.activation_fn(),
            time_grid,
            replica=replica,
            observables=observables,
        )
        traces = remainder_traces(trajectory, observables[0])
        print_lines(format_sgd_summary(trajectory, traces))
        if xi_norm:
            print_lines(xi_norm_lines(trajectory))

        if out is not None:
            diag = trajectory.diagnostics
            assert diag is not None
            rows = [
                {
                    "t": t,
                    "f": f.name,
                    "pairing": trajectory.pairing(f, t),
                    "martingale": diag.martingale(t, f.name),
                    "qv": quadratic_variation(diag, t, f.name),
                    "compensator": prelimit_qv_compensator(diag, t, f.name),
                }
                for t in trajectory.grid.tolist()
                for f in observables
            ]
            save_config(out / "config.json", run_config)
            snapshots = snapshot_frame(trajectory.grid.tolist(), trajectory.snapshots)
            write_frame(out / "snapshots.csv", snapshots)
            write_frame(out / "diagnostics.csv", pd.DataFrame(rows))
            click.echo(f"Snapshots and diagnostics written to {out}")

    except Exception as e:
        click.echo(f"Error running SGD simulation: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", type=click.Path(exists=True, path_type=Path), help="Run config JSON file")
@click.option("--seed", type=int, help="Master seed (unsigned 64-bit)")
@click.option(
    "--n",
    type=int,
    default=DEFAULT_REFERENCE_SIZE,
    help=f"Reference particles M (default: {DEFAULT_REFERENCE_SIZE})",
)
@click.option("--alpha", type=float, help="Learning rate")
@click.option("--grid", help="Comma-separated snapshot times")
@click.option("--step", type=float, help="RK4 step size h (default: 1e-3 T)")
@click.option("--out", type=click.Path(path_type=Path), help="Directory for snapshot CSV")
def meanfield(
    config: Path | None,
    seed: int | None,
    n: int,
    alpha: float | None,
    grid: str | None,
    step: float | None,
    out: Path | None,
) -> None:
    """Integrate the mean-field flow for an M-particle reference draw."""
    try:
        run_config = resolve_config(config, seed, None, alpha)
        reference = integrate_reference(run_config, run_config.dataset, n, parse_grid(grid), step)
        losses = meanfield_loss(reference).tolist()
        print_lines(format_meanfield_summary(reference, losses))

        if out is not None:
            snapshots = snapshot_frame(reference.grid.tolist(), reference.snapshots)
            write_frame(out / "snapshots.csv", snapshots)
            write_json(out / "meanfield.json", reference.metadata())
            click.echo(f"Reference snapshots written to {out}")

    except Exception as e:
        click.echo(f"Error integrating mean-field flow: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", type=click.Path(exists=True, path_type=Path), help="Run config JSON file")
@click.option("--seed", type=int, help="Master seed (unsigned 64-bit)")
@click.option("--n", type=int, multiple=True, help="Width N; repeat for a sweep")
@click.option("--alpha", type=float, help="Learning rate")
@click.option("--grid", help="Comma-separated snapshot times")
@click.option("--replicas", default=MIN_COVARIANCE_REPLICAS, help="Replicas per width")
@click.option("--observables", "n_observables", default=3, help="Number of sine-mode observables")
@click.option("--reference-size", default=DEFAULT_REFERENCE_SIZE, help="Reference particles M")
@click.option("--threads", default=DEFAULT_THREADS, help="Worker processes")
@click.option("--out", type=click.Path(path_type=Path), default=Path("fluct"), help="Output directory")
def fluct(
    config: Path | None,
    seed: int | None,
    n: tuple[int, ...],
    alpha: float | None,
    grid: str | None,
    replicas: int,
    n_observables: int,
    reference_size: int,
    threads: int,
    out: Path,
) -> None:
    """Sample eta = xi + z across replicas and write samples.csv."""
    try:
        run_config = resolve_config(config, seed, None, alpha)
        spec = ExperimentSpec(
            kind=ExperimentKind.CLT_GAUSS,
            out_dir=str(out),
            seeds=(run_config.seed,),
            widths=n or (run_config.width,),
            replicas=replicas,
            horizon=run_config.horizon,
            alpha=run_config.alpha,
            activation=run_config.activation,
            dataset=run_config.dataset,
            init_law=run_config.init_law,
            grid=parse_grid(grid),
            reference_size=reference_size,
            n_observables=n_observables,
            threads=threads,
        )
        state, results = run_seed(spec, run_config.seed)
        names = [f.name for f in state.observables]
        write_frame(out / "samples.csv", samples_frame(results, names, spec.time_grid))

        for width in spec.widths:
            samples = fluctuation_samples(results, names, spec.time_grid, width)
            click.echo(f"N={width}: {samples.replicas} replicas")
            click.echo(f"  max |eta - xi - z|: {format_number(samples.decomposition_error())}")
            last = samples.eta[:, -1, :]
            horizon = float(spec.time_grid[-1])
            for j, name in enumerate(names):
                mean = format_number(float(last[:, j].mean()))
                var = format_number(float(last[:, j].var(ddof=1)))
                click.echo(f"  {name} at t={horizon:g}: mean {mean}, var {var}")
            if samples.replicas >= MIN_COVARIANCE_REPLICAS:
                print_lines(format_covariance(covariance_estimate(samples, float(spec.time_grid[-1]))))
        failed = sum(1 for r in results if not r.ok)
        if failed:
            click.echo(f"Error: {failed} replica cells failed", err=True)
            sys.exit(1)

    except Exception as e:
        click.echo(f"Error sampling fluctuations: {e}", err=True)
        sys.exit(1)


@main.command("clt-test")
@click.argument("samples_file", type=click.Path(exists=True, path_type=Path))
@click.option("--t", "times", type=float, multiple=True, help="Times to test (default: all)")
@click.option(
    "--significance",
    default=DEFAULT_SIGNIFICANCE,
    help=f"Test level (default: {DEFAULT_SIGNIFICANCE})",
)
@click.option("--column", type=click.Choice(["eta", "xi", "z", "mart"]), default="eta")
def clt_test(samples_file: Path, times: tuple[float, ...], significance: float, column: str) -> None:
    """Kolmogorov-Smirnov test of replica samples against a Gaussian."""
    try:
        frame = read_frame(samples_file)
        rejected = 0
        for (width, t, name), group in frame.groupby(["N", "t", "f"], sort=True):
            if times and not any(abs(float(t) - s) <= 1e-9 for s in times):
                continue
            result = gaussianity_test(group[column].to_numpy(dtype=np.float64), significance)
            rejected += int(result.reject)
            click.echo(f"N={width} " + format_normality(f"{column}[{name}]", float(t), result))
        click.echo(f"Rejected: {rejected}")

    except Exception as e:
        click.echo(f"Error testing Gaussianity: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", type=click.Path(exists=True, path_type=Path), help="Run config JSON file")
@click.option("--seed", type=int, help="Master seed (unsigned 64-bit)")
@click.option("--alpha", type=float, help="Learning rate")
@click.option("--grid", help="Comma-separated reference times (default: 51 evenly spaced)")
@click.option("--reference-size", default=DEFAULT_REFERENCE_SIZE, help="Reference particles M")
@click.option("--modes", default=DEFAULT_GALERKIN_MODES, help=f"Galerkin modes m (default: {DEFAULT_GALERKIN_MODES})")
@click.option("--paths", default=DEFAULT_SPDE_PATHS, help=f"Sample paths (default: {DEFAULT_SPDE_PATHS})")
@click.option("--dt", default=DEFAULT_SPDE_DT, help=f"Euler-Maruyama step (default: {DEFAULT_SPDE_DT})")
@click.option("--nodes", default=GALERKIN_NODES, help="Quadrature nodes per dimension")
@click.option("--out", type=click.Path(path_type=Path), help="Directory for galerkin.npz and covariance CSV")
def spde(
    config: Path | None,
    seed: int | None,
    alpha: float | None,
    grid: str | None,
    reference_size: int,
    modes: int,
    paths: int,
    dt: float,
    nodes: int,
    out: Path | None,
) -> None:
    """Assemble and simulate the Galerkin-truncated limit equation."""
    try:
        run_config = resolve_config(config, seed, None, alpha)
        times = parse_grid(grid)
        if times is None:
            time_grid = np.linspace(0.0, run_config.horizon, QUADRATURE_INTERVALS + 1)
        else:
            time_grid = np.array(times)
        reference = integrate_reference(run_config, run_config.dataset, reference_size, time_grid)
        system = assemble_galerkin_system(reference, modes, nodes=nodes)
        finer = assemble_galerkin_system(reference, 2 * modes, system.domain, nodes)
        horizon = float(system.grid[-1])
        sensitivity = truncation_sensitivity(system, finer, horizon, dt)
        print_lines(format_galerkin_system(system, sensitivity))

        sampled = simulate_spde(system, paths, dt, run_config.seed)
        empirical = sampled.covariance(horizon)
        model = model_covariance(system, horizon, dt)
        click.echo(f"Path covariance at t={horizon:g} ({paths} paths) vs Lyapunov model:")
        for a in range(system.modes):
            cells = "  ".join(
                f"{format_number(float(empirical[a, b]))}/{format_number(float(model[a, b]))}"
                for b in range(system.modes)
            )
            click.echo(f"  {cells}")

        if out is not None:
            save_matrices(
                out / "galerkin.npz",
                {
                    "grid": system.grid,
                    "G": system.drift,
                    "Q": system.noise_rates,
                    "sigma0": system.sigma0,
                    "residuals": system.residuals,
                },
                {"modes": system.modes, "box": system.domain.box, "dt": dt},
            )
            rows = [
                {"a": a, "b": b, "paths": empirical[a, b], "model": model[a, b]}
                for a in range(system.modes)
                for b in range(system.modes)
            ]
            write_frame(out / "spde_covariance.csv", pd.DataFrame(rows))
            click.echo(f"Galerkin matrices written to {out}")

    except Exception as e:
        click.echo(f"Error simulating limit equation: {e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", type=click.Path(exists=True, path_type=Path), help="Experiment spec JSON file")
@click.option("--kind", type=click.Choice([str(k) for k in ExperimentKind]), help="Experiment kind")
@click.option("--scale", type=click.Choice([str(s) for s in Scale]), default=str(Scale.FULL))
@click.option("--seed", type=int, multiple=True, help="Master seed; repeat for several")
@click.option("--n", type=int, multiple=True, help="Width N; repeat for a sweep")
@click.option("--alpha", type=float, help="Learning rate")
@click.option("--grid", help="Comma-separated snapshot times")
@click.option("--threads", type=int, help="Worker processes")
@click.option("--out", type=click.Path(path_type=Path), help="Output directory")
def run(
    config: Path | None,
    kind: str | None,
    scale: str,
    seed: tuple[int, ...],
    n: tuple[int, ...],
    alpha: float | None,
    grid: str | None,
    threads: int | None,
    out: Path | None,
) -> None:
    """Run an acceptance experiment and write data files plus a manifest."""
    try:
        if config is not None:
            spec = ExperimentSpec.from_file(config)
        elif kind is not None:
            spec = ExperimentSpec.for_kind(kind, scale)
        else:
            raise InvalidInputError("Give --config or --kind")
        spec = spec.with_overrides(
            seeds=seed or None,
            widths=n or None,
            alpha=alpha,
            grid=parse_grid(grid),
            threads=threads,
            out_dir=None if out is None else str(out),
        )
        manifest = run_experiment(spec)
        _, lines = report(Path(spec.out_dir))
        print_lines(lines)
        if manifest.status != "ok" or any(line.startswith("FAIL") for line in lines):
            sys.exit(1)

    except Exception as e:
        click.echo(f"Error running experiment: {e}", err=True)
        sys.exit(1)


@main.command("report")
@click.argument("manifest", type=click.Path(exists=True, path_type=Path))
def report_command(manifest: Path) -> None:
    """Verify a run's file digests and summarize its checks."""
    try:
        _, lines = report(manifest)
        print_lines(lines)
        if any(line.startswith("FAIL") for line in lines):
            sys.exit(1)

    except Exception as e:
        click.echo(f"Error reading manifest: {e}", err=True)
        sys.exit(1)


@main.group()
def plot() -> None:
    """Visualization commands for plot-data CSV files."""
    pass


@plot.command("series")
@click.argument("file", type=click.Path(exists=True, path_type=Path))
@click.option("--series", help="Series to draw (default: all)")
@click.option("--width", default=CHART_WIDTH, help=f"Chart width in characters (default: {CHART_WIDTH})")
@click.option("--height", default=CHART_HEIGHT, help=f"Chart height in lines (default: {CHART_HEIGHT})")
def plot_series(file: Path, series: str | None, width: int, height: int) -> None:
    """Show plot-data series (y against x) as an ASCII graph."""
    try:
        frame = read_frame(file)

        error_msg = validate_series_data(frame, series)
        if error_msg:
            click.echo(f"Error: {error_msg}", err=True)
            sys.exit(1)

        click.echo(create_series_chart(frame, series, width, height))

    except Exception as e:
        click.echo(f"Error creating series chart: {e}", err=True)
        sys.exit(1)


@plot.command("rate")
@click.argument("file", type=click.Path(exists=True, path_type=Path))
@click.option("--series", required=True, help="Series to fit on log-log axes")
@click.option("--width", default=CHART_WIDTH, help=f"Chart width in characters (default: {CHART_WIDTH})")
@click.option("--height", default=CHART_HEIGHT, help=f"Chart height in lines (default: {CHART_HEIGHT})")
def plot_rate(file: Path, series: str, width: int, height: int) -> None:
    """Show a log-log rate fit of one plot-data series."""
    try:
        frame = read_frame(file)

        error_msg = validate_rate_data(frame, series)
        if error_msg:
            click.echo(f"Error: {error_msg}", err=True)
            sys.exit(1)

        click.echo(create_rate_chart(frame, series, width, height))

    except Exception as e:
        click.echo(f"Error creating rate chart: {e}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
