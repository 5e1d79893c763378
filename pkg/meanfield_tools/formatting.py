import math
from pathlib import Path
from typing import TYPE_CHECKING

from .persistence import read_frame

if TYPE_CHECKING:
    from .fluctuation import CovarianceEstimate, NormalityReport, RateFit
    from .harness import Check, RunManifest
    from .limit_spde import GalerkinSystem, SensitivityReport
    from .meanfield import MeanFieldTrajectory
    from .sgd_sim import RemainderTraces, SgdTrajectory
    from .sobolev import DualNormReport


def format_number(value: float) -> str:
    """Compact scientific-aware rendering; NaN shows as 'n/a'."""
    if math.isnan(value):
        return "n/a"
    if value == 0 or 1e-3 <= abs(value) < 1e5:
        return f"{value:.4f}"
    return f"{value:.3e}"


def format_grid(grid: list[float]) -> str:
    return ", ".join(f"{t:g}" for t in grid)


def format_check(check: "Check") -> str:
    """One PASS/FAIL line with the measured value, tolerance and data files."""
    status = "PASS" if check.passed else "FAIL"
    line = f"{status} {check.name}: {format_number(check.value)} (want {check.tolerance})"
    if check.files:
        line += f" [{', '.join(check.files)}]"
    if check.detail:
        line += f" - {check.detail}"
    return line


def format_qv_table(root: Path) -> list[str]:
    frame = read_frame(root / "qv.csv")
    lines = ["Quadratic variation:", f"  {'N':>8}  {'f':<16} {'relative error':>14}"]
    for row in frame.itertuples(index=False):
        error = format_number(float(row.relative_error))
        lines.append(f"  {int(row.N):>8}  {str(row.f):<16} {error:>14}")
    return lines


def format_manifest_report(manifest: "RunManifest", root: Path) -> list[str]:
    """Format a verified run manifest into a list of display strings."""
    lines: list[str] = []

    lines.append(f"Experiment: {manifest.kind}")
    lines.append(f"Spec hash: {manifest.spec_hash[:16]}")
    lines.append(f"Seeds: {', '.join(str(s) for s in manifest.seeds)}")
    lines.append(f"Version: {manifest.version}")
    lines.append(f"Started: {manifest.started}")
    if manifest.finished:
        lines.append(f"Finished: {manifest.finished}")
    lines.append(f"Files: {len(manifest.files)} verified")

    lines.append("")

    for check in manifest.checks:
        lines.append(format_check(check))

    if manifest.kind == "qv-match" and "qv.csv" in manifest.files:
        lines.append("")
        lines.extend(format_qv_table(root))

    if manifest.metrics:
        lines.append("")
        lines.append("Metrics:")
        for name, value in sorted(manifest.metrics.items()):
            lines.append(f"  {name}: {format_number(value)}")

    if manifest.failed_cells:
        lines.append("")
        lines.append(f"Failed cells: {len(manifest.failed_cells)}")
        for cell in manifest.failed_cells:
            lines.append(
                f"FAIL cell seed={cell['seed']} N={cell['N']} replica={cell['replica']}: {cell['error']}"
            )

    lines.append("")
    lines.append(f"Status: {manifest.status}")
    return lines


def format_sgd_summary(
    trajectory: "SgdTrajectory", traces: "RemainderTraces | None" = None
) -> list[str]:
    lines = [
        f"SGD run: N={trajectory.width}, alpha={trajectory.alpha:g}, T={trajectory.horizon:g}",
        f"Steps: {trajectory.steps_executed}",
        f"Grid: {format_grid(trajectory.grid.tolist())}",
    ]
    final = trajectory.snapshots[-1]
    lines.append(f"Largest parameter at t={final.time:g}: {format_number(final.current_bound())}")
    if traces is not None:
        lines.append("")
        lines.append(f"sup |V_t|: {format_number(traces.v_sup_continuum)}")
        lines.append(f"sup R1: {format_number(traces.r1_sup)}")
        lines.append(f"sup R2: {format_number(traces.r2_sup)}")
        lines.append(f"Telescoping error: {format_number(traces.telescoping_error)}")
    return lines


def format_meanfield_summary(trajectory: "MeanFieldTrajectory", losses: list[float]) -> list[str]:
    lines = [
        f"Mean-field flow: M={trajectory.size}, {trajectory.scheme} h={trajectory.step_size:g}",
        f"Coupling: {trajectory.coupling}",
    ]
    for t, loss in zip(trajectory.grid.tolist(), losses):
        lines.append(f"  t={t:g}  loss={format_number(loss)}")
    return lines


def format_normality(name: str, t: float, report: "NormalityReport") -> str:
    verdict = "reject" if report.reject else "accept"
    return (
        f"{name} at t={t:g}: KS={report.statistic:.4f}, p={report.p_value:.4f}, "
        f"n={report.samples} ({verdict} at {report.significance:g})"
    )


def format_rate_fit(fit: "RateFit") -> str:
    return f"slope {fit.slope:.3f}, intercept {fit.intercept:.3f}, R^2 {fit.r_squared:.3f}"


def format_dual_norm(t: float, report: "DualNormReport") -> str:
    line = (
        f"||Xi_t||_(-{report.order}) at t={t:g}: {format_number(report.value)} "
        f"(A_max={report.a_max}, tail <= {format_number(report.tail_estimate)})"
    )
    if report.support_violations:
        line += f", {report.support_violations} atoms outside K"
    return line


def format_covariance(estimate: "CovarianceEstimate") -> list[str]:
    width = max(len(name) for name in estimate.names)
    lines = [f"Covariance over {estimate.replicas} replicas:"]
    for i, name in enumerate(estimate.names):
        cells = "  ".join(
            f"{format_number(float(estimate.matrix[i, j])):>10}" for j in range(len(estimate.names))
        )
        lines.append(f"  {name:<{width}}  {cells}")
    return lines


def format_galerkin_system(
    system: "GalerkinSystem", sensitivity: "SensitivityReport | None" = None
) -> list[str]:
    lines = [
        f"Galerkin system: m={system.modes}, D={system.domain.dim}, B={system.domain.box:.4g}",
        f"Grid points: {system.grid.size}",
        f"Largest projection residual: {format_number(float(system.residuals.max()))}",
    ]
    for warning in system.warnings:
        lines.append(f"Warning: {warning}")
    if sensitivity is not None:
        lines.append(
            f"Truncation m -> {2 * sensitivity.modes}: change {format_number(sensitivity.absolute)} "
            f"({format_number(sensitivity.relative)} relative)"
        )
    return lines


def print_lines(lines: list[str]) -> None:
    """Print formatted lines to stdout."""
    import click

    for line in lines:
        click.echo(line)
