import math

import asciichartpy as asciichart  # type: ignore[import-untyped]
import numpy as np
import pandas as pd

from .constants import CHART_HEIGHT, CHART_WIDTH, MIN_RATE_POINTS
from .fluctuation import rate_fit
from .formatting import format_number, format_rate_fit

PLOT_COLUMNS = ("series", "x", "y", "err")


def downsample_series(
    points: list[tuple[float, float]], target_points: int
) -> list[tuple[float, float]]:
    """Downsample (x, y) data to a target number of points."""
    if len(points) <= target_points:
        return points

    # Simple even downsampling
    step = len(points) / target_points
    sampled_indices: list[int] = []

    for i in range(target_points):
        index = int(i * step)
        if index < len(points):
            sampled_indices.append(index)

    # Ensure we include the last point
    if sampled_indices[-1] != len(points) - 1:
        sampled_indices[-1] = len(points) - 1

    return [points[i] for i in sampled_indices]


def series_points(frame: pd.DataFrame, series: str) -> list[tuple[float, float]]:
    chosen = frame[frame["series"] == series].sort_values("x")
    return [(float(x), float(y)) for x, y in zip(chosen["x"], chosen["y"])]


def series_names(frame: pd.DataFrame) -> list[str]:
    return [str(name) for name in pd.unique(frame["series"])]


def validate_series_data(frame: pd.DataFrame, series: str | None = None) -> str | None:
    """Validate plot data and return error message if invalid."""
    missing = [column for column in PLOT_COLUMNS if column not in frame.columns]
    if missing:
        return f"Plot data is missing columns: {', '.join(missing)}"

    if frame.empty:
        return "No plot data found in file"

    if series is not None and series not in series_names(frame):
        return f"Series '{series}' not found (available: {', '.join(series_names(frame))})"

    names = [series] if series is not None else series_names(frame)
    for name in names:
        values = [y for _, y in series_points(frame, name)]
        if len(values) < 2:
            return f"Insufficient data points in series '{name}' for visualization"
        if not all(math.isfinite(y) for y in values):
            return f"Series '{name}' contains non-finite values"

    return None


def _resample(points: list[tuple[float, float]], columns: int) -> list[float]:
    """Values on ``columns`` evenly spaced x positions, linear in between."""
    xs = np.array([x for x, _ in points])
    ys = np.array([y for _, y in points])
    if len(points) >= columns:
        return [y for _, y in downsample_series(points, columns)]
    targets = np.linspace(xs[0], xs[-1], columns)
    return np.interp(targets, xs, ys).tolist()


def create_series_chart(
    frame: pd.DataFrame,
    series: str | None = None,
    width: int = CHART_WIDTH,
    height: int = CHART_HEIGHT,
) -> str:
    """Create an ASCII chart of one or all plot-data series against x."""
    names = [series] if series is not None else series_names(frame)
    if not names:
        return "No plot data available."

    curves = [_resample(series_points(frame, name), width) for name in names]
    palette = [asciichart.default, asciichart.blue, asciichart.green, asciichart.red]
    chart_config: dict[str, object] = {
        "height": height,
        "format": "{:10.4g} ",
    }
    if len(curves) > 1:
        chart_config["colors"] = [palette[i % len(palette)] for i in range(len(curves))]

    data = curves if len(curves) > 1 else curves[0]
    chart: str = asciichart.plot(data, chart_config)  # type: ignore[arg-type]

    first = series_points(frame, names[0])
    title = f"{', '.join(names)} over x"
    summary = f"x from {first[0][0]:g} to {first[-1][0]:g}"
    for name in names:
        values = [y for _, y in series_points(frame, name)]
        summary += f"; {name}: min {format_number(min(values))}, max {format_number(max(values))}"

    return f"{title}\n\n{chart}\n\n{summary}"


def validate_rate_data(frame: pd.DataFrame, series: str) -> str | None:
    """Validate log-log rate data and return error message if invalid."""
    error = validate_series_data(frame, series)
    if error:
        return error

    points = series_points(frame, series)
    if len(points) < MIN_RATE_POINTS:
        return f"Rate fit needs at least {MIN_RATE_POINTS} points, series '{series}' has {len(points)}"

    if any(x <= 0 or y <= 0 for x, y in points):
        return "Rate data must be positive for a log-log fit"

    return None


def create_rate_chart(
    frame: pd.DataFrame,
    series: str,
    width: int = CHART_WIDTH,
    height: int = CHART_HEIGHT,
) -> str:
    """Create an ASCII chart of log y against log x with the fitted line."""
    points = series_points(frame, series)
    if not points:
        return f"No data available for series '{series}'."

    fit = rate_fit([x for x, _ in points], [y for _, y in points])
    logged = [(math.log(x), math.log(y)) for x, y in points]
    observed = _resample(logged, width)
    spread = np.linspace(logged[0][0], logged[-1][0], len(observed))
    line = [fit.intercept + fit.slope * float(u) for u in spread]

    chart_config = {
        "height": height,
        "format": "{:8.3f} ",
        "colors": [asciichart.default, asciichart.blue],
    }

    chart: str = asciichart.plot([observed, line], chart_config)  # type: ignore[arg-type]

    title = f"log {series} against log x (fit in blue)"
    summary = f"Points: {len(points)}, fit: {format_rate_fit(fit)}"

    return f"{title}\n\n{chart}\n\n{summary}"
