"""Metric-guided latent interpolation (MLERP), plain lerp, and per-axis neighbourhood search.

MLERP walks the straight segment between two latent points on a dense grid
and keeps, for every target value of a metric schedule, the grid position
whose decoded sample scores closest to that target.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import LatentMetric, MetricFn
from .signal_io import DEFAULT_CHANNELS, export_series, svg_plot

SCHEDULES = ("linear", "sigmoid", "custom")
DEGENERATE = "degenerate-endpoints"
DIRECTION_MISMATCH = "direction-mismatch"
DIRECTIONS = ("increasing", "decreasing")


class MlerpError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"metric evaluation failed at candidate {index}: {cause}")
        self.index = index


class ScheduleError(ValueError):
    pass


def lerp(z0, z_end, n: int) -> np.ndarray:
    """``n`` evenly spaced points from ``z0`` to ``z_end`` inclusive, shape (n, D)."""
    if n < 2:
        raise ValueError(f"lerp needs n >= 2, got {n}")
    z0, z_end = np.asarray(z0, dtype=np.float64), np.asarray(z_end, dtype=np.float64)
    if z0.shape != z_end.shape:
        raise ValueError(f"lerp: dimension mismatch {z0.shape} vs {z_end.shape}")
    t = np.arange(n) / (n - 1)
    out = z0 + t[:, None] * (z_end - z0)
    out[0], out[-1] = z0, z_end
    return out


@dataclass(frozen=True)
class WaypointSchedule:
    """Division of metric space between ``start_metric`` and ``stop_metric``.

    ``custom`` holds monotone fractions running from 0 to 1; they are mapped
    onto the metric range.
    """

    shape: str = "linear"
    no_wps: int = 8
    start_metric: float = 0.0
    stop_metric: float = 1.0
    custom: tuple[float, ...] | None = None
    steepness: float = 6.0


def make_waypoints(schedule: WaypointSchedule) -> np.ndarray:
    n, a, b = schedule.no_wps, schedule.start_metric, schedule.stop_metric
    if n < 2:
        raise ScheduleError(f"no_wps must be >= 2, got {n}")
    if schedule.shape == "linear":
        frac = np.arange(n) / (n - 1)
    elif schedule.shape == "sigmoid":
        k = schedule.steepness
        u = np.linspace(-k, k, n)
        lo, hi = 1 / (1 + math.exp(k)), 1 / (1 + math.exp(-k))
        frac = (1 / (1 + np.exp(-u)) - lo) / (hi - lo)
    elif schedule.shape == "custom":
        if schedule.custom is None or len(schedule.custom) != n:
            raise ScheduleError(f"custom schedule needs exactly {n} fractions")
        frac = np.asarray(schedule.custom, dtype=np.float64)
        steps = np.diff(frac)
        if not (np.all(steps >= 0) or np.all(steps <= 0)):
            raise ScheduleError("custom schedule is not monotone")
        if frac[0] != 0.0 or frac[-1] != 1.0:
            raise ScheduleError("custom schedule must run from 0 to 1")
    else:
        raise ScheduleError(f"unknown schedule shape {schedule.shape!r}")
    wps = a + (b - a) * frac
    wps[0], wps[-1] = a, b
    return wps


@dataclass
class InterpolationResult:
    zs: np.ndarray                  # (no_wps, D)
    ts: np.ndarray                  # position of each z on the segment, in [0, 1]
    achieved_metrics: np.ndarray
    target_waypoints: np.ndarray    # target each sample was selected for
    samples: list[np.ndarray]
    metric: str = ""
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ts)

    @property
    def smoothness(self) -> float:
        return smoothness_score(self.achieved_metrics, self.target_waypoints)


def smoothness_score(achieved: Sequence[float], targets: Sequence[float]) -> float:
    """Largest absolute deviation between achieved metric values and their targets."""
    achieved, targets = np.asarray(achieved, float), np.asarray(targets, float)
    if achieved.shape != targets.shape:
        raise ValueError(f"length mismatch: {achieved.shape} vs {targets.shape}")
    if achieved.size < 2:
        raise ValueError("smoothness_score needs at least 2 points")
    return float(np.max(np.abs(achieved - targets)))


def _evaluator(f_m, model, x_ref) -> Callable[[np.ndarray], float]:
    if isinstance(f_m, LatentMetric):
        return f_m
    if isinstance(f_m, MetricFn):
        return lambda z: f_m.evaluate(model, z, x_ref)
    return lambda z: float(f_m(model, z, x_ref))


def _metric_name(f_m) -> str:
    return getattr(f_m, "name", getattr(f_m, "__name__", "metric"))


def _result(model, z0, z_end, ts, achieved, targets, name, notes) -> InterpolationResult:
    zs = z0 + ts[:, None] * (z_end - z0)
    zs[ts == 0.0] = z0
    zs[ts == 1.0] = z_end
    samples = [np.asarray(model.generate(z)) for z in zs]
    return InterpolationResult(zs, ts, np.asarray(achieved, float), np.asarray(targets, float),
                               samples, name, notes)


def _schedule(shape, no_wps, start, stop, custom) -> WaypointSchedule:
    if isinstance(shape, WaypointSchedule):
        return WaypointSchedule(shape.shape, no_wps, start, stop, shape.custom, shape.steepness)
    return WaypointSchedule(shape, no_wps, start, stop, tuple(custom) if custom else None)


def _oriented(start: float, stop: float, direction: str | None) -> tuple[float, float, list[str]]:
    """Schedule endpoints ordered by an explicit direction, never inferred from the data.

    When the declared direction contradicts the metric values at the two
    latent endpoints the schedule still follows the declaration and the
    result carries a ``direction-mismatch`` note.
    """
    if direction is None:
        return start, stop, []
    if direction not in DIRECTIONS:
        raise ScheduleError(f"unknown schedule direction {direction!r}")
    lo, hi = min(start, stop), max(start, stop)
    a, b = (lo, hi) if direction == "increasing" else (hi, lo)
    return a, b, ([DIRECTION_MISMATCH] if (a, b) != (start, stop) else [])


def mlerp(z0, z_end, no_wps: int, model, f_m, s: float = 15,
          schedule: str | WaypointSchedule = "linear", replacement: str = "closest",
          custom: Sequence[float] | None = None,
          direction: str | None = None) -> InterpolationResult:
    """Metric-guided interpolation from ``z0`` to ``z_end``.

    The reference is the decoding of ``z_end``. ``ceil(s * no_wps)`` grid
    steps are scanned left to right; each candidate is assigned to the
    waypoint whose target is nearest its metric value and replaces the stored
    position when it is closer to that target (``replacement="literal"``
    replaces whenever the candidate's metric is smaller). Endpoints stay
    pinned. The selected positions are returned in path order together with
    the target each one was selected for.

    ``direction`` (``"increasing"`` or ``"decreasing"``) fixes the order of
    the schedule explicitly; metrics without a natural direction, such as
    roughness, need it.
    """
    if s <= 0:
        raise ValueError("sampling ratio s must be positive")
    if replacement not in ("closest", "literal"):
        raise ValueError(f"unknown replacement rule {replacement!r}")
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    z_end = np.asarray(z_end, dtype=np.float64).reshape(-1)
    if z0.shape != z_end.shape:
        raise ValueError(f"mlerp: dimension mismatch {z0.shape} vs {z_end.shape}")
    x_star = model.generate(z_end)
    f = _evaluator(f_m, model, x_star)
    name = _metric_name(f_m)

    def evaluate(i: int, z) -> float:
        try:
            value = float(f(z))
        except Exception as exc:  # noqa: BLE001 - re-raised with the candidate index
            raise MlerpError(i, exc) from exc
        if not math.isfinite(value):
            raise MlerpError(i, FloatingPointError(f"non-finite metric {value}"))
        return value

    start_metric = evaluate(0, z0)
    stop_metric = evaluate(-1, z_end)
    first, last, notes = _oriented(start_metric, stop_metric, direction)
    wps = make_waypoints(_schedule(schedule, no_wps, first, last, custom))
    if notes:
        warnings.warn(f"mlerp: declared {direction} schedule runs against the endpoint "
                      f"metrics ({start_metric:.4g} -> {stop_metric:.4g})", RuntimeWarning,
                      stacklevel=2)

    if np.array_equal(z0, z_end):
        warnings.warn("mlerp: start and end latents coincide", RuntimeWarning, stacklevel=2)
        ts = np.zeros(no_wps)
        return _result(model, z0, z_end, ts, [start_metric] * no_wps, wps, name,
                       [DEGENERATE] + notes)

    ts = np.arange(no_wps) / (no_wps - 1)
    stored = [start_metric] + [evaluate(-1, z0 + t * (z_end - z0)) for t in ts[1:-1]] + [stop_metric]
    num_steps = math.ceil(s * no_wps)
    for i in range(num_steps + 1):
        t = i / num_steps
        m_pos = start_metric if i == 0 else stop_metric if i == num_steps else evaluate(
            i, z0 + t * (z_end - z0))
        wp = int(np.argmin(np.abs(wps - m_pos)))
        if wp == 0 or wp == no_wps - 1:
            continue  # endpoints are pinned
        if replacement == "closest":
            better = abs(m_pos - wps[wp]) < abs(stored[wp] - wps[wp])
        else:
            better = m_pos < stored[wp]
        if better:
            ts[wp], stored[wp] = t, m_pos
    order = np.argsort(ts, kind="stable")
    return _result(model, z0, z_end, ts[order], np.asarray(stored)[order], wps[order], name,
                   notes)


def lerp_result(z0, z_end, no_wps: int, model, f_m,
                schedule: str | WaypointSchedule = "linear",
                custom: Sequence[float] | None = None,
                direction: str | None = None) -> InterpolationResult:
    """Plain linear interpolation scored against the same waypoint targets MLERP uses."""
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    z_end = np.asarray(z_end, dtype=np.float64).reshape(-1)
    f = _evaluator(f_m, model, model.generate(z_end))
    zs = lerp(z0, z_end, no_wps)
    achieved = [float(f(z)) for z in zs]
    first, last, notes = _oriented(achieved[0], achieved[-1], direction)
    wps = make_waypoints(_schedule(schedule, no_wps, first, last, custom))
    ts = np.arange(no_wps) / (no_wps - 1)
    notes = ([DEGENERATE] if np.array_equal(z0, z_end) else []) + notes
    return _result(model, z0, z_end, ts, achieved, wps, _metric_name(f_m), notes)


@dataclass
class NeighborResult:
    dim: int
    mlerp: InterpolationResult
    lerp: InterpolationResult

    @property
    def mlerp_score(self) -> float:
        return self.mlerp.smoothness

    @property
    def lerp_score(self) -> float:
        return self.lerp.smoothness


def neighborhood_search(z1, model, f_m, delta: float = 2.0, s: float = 30, no_wps: int = 8,
                        schedule: str | WaypointSchedule = "linear",
                        direction: str | None = None) -> list[NeighborResult]:
    """MLERP and lerp from ``z1`` to ``z1 + delta * e_d`` for every latent axis ``d``."""
    z1 = np.asarray(z1, dtype=np.float64).reshape(-1)
    if z1.size < 1:
        raise ValueError("latent dimension must be >= 1")
    out = []
    for d in range(z1.size):
        z_end = z1.copy()
        z_end[d] += delta
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = mlerp(z1, z_end, no_wps, model, f_m, s, schedule, direction=direction)
        if DEGENERATE in m.warnings:
            warnings.warn(f"neighborhood_search: dimension {d} has coincident endpoints",
                          RuntimeWarning, stacklevel=2)
        out.append(NeighborResult(d, m, lerp_result(z1, z_end, no_wps, model, f_m, schedule,
                                                    direction=direction)))
    return out


# --- export -------------------------------------------------------------------

def export_interpolation(result: InterpolationResult, path,
                         channel_names: Sequence[str] = DEFAULT_CHANNELS,
                         plots: bool = True) -> list[Path]:
    """One CSV per sample plus ``manifest.csv``; optional SVG plots of samples and metrics."""
    root = Path(path)
    names = [f"sample_{i:03d}" for i in range(len(result))]
    written = export_series(result.samples, root, "csv", channel_names, names)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t", "target", "achieved"])
        for i, (t, tgt, ach) in enumerate(zip(result.ts, result.target_waypoints,
                                              result.achieved_metrics)):
            w.writerow([i, repr(float(t)), repr(float(tgt)), repr(float(ach))])
    written.append(manifest)
    if plots:
        written.extend(plot_interpolation(result, root / "plots", channel_names))
    return written


def plot_interpolation(result: InterpolationResult, path,
                       channel_names: Sequence[str] = DEFAULT_CHANNELS) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    notes = [[f"{result.metric} = {a:.4f} (target {t:.4f})", f"t = {p:.4f}"]
             for a, t, p in zip(result.achieved_metrics, result.target_waypoints, result.ts)]
    names = [f"sample_{i:03d}" for i in range(len(result))]
    written = export_series(result.samples, root, "svg-plot", channel_names, names, notes)
    curve = root / "metric_curve.svg"
    curve.write_text(svg_plot({"achieved": result.achieved_metrics,
                               "target": result.target_waypoints},
                              title=f"{result.metric} along the interpolation",
                              xlabel="sample index", ylabel=result.metric))
    written.insert(0, curve)
    return written


def read_manifest(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in ("index", "t", "target", "achieved")}
