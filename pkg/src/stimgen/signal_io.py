"""Corpora of fixed-length multi-channel signal sequences: files, templates, synthesis.

On disk a corpus is a directory::

    <corpus>/train/*.csv        one sequence per file, header = channel names
    <corpus>/test/*.csv
    <corpus>/labels.csv         optional: filename,tag
    <corpus>/scale_manifest.csv optional: channel,min,max
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

DEFAULT_CHANNELS = ("vehicle_speed", "engine_speed")
SPLITS = ("train", "test")


class DataError(Exception):
    """Problem with corpus or sequence files."""


class EmptyCorpusError(DataError):
    pass


class RaggedCorpusError(DataError):
    pass


class MissingChannelError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


@dataclass
class Corpus:
    sequences: np.ndarray                      # (N, C, T) in [0, 1]
    names: list[str]
    splits: list[str]
    channel_names: tuple[str, ...] = DEFAULT_CHANNELS
    labels: dict[str, str] = field(default_factory=dict)
    scale_min: np.ndarray | None = None        # per channel, None when already in [0, 1]
    scale_max: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.names)

    @property
    def length(self) -> int:
        return self.sequences.shape[2]

    def split(self, which: str) -> np.ndarray:
        idx = [i for i, s in enumerate(self.splits) if s == which]
        return self.sequences[idx]

    @property
    def train(self) -> np.ndarray:
        return self.split("train")

    @property
    def test(self) -> np.ndarray:
        return self.split("test")

    def label_of(self, index: int) -> str | None:
        return self.labels.get(self.names[index])

    def indices_with_label(self, tag: str, split: str | None = None) -> list[int]:
        return [i for i, n in enumerate(self.names)
                if self.labels.get(n) == tag and (split is None or self.splits[i] == split)]

    def inverse(self, x: np.ndarray) -> np.ndarray:
        """Map rescaled values back to raw units using the scale manifest."""
        if self.scale_min is None:
            return np.array(x, dtype=np.float64)
        return inverse_rescale(x, self.scale_min, self.scale_max)


def rescale(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return (raw - lo[:, None]) / span[:, None]


def inverse_rescale(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.asarray(x) * span[:, None] + lo[:, None]


# --- sequence files -----------------------------------------------------------

def write_sequence(path, x: np.ndarray, channel_names: Sequence[str] = DEFAULT_CHANNELS) -> Path:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(channel_names) != x.shape[0]:
        channel_names = [f"channel_{i}" for i in range(x.shape[0])]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(channel_names)
        for row in x.T:
            w.writerow([repr(float(v)) for v in row])
    return path


def read_sequence(path, expected_channels: Sequence[str] | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read one CSV sequence; returns ``(array (C, T), channel names)``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyCorpusError(f"{path}: empty file")
    header = tuple(h.strip() for h in rows[0])
    if expected_channels is not None:
        missing = [c for c in expected_channels if c not in header]
        if missing:
            raise MissingChannelError(f"{path}: missing channel column(s) {missing}")
        cols = [header.index(c) for c in expected_channels]
        names = tuple(expected_channels)
    else:
        cols = list(range(len(header)))
        names = header
    values = np.empty((len(cols), len(rows) - 1))
    for t, row in enumerate(rows[1:]):
        for c, col in enumerate(cols):
            try:
                values[c, t] = float(row[col])
            except (ValueError, IndexError):
                cell = row[col] if col < len(row) else "<missing>"
                raise NonNumericCellError(
                    f"{path}: non-numeric cell {cell!r} at row {t + 2}, column {names[c]!r}"
                ) from None
            if not math.isfinite(values[c, t]):
                raise NonNumericCellError(f"{path}: non-finite value at row {t + 2}")
    return values, names


# --- corpus directories -----------------------------------------------------

def save_corpus(corpus: Corpus, path) -> Path:
    root = Path(path)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    raw = corpus.sequences
    for name, split, x in zip(corpus.names, corpus.splits, raw):
        write_sequence(root / split / f"{name}.csv", x, corpus.channel_names)
    if corpus.labels:
        with (root / "labels.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "tag"])
            for name in corpus.names:
                if name in corpus.labels:
                    w.writerow([f"{name}.csv", corpus.labels[name]])
    if corpus.scale_min is not None:
        write_scale_manifest(root / "scale_manifest.csv", corpus.channel_names,
                             corpus.scale_min, corpus.scale_max)
    return root


def write_scale_manifest(path, channel_names, lo, hi) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "min", "max"])
        for name, a, b in zip(channel_names, lo, hi):
            w.writerow([name, repr(float(a)), repr(float(b))])


def read_scale_manifest(path, channel_names) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = {r["channel"]: r for r in csv.DictReader(fh)}
    try:
        lo = np.array([float(rows[c]["min"]) for c in channel_names])
        hi = np.array([float(rows[c]["max"]) for c in channel_names])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable scale manifest ({exc})") from None
    return lo, hi


def load_corpus(path, expected_channels: Sequence[str] | None = DEFAULT_CHANNELS) -> Corpus:
    """Load ``<path>/{train,test}/*.csv`` in lexicographic order.

    Raw values outside [0, 1] are min-max rescaled per channel using the
    extrema of the whole corpus; the extrema are kept on the returned corpus
    (and can be written with :func:`save_corpus`). Files are never modified.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: corpus directory not found")
    arrays, names, splits = [], [], []
    channel_names: tuple[str, ...] | None = tuple(expected_channels) if expected_channels else None
    shape = None
    for split in SPLITS:
        for f in sorted((root / split).glob("*.csv")):
            x, found = read_sequence(f, channel_names)
            if channel_names is None:
                channel_names = found
            if shape is None:
                shape = x.shape
            elif x.shape != shape:
                raise RaggedCorpusError(
                    f"{f}: shape {x.shape} differs from corpus shape {shape}")
            arrays.append(x)
            names.append(f.stem)
            splits.append(split)
    if not arrays:
        raise EmptyCorpusError(f"{root}: no sequence files under train/ or test/")
    if shape[1] == 0:
        raise EmptyCorpusError(f"{root}: sequences have no samples")
    data = np.stack(arrays)
    labels = {}
    if (root / "labels.csv").exists():
        with (root / "labels.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                labels[Path(row["filename"]).stem] = row["tag"]
    lo = hi = None
    if data.min() < 0.0 or data.max() > 1.0:
        lo = data.min(axis=(0, 2))
        hi = data.max(axis=(0, 2))
        data = np.stack([rescale(x, lo, hi) for x in data])
    elif (root / "scale_manifest.csv").exists():
        lo, hi = read_scale_manifest(root / "scale_manifest.csv", channel_names)
    return Corpus(data, names, splits, tuple(channel_names), labels, lo, hi)


# --- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Linear ramp from the previous level to ``level`` over ``ramp`` samples, then a hold."""

    level: float
    ramp: int = 0
    hold: int = 0


@dataclass(frozen=True)
class TemplateSpec:
    kind: str                                   # start | stop | plateau | composite
    segments: tuple[tuple[Segment, ...], ...]   # one segment list per channel
    length: int

    def __post_init__(self):
        if self.kind not in ("start", "stop", "plateau", "composite"):
            raise ValueError(f"unknown template kind {self.kind!r}")


class TemplateError(ValueError):
    pass


def _render_channel(segments: Sequence[Segment], length: int) -> np.ndarray:
    values: list[float] = []
    prev = segments[0].level if segments else 0.0
    for seg in segments:
        if not 0.0 <= seg.level <= 1.0:
            raise TemplateError(f"segment level {seg.level} outside [0, 1]")
        if seg.ramp < 0 or seg.hold < 0:
            raise TemplateError("segment durations must be non-negative")
        values.extend(prev + (seg.level - prev) * (k + 1) / seg.ramp for k in range(seg.ramp))
        values.extend([seg.level] * seg.hold)
        prev = seg.level
    if len(values) > length:
        raise TemplateError(f"segments span {len(values)} samples, template length is {length}")
    values.extend([prev] * (length - len(values)))  # short specs hold the last level
    return np.array(values)


def craft_template(spec: TemplateSpec) -> np.ndarray:
    """Piecewise-linear (C, T) sequence; ``start`` is the time reversal of the segments."""
    x = np.stack([_render_channel(s, spec.length) for s in spec.segments])
    return x[:, ::-1].copy() if spec.kind == "start" else x


def stop_template(length: int = 64, level: float = 0.6, idle: float = 0.2,
                  engine_gain: float = 0.6) -> np.ndarray:
    """Vehicle holds ``level`` for half the sequence, ramps to 0 over a quarter, stays at 0.

    The engine channel follows at ``idle + engine_gain * level`` and settles
    at idle.
    """
    hold, ramp = length // 2, length // 4
    engine = min(idle + engine_gain * level, 1.0)
    spec = TemplateSpec("stop", (
        (Segment(level, 0, hold), Segment(0.0, ramp, length - hold - ramp)),
        (Segment(engine, 0, hold), Segment(idle, ramp, length - hold - ramp)),
    ), length)
    return craft_template(spec)


def start_template(length: int = 64, level: float = 0.6, idle: float = 0.2,
                   engine_gain: float = 0.6) -> np.ndarray:
    hold, ramp = length // 2, length // 4
    engine = min(idle + engine_gain * level, 1.0)
    spec = TemplateSpec("start", (
        (Segment(level, 0, hold), Segment(0.0, ramp, length - hold - ramp)),
        (Segment(engine, 0, hold), Segment(idle, ramp, length - hold - ramp)),
    ), length)
    return craft_template(spec)


TEMPLATES = {"stop": stop_template, "start": start_template}


# --- synthetic corpus ----------------------------------------------------------

SYNTH_KINDS = ("start", "stop", "cruise")


def _smooth_noise(rng: np.random.Generator, length: int, width: int, amplitude: float) -> np.ndarray:
    """Gaussian noise low-passed by a moving average, scaled to ``amplitude`` std."""
    raw = rng.standard_normal(length + width)
    smooth = np.convolve(raw, np.ones(width) / width, mode="valid")[:length]
    return amplitude * smooth / max(smooth.std(), 1e-12)


def _ramp(length: int, start: int, duration: int, lo: float, hi: float) -> np.ndarray:
    t = np.arange(length)
    frac = np.clip((t - start + 1) / max(duration, 1), 0.0, 1.0)
    return lo + (hi - lo) * frac


def synth_sequence(kind: str, length: int, rng: np.random.Generator,
                   noise: float = 1.0) -> np.ndarray:
    """One (2, T) vehicle/engine sequence of the given kind; ``noise`` scales the jitter."""
    t8 = max(length // 8, 1)
    level = rng.uniform(0.3, 0.9)
    if kind == "stop":
        zero = int(rng.integers(t8, 3 * t8 + 1))
        dur = int(rng.integers(t8, 3 * t8 + 1))
        start = length - zero - dur
        speed = _ramp(length, start, dur, level, 0.0)
    elif kind == "start":
        zero = int(rng.integers(t8, 3 * t8 + 1))
        dur = int(rng.integers(t8, 3 * t8 + 1))
        speed = _ramp(length, zero, dur, 0.0, level)
    elif kind == "cruise":
        other = np.clip(level + rng.uniform(-0.3, 0.3), 0.2, 0.95)
        start = int(rng.integers(t8, length - 3 * t8))
        speed = _ramp(length, start, int(rng.integers(t8, 2 * t8 + 1)), level, other)
    else:
        raise ValueError(f"unknown sequence kind {kind!r}")
    moving = np.clip(speed / 0.1, 0.0, 1.0)
    speed = np.clip(speed + moving * _smooth_noise(rng, length, t8, 0.02 * noise), 0.0, 1.0)
    speed[moving == 0.0] = 0.0

    idle = rng.uniform(0.15, 0.3)
    gain = rng.uniform(0.5, 0.75)
    engine = idle + gain * speed + moving * _smooth_noise(rng, length, t8, 0.015 * noise)
    if kind in ("stop", "start") and rng.uniform() < 0.5:
        # engine switched off while parked
        off = np.flatnonzero(moving == 0.0)
        keep = int(rng.integers(0, max(len(off) // 2, 1)))
        off = off[keep:] if kind == "stop" else off[:len(off) - keep]
        engine[off] = 0.0
    return np.stack([speed, np.clip(engine, 0.0, 1.0)])


def synth_corpus(n: int, length: int = 64, rng_seed: int = 0, test_fraction: float = 0.0,
                 n_test: int | None = None, noise: float = 1.0) -> Corpus:
    """Deterministic desk-scale corpus of start/stop/cruise sequences.

    ``n`` training sequences plus ``n_test`` (or ``round(n * test_fraction)``)
    test sequences, each labelled with its kind.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if length < 16:
        raise ValueError("synthetic sequences need length >= 16")
    rng = np.random.default_rng(rng_seed)
    if n_test is None:
        n_test = int(round(n * test_fraction))
    total = n + n_test
    kinds = [SYNTH_KINDS[i % 3] for i in range(total)]
    rng.shuffle(kinds)
    seqs = np.stack([synth_sequence(k, length, rng, noise) for k in kinds])
    names = [f"seq_{i:05d}" for i in range(total)]
    splits = ["train"] * n + ["test"] * n_test
    return Corpus(seqs, names, splits, DEFAULT_CHANNELS, dict(zip(names, kinds)))


def classify_sequence(x: np.ndarray) -> str:
    """Rule-based kind: zero-speed tail means stop, zero-speed head means start."""
    speed = np.asarray(x)[0]
    t8 = max(len(speed) // 8, 1)
    if np.all(speed[-t8:] == 0.0):
        return "stop"
    if np.all(speed[:t8] == 0.0):
        return "start"
    return "cruise"


def longest_zero_run(x: np.ndarray) -> int:
    """Longest run of exact zeros in the first (vehicle speed) channel."""
    best = run = 0
    for v in np.asarray(x)[0]:
        run = run + 1 if v == 0.0 else 0
        best = max(best, run)
    return best


# --- export ----------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def svg_plot(series: dict[str, Sequence[float]], title: str = "", xlabel: str = "sample",
             ylabel: str = "value", annotations: Sequence[str] = (), width: int = 480,
             height: int = 240, y_range: tuple[float, float] | None = None) -> str:
    """Minimal standalone SVG line chart; one polyline per named series."""
    left, right, top, bottom = 50, 10, 24, 36
    pw, ph = width - left - right, height - top - bottom
    all_vals = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    lo, hi = y_range if y_range else (float(all_vals.min()), float(all_vals.max()))
    if hi <= lo:
        hi = lo + 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="12">'
           f'{escape(title)}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle" '
           f'font-size="11">{escape(xlabel)}</text>',
           f'<text x="12" y="{top + ph / 2:.1f}" font-size="11" text-anchor="middle" '
           f'transform="rotate(-90 12 {top + ph / 2:.1f})">{escape(ylabel)}</text>',
           f'<text x="{left - 4}" y="{top + 4}" font-size="9" text-anchor="end">{hi:.3g}</text>',
           f'<text x="{left - 4}" y="{top + ph}" font-size="9" text-anchor="end">{lo:.3g}</text>']
    for k, (name, vals) in enumerate(series.items()):
        vals = np.asarray(vals, dtype=float)
        n = max(len(vals) - 1, 1)
        pts = " ".join(f"{left + pw * i / n:.2f},{top + ph * (1 - (v - lo) / (hi - lo)):.2f}"
                       for i, v in enumerate(vals))
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{left + 6}" y="{top + 14 + 12 * k}" font-size="10" '
                   f'fill="{color}">{escape(name)}</text>')
    for k, note in enumerate(annotations):
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 12 * k}" font-size="10" '
                   f'text-anchor="end">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_series(sequences, path, format: str = "csv",
                  channel_names: Sequence[str] = DEFAULT_CHANNELS,
                  names: Sequence[str] | None = None,
                  annotations: Sequence[Sequence[str]] | None = None) -> list[Path]:
    """Write each (C, T) sequence as ``<name>.csv`` or ``<name>.svg`` under ``path``."""
    seqs = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in sequences]
    if not seqs:
        raise ValueError("export_series: nothing to export")
    if format not in ("csv", "svg-plot"):
        raise ValueError(f"unknown export format {format!r}")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{root}: cannot create output directory ({exc})") from None
    names = list(names) if names is not None else [f"sample_{i:03d}" for i in range(len(seqs))]
    written = []
    for i, (name, x) in enumerate(zip(names, seqs)):
        try:
            if format == "csv":
                written.append(write_sequence(root / f"{name}.csv", x, channel_names))
            else:
                labels = list(channel_names) if len(channel_names) == x.shape[0] else [
                    f"channel_{c}" for c in range(x.shape[0])]
                notes = annotations[i] if annotations is not None else ()
                svg = svg_plot(dict(zip(labels, x)), title=name, ylabel="rescaled value",
                               annotations=notes, y_range=(0.0, 1.0))
                target = root / f"{name}.svg"
                target.write_text(svg)
                written.append(target)
        except OSError as exc:
            raise DataError(f"{root}: cannot write {name} ({exc})") from None
    return written
