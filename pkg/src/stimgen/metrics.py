"""Pair-wise similarity metrics for fixed-length multi-channel sequences.

All functions take arrays shaped ``(C, T)``; a 1-d array is treated as a
single channel. Batched variants take ``(B, C, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class MetricError(ValueError):
    pass


class DegenerateReferenceError(MetricError):
    """The reference sequence has zero total variation, so roughness is undefined."""


def _as_channels(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise MetricError(f"expected a (channels, samples) array, got shape {x.shape}")
    return x


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise MetricError(f"expected a (batch, channels, samples) array, got shape {x.shape}")
    return x


# --- SSIM ------------------------------------------------------------------

@dataclass(frozen=True)
class SsimParams:
    """Uniform-window 1D SSIM settings.

    ``c1``/``c2`` default to ``(0.01 * data_range)**2`` and
    ``(0.03 * data_range)**2``.
    """

    window_length: int = 11
    data_range: float = 1.0
    c1: float | None = None
    c2: float | None = None

    def __post_init__(self):
        if self.window_length < 1 or self.window_length % 2 == 0:
            raise MetricError(f"window_length must be odd and positive, got {self.window_length}")
        if self.c1 is None:
            object.__setattr__(self, "c1", (0.01 * self.data_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (0.03 * self.data_range) ** 2)
        if self.c1 <= 0 or self.c2 <= 0:
            raise MetricError("c1 and c2 must be positive")


DEFAULT_SSIM = SsimParams()


def ssim_batch(a, b, params: SsimParams = DEFAULT_SSIM) -> np.ndarray:
    """SSIM per batch item, averaged over windows and channels."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    w = params.window_length
    if w > a.shape[-1]:
        raise MetricError(f"ssim: window {w} longer than sequence length {a.shape[-1]}")
    win = np.lib.stride_tricks.sliding_window_view
    wa, wb = win(a, w, axis=-1), win(b, w, axis=-1)
    mu_a, mu_b = wa.mean(-1), wb.mean(-1)
    var_a = (wa * wa).mean(-1) - mu_a ** 2
    var_b = (wb * wb).mean(-1) - mu_b ** 2
    cov = (wa * wb).mean(-1) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=(1, 2))


def ssim(a, b, params: SsimParams = DEFAULT_SSIM) -> float:
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    return float(ssim_batch(a[None], b[None], params)[0])


# --- DTW -------------------------------------------------------------------

def dtw_batch(a, b) -> np.ndarray:
    """Unnormalised DTW cost per batch item.

    Step cost is the L1 distance across channels; one warping path is shared
    by all channels. Cells are filled one anti-diagonal at a time.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise MetricError(f"dtw: batch/channel mismatch {a.shape} vs {b.shape}")
    n, m = a.shape[2], b.shape[2]
    if n == 0 or m == 0:
        raise MetricError("dtw: empty sequence")
    cost = np.abs(a[:, :, :, None] - b[:, :, None, :]).sum(axis=1)  # (B, n, m)
    acc = np.full((a.shape[0], n + 1, m + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(acc[:, i - 1, j - 1], acc[:, i - 1, j]), acc[:, i, j - 1])
        acc[:, i, j] = cost[:, i - 1, j - 1] + best
    return acc[:, n, m]


def dtw(a, b) -> float:
    a, b = _as_channels(a), _as_channels(b)
    if a.shape[0] != b.shape[0]:
        raise MetricError(f"dtw: channel mismatch {a.shape[0]} vs {b.shape[0]}")
    return float(dtw_batch(a[None], b[None])[0])


# --- roughness and composite ------------------------------------------------

def total_variation(x) -> float:
    return float(np.abs(np.diff(_as_channels(x), axis=-1)).sum())


def roughness(a, b) -> float:
    """Total variation of ``b`` relative to the reference ``a`` (channels summed)."""
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise MetricError(f"roughness: shape mismatch {a.shape} vs {b.shape}")
    ref = total_variation(a)
    if ref == 0.0:
        raise DegenerateReferenceError("roughness: reference has zero total variation")
    return total_variation(b) / ref


def composite_msr(x_ref, x_bar, kappa: float = 0.5, params: SsimParams = DEFAULT_SSIM) -> float:
    if not 0.0 <= kappa <= 1.0:
        raise MetricError(f"kappa must lie in [0, 1], got {kappa}")
    return kappa * ssim(x_ref, x_bar, params) + (1.0 - kappa) * roughness(x_ref, x_bar)


# --- latent-space metric contract ---------------------------------------------

HIGHER = "higher-is-similar"
LOWER = "lower-is-similar"
TARGET = "schedule-target"


@dataclass(frozen=True)
class MetricFn:
    """A named sequence metric lifted to latent points.

    ``fn(x_ref, x_bar)`` scores a decoded sample against the reference;
    :meth:`evaluate` decodes ``z`` with ``model`` first.
    """

    name: str
    direction: str
    fn: Callable[[np.ndarray, np.ndarray], float]

    def evaluate(self, model, z, x_ref) -> float:
        return float(self.fn(x_ref, model.generate(np.asarray(z, dtype=np.float64))))


METRIC_NAMES = ("ssim", "dtw", "roughness", "composite")


def make_metric(name: str, kappa: float = 0.5, params: SsimParams = DEFAULT_SSIM) -> MetricFn:
    if name == "ssim":
        return MetricFn("ssim", HIGHER, lambda r, x: ssim(r, x, params))
    if name == "dtw":
        return MetricFn("dtw", LOWER, dtw)
    if name == "roughness":
        return MetricFn("roughness", TARGET, roughness)
    if name == "composite":
        return MetricFn("composite", HIGHER, lambda r, x: composite_msr(r, x, kappa, params))
    raise MetricError(f"unknown metric {name!r}; expected one of {', '.join(METRIC_NAMES)}")


@dataclass(frozen=True)
class LatentMetric:
    """A :class:`MetricFn` bound to a model and reference: ``f(z) -> float``."""

    metric: MetricFn
    model: object
    x_ref: np.ndarray

    @property
    def name(self) -> str:
        return self.metric.name

    @property
    def direction(self) -> str:
        return self.metric.direction

    def __call__(self, z) -> float:
        return self.metric.evaluate(self.model, z, self.x_ref)


def make_latent_metric(name: str, model, x_ref, kappa: float = 0.5,
                       params: SsimParams = DEFAULT_SSIM) -> LatentMetric:
    return LatentMetric(make_metric(name, kappa, params), model,
                        np.asarray(x_ref, dtype=np.float64))
