"""Fréchet distance between Gaussian fits, diagnostic reports and the static-parameter overhead model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .geometry import ModelGeometry
from .numerics import psd_sqrt

NEGATIVE_TOL = 1e-6


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    _sqrt: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(self.mu.size, self.mu.size)
        if np.max(np.abs(self.sigma - self.sigma.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(self.sigma), initial=0.0)):
            raise ValidationError("sigma must be symmetric")

    @property
    def sqrt_sigma(self) -> np.ndarray:
        if self._sqrt is None:
            self._sqrt = psd_sqrt(self.sigma)
        return self._sqrt


def fit_gaussian(samples) -> GaussianStats:
    """Sample mean and unbiased covariance; needs more samples than dimensions."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("samples must be 2-D (n, dim)")
    n, dim = x.shape
    if n < dim + 1:
        raise ValidationError(f"need at least {dim + 1} samples for a {dim}-dim covariance, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("samples contain non-finite values")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T), n)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.mu.shape != b.mu.shape:
        raise ValidationError("dimension mismatch")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    diff = a.mu - b.mu
    ra = a.sqrt_sigma
    inner = ra @ b.sigma @ ra
    cross = psd_sqrt(0.5 * (inner + inner.T))
    d = float(diff @ diff) + float(np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    scale = max(1.0, float(np.trace(a.sigma) + np.trace(b.sigma)))
    if d < 0:
        if d < -NEGATIVE_TOL * scale:
            raise DomainError(f"Fréchet distance materially negative: {d:.3e}")
        d = 0.0
    return d


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class ChannelVarianceReport:
    input_std: np.ndarray  # one entry per row (input channel)
    output_std: np.ndarray  # one entry per column (output channel)

    @staticmethod
    def _ratio(v: np.ndarray) -> float:
        top, med = float(np.max(v)), float(np.median(v))
        if top == 0.0:
            return 0.0
        return top / med if med > 0 else math.inf

    @property
    def input_ratio(self) -> float:
        """max / median of the per-input-channel std (0 for an all-zero vector)."""
        return self._ratio(self.input_std)

    @property
    def output_ratio(self) -> float:
        return self._ratio(self.output_std)


def channel_variance_report(m) -> ChannelVarianceReport:
    """Population std of each row and of each column of a 2-D matrix.

    Both reductions run along the contiguous axis so that transposing the input
    swaps the two vectors bit-for-bit.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError("channel_variance_report needs a 2-D matrix")
    rows = np.ascontiguousarray(m)
    cols = np.ascontiguousarray(m.T)
    return ChannelVarianceReport(rows.std(axis=1), cols.std(axis=1))


@dataclass(frozen=True)
class Snapshot:
    """Distribution summary of one layer's input at one sampler step."""

    layer: str
    timestep: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    std: float


def summarize(layer: str, timestep: int, values) -> Snapshot:
    """Quartiles by linear interpolation between closest ranks.

    For sorted values ``v[0..n-1]`` the q-quantile is read at fractional rank
    ``q (n - 1)``, interpolating linearly; 1..9 gives q1=3, median=5, q3=7.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return Snapshot(layer, int(timestep), float(v.min()), float(q1), float(med), float(q3), float(v.max()), float(v.std()))


TIMELINE_HEADER = ("layer", "timestep", "min", "q1", "median", "q3", "max", "std")
VARIANCE_HEADER = ("layer", "axis", "channel", "std")


def activation_timeline_report(snapshots: Iterable[Snapshot]) -> list[tuple]:
    return [(s.layer, s.timestep, s.min, s.q1, s.median, s.q3, s.max, s.std) for s in snapshots]


def channel_variance_rows(name: str, report: ChannelVarianceReport) -> list[tuple]:
    rows = [(name, "input", i, float(v)) for i, v in enumerate(report.input_std)]
    rows += [(name, "output", j, float(v)) for j, v in enumerate(report.output_std)]
    return rows


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """UTF-8, header row, '\\n' line endings, shortest round-trip float text."""
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------- overhead


def static_param_overhead(
    geometry: ModelGeometry,
    steps: int,
    group_sizes: Sequence[int],
    param_bits: int = 16,
    model_bits: int = 32,
) -> float:
    """Storage of per-timestep static activation parameters relative to the model.

    A static scheme must keep, for every sampler step, a scale and a zero point
    for each activation group. In a fused integer pipeline these are folded
    with the weight parameters into one rescale factor per (group, output
    column), so the count per layer is ``ceil(d_in / g) * d_out``:

        ratio = steps * sum_l ceil(d_in_l / g_l) * d_out_l * 2 * param_bits
                / (param_count * model_bits)
    """
    if len(group_sizes) != len(geometry.layers):
        raise ValidationError("one group size per layer required")
    if steps < 0:
        raise ValidationError("steps must be non-negative")
    groups = sum(
        math.ceil(layer.d_in / min(int(g), layer.d_in)) * layer.d_out
        for layer, g in zip(geometry.layers, group_sizes)
    )
    return steps * groups * 2 * param_bits / (geometry.param_count * model_bits)
