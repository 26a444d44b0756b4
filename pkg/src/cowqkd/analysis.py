"""Histogram analyses of the tagger itself: timing jitter and differential nonlinearity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyHistogram

DNL_MIN_COUNTS = 10_000


@dataclass
class AnalysisHistogram:
    """Counts in equal bins; bin ``i`` spans ``origin_ps + [i, i+1) * bin_width_ps``."""

    bin_width_ps: float
    counts: np.ndarray
    origin_ps: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if not self.bin_width_ps > 0:
            raise ValueError("bin width must be positive")

    @property
    def centers_ps(self) -> np.ndarray:
        return self.origin_ps + (np.arange(self.counts.size) + 0.5) * self.bin_width_ps

    @classmethod
    def from_values(cls, values_ps, bin_width_ps: float) -> "AnalysisHistogram":
        """Histogram integer-valued samples with bins centred on multiples of the width."""
        v = np.asarray(values_ps, dtype=np.float64)
        if v.size == 0:
            return cls(bin_width_ps, np.zeros(1, np.int64))
        idx = np.floor(v / bin_width_ps + 0.5).astype(np.int64)
        lo = int(idx.min())
        counts = np.bincount(idx - lo)
        return cls(bin_width_ps, counts, (lo - 0.5) * bin_width_ps)


@dataclass(frozen=True)
class JitterResult:
    rms_ps: float
    fwhm_ps: float
    centroid_ps: float


def _half_crossing(x, y, half, i_from, step):
    # walk from the peak until y drops below half, interpolate between the two bins
    i = i_from
    while 0 <= i + step < y.size and y[i + step] >= half:
        i += step
    j = i + step
    if not 0 <= j < y.size:
        return x[i] + step * 0.5 * (x[1] - x[0] if x.size > 1 else 0.0)
    return x[i] + (x[j] - x[i]) * (y[i] - half) / (y[i] - y[j])


def analyze_jitter(hist: AnalysisHistogram) -> JitterResult:
    """Weighted r.m.s. about the centroid, and FWHM by linear interpolation."""
    c = hist.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise EmptyHistogram("jitter histogram has no counts")
    x = hist.centers_ps
    mean = float((c * x).sum() / total)
    rms = float(np.sqrt((c * (x - mean) ** 2).sum() / total))
    peak = int(np.argmax(c))
    half = c[peak] / 2.0
    if np.count_nonzero(c) == 1:
        return JitterResult(rms, 0.0, mean)
    left = _half_crossing(x, c, half, peak, -1)
    right = _half_crossing(x, c, half, peak, +1)
    return JitterResult(rms, float(right - left), mean)


@dataclass(frozen=True)
class DnlResult:
    pp_percent: float
    rms_percent: float
    deviations: np.ndarray  # per populated bin, as a fraction
    region: tuple  # [first, last) bin indices used


def populated_region(counts, edge_fraction: float = 0.5):
    """Bins between the first and last bin holding at least ``edge_fraction`` of the median."""
    c = np.asarray(counts)
    nz = c[c > 0]
    if nz.size == 0:
        raise EmptyHistogram("histogram has no counts")
    full = np.flatnonzero(c >= edge_fraction * np.median(nz))
    return int(full[0]), int(full[-1]) + 1


def analyze_dnl(hist: AnalysisHistogram, region=None) -> DnlResult:
    """Per-bin deviation from the mean over the populated region, in percent."""
    c = hist.counts
    if c.sum() == 0:
        raise EmptyHistogram("DNL histogram has no counts")
    lo, hi = region if region is not None else populated_region(c)
    sel = c[lo:hi].astype(np.float64)
    if sel.sum() < DNL_MIN_COUNTS:
        warnings.warn(f"only {int(sel.sum())} counts; DNL is dominated by counting statistics",
                      stacklevel=2)
    d = sel / sel.mean() - 1.0
    return DnlResult(float(100 * (d.max() - d.min())), float(100 * np.sqrt(np.mean(d * d))),
                     d, (lo, hi))


# -- synthetic inputs -----------------------------------------------------

def jitter_pair_histogram(n_events, sigma_a_ps, sigma_b_ps, rng, resolution_ps=5,
                          bin_width_ps=None):
    """Difference histogram of two channels seeing the same photons with Gaussian jitter.

    Each channel timestamps a common true time with its own jitter and floors
    to the tagger resolution, as a correlation measurement would.
    """
    t0 = rng.uniform(0, 1e6, n_events)
    ta = np.floor((t0 + rng.normal(0, sigma_a_ps, n_events)) / resolution_ps) * resolution_ps
    tb = np.floor((t0 + rng.normal(0, sigma_b_ps, n_events)) / resolution_ps) * resolution_ps
    return AnalysisHistogram.from_values(ta - tb, bin_width_ps or resolution_ps)


def dithered_histogram(counts_per_bin, n_bins, rng, width_errors=None, bin_width_ps=5.0):
    """Counts of a uniformly dithered source; bin ``i`` is ``1 + width_errors[i]`` wide.

    Each bin is Poisson with mean proportional to its width, as for a TDC
    sampling a source uncorrelated with its clock.
    """
    w = np.ones(n_bins) if width_errors is None else 1.0 + np.asarray(width_errors, float)
    return AnalysisHistogram(bin_width_ps, rng.poisson(counts_per_bin * w))
