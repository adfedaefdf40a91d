"""Pulse segmentation, shape features and the histogram-based calibration factor."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .synth import AdcTrace


class TruncatedPulseError(ValueError):
    """A segment never drops below the requested level on one flank."""


class InsufficientDataError(ValueError):
    pass


class NoiseThresholdWarning(UserWarning):
    """The trigger threshold sits inside the noise band and will fire on noise."""


@dataclass
class PulseSegment:
    start_index: int
    codes: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.size == 0:
            raise ValueError("empty segment")

    def __len__(self):
        return len(self.codes)

    @property
    def peak_index(self) -> int:
        return self.start_index + int(np.argmax(self.codes))


@dataclass
class PulseFeatures:
    v_max: float
    fwhm: float
    rise_time: float
    fall_time: float
    calib_factor: float = math.nan


@dataclass
class CalibrationReference:
    bin_width: float
    mode_value: float
    mode_probability: float
    histogram: list[tuple[float, float]] = field(default_factory=list)

    def probability(self, value: float) -> float:
        """Histogram probability of the bin holding ``value``; 0 outside the support."""
        return self._lookup().get(_bin_index(value, self.bin_width), 0.0)

    def in_support(self, value: float) -> bool:
        return _bin_index(value, self.bin_width) in self._lookup()

    def _lookup(self) -> dict:
        cache = self.__dict__.get("_table")
        if cache is None:
            cache = {_bin_index(c, self.bin_width): p for c, p in self.histogram}
            self.__dict__["_table"] = cache
        return cache

    def to_dict(self) -> dict:
        return {"bin_width": self.bin_width, "mode_value": self.mode_value,
                "mode_probability": self.mode_probability,
                "histogram": [[c, p] for c, p in self.histogram]}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReference":
        return cls(float(d["bin_width"]), float(d["mode_value"]), float(d["mode_probability"]),
                   [(float(c), float(p)) for c, p in d["histogram"]])


def auto_threshold(baseline: float, noise_sigma: float, k_sigma: float = 6.0) -> float:
    """Trigger level ``k_sigma`` noise widths above the baseline (at least one code)."""
    return baseline + max(k_sigma * noise_sigma, 1.0)


def threshold_filter(trace: AdcTrace, threshold: float, pre_pad: int, post_pad: int,
                     calibration_trace: AdcTrace | None = None) -> list[PulseSegment]:
    """Cut the trace into segments around every run of samples at or above ``threshold``.

    Runs are widened by the pads (clipped to the trace) and merged when the
    widened ranges touch. When a pulse-free ``calibration_trace`` is supplied
    and the threshold is below its 99.9th percentile, a
    :class:`NoiseThresholdWarning` is issued.
    """
    if calibration_trace is not None and threshold < np.percentile(calibration_trace.codes, 99.9):
        warnings.warn(f"threshold {threshold} is inside the noise band", NoiseThresholdWarning, stacklevel=2)
    codes = trace.codes
    above = np.concatenate(([False], codes >= threshold, [False]))
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    starts, stops = edges[0::2], edges[1::2]
    ranges = []
    for s, e in zip(starts, stops):
        lo, hi = max(0, s - pre_pad), min(len(codes), e + post_pad)
        if ranges and lo <= ranges[-1][1]:
            ranges[-1][1] = max(ranges[-1][1], hi)
        else:
            ranges.append([lo, hi])
    return [PulseSegment(int(lo), codes[lo:hi], trace.sample_rate) for lo, hi in ranges]


def _crossing_before(y, peak, level):
    below = np.flatnonzero(y[:peak] < level)
    if below.size == 0:
        raise TruncatedPulseError(f"leading edge never drops below {level:g}")
    j = below[-1]
    return j + (level - y[j]) / (y[j + 1] - y[j])


def _crossing_after(y, peak, level):
    below = np.flatnonzero(y[peak:] < level)
    if below.size == 0:
        raise TruncatedPulseError(f"trailing edge never drops below {level:g}")
    k = peak + below[0]
    return (k - 1) + (y[k - 1] - level) / (y[k - 1] - y[k])


def extract_features(segment: PulseSegment, baseline: float) -> PulseFeatures:
    """Height above baseline, FWHM and 10-90 % rise / 90-10 % fall times.

    Crossings are linearly interpolated between samples; for rise and fall
    the crossings nearest the peak are used. Times are in seconds.
    """
    y = segment.codes.astype(float) - baseline
    peak = int(np.argmax(y))
    v_max = y[peak]
    if not v_max > 0:
        raise ValueError("segment maximum is not above the baseline")
    dt = 1.0 / segment.sample_rate
    half = 0.5 * v_max
    fwhm = _crossing_after(y, peak, half) - _crossing_before(y, peak, half)
    rise = _crossing_before(y, peak, 0.9 * v_max) - _crossing_before(y, peak, 0.1 * v_max)
    fall = _crossing_after(y, peak, 0.1 * v_max) - _crossing_after(y, peak, 0.9 * v_max)
    return PulseFeatures(float(v_max), fwhm * dt, rise * dt, fall * dt)


def _bin_index(value: float, bin_width: float) -> int:
    # Bins are centred on integer multiples of the width.
    return int(math.floor(value / bin_width + 0.5))


def histogram_mode(maxima, bin_width: float) -> CalibrationReference:
    """Normalized histogram of pulse maxima and its most probable bin.

    Bins are centred on multiples of ``bin_width``; ties go to the lower bin.
    """
    values = np.asarray(maxima, dtype=float)
    if values.size < 100:
        raise InsufficientDataError(f"need at least 100 maxima, got {values.size}")
    if not bin_width >= 1:
        raise ValueError("bin_width must be at least 1")
    idx = np.floor(values / bin_width + 0.5).astype(np.int64)
    lo = int(idx.min())
    counts = np.bincount(idx - lo)
    probs = counts / values.size
    best = int(np.argmax(counts))  # first maximum, i.e. lowest bin
    hist = [(float((lo + k) * bin_width), float(p)) for k, p in enumerate(probs)]
    return CalibrationReference(float(bin_width), float((lo + best) * bin_width), float(probs[best]), hist)


def calibration_factor(v_max: float, reference: CalibrationReference, alpha: float = 1.0,
                       beta: float = 1.0) -> float:
    """``alpha * p(v_max) + beta * (v_max - mode) / mode``.

    ``p`` is the reference probability of the bin holding ``v_max`` and is 0
    outside the histogram support (see :meth:`CalibrationReference.in_support`).
    """
    p = reference.probability(v_max)
    return alpha * p + beta * (v_max - reference.mode_value) / reference.mode_value


def resample_window(codes, window_len: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    if codes.size == 1:
        return np.full(window_len, codes[0])
    x_new = np.linspace(0.0, codes.size - 1, window_len)
    return np.interp(x_new, np.arange(codes.size), codes)


def peak_window(codes, span: int, pre_peak: int) -> np.ndarray:
    """``span`` samples starting ``pre_peak`` before the maximum, edge-padded past the ends."""
    codes = np.asarray(codes)
    lo = int(np.argmax(codes)) - pre_peak
    return codes[np.clip(np.arange(lo, lo + span), 0, codes.size - 1)]


def build_feature_vector(segment: PulseSegment, features: PulseFeatures, setting: float,
                         window_len: int = 128, full_range: float = 4095.0,
                         span: int | None = None, pre_peak: int = 0) -> np.ndarray:
    """Classifier input: the waveform resampled onto ``window_len`` points and
    scaled by the ADC range, then the calibration factor and the normalized
    bias current.

    With ``span`` set, the waveform is first cut to a fixed span aligned on
    the peak, so every detection is stretched by the same factor; otherwise
    the whole segment is resampled.
    """
    codes = segment.codes if span is None else peak_window(segment.codes, span, pre_peak)
    window = resample_window(codes, window_len) / full_range
    return np.concatenate([window, [features.calib_factor, setting]])


def histogram_overlap(a, b, bin_width: float) -> float:
    """Bhattacharyya coefficient between the binned distributions of ``a`` and ``b``.

    1 for identical distributions, 0 for disjoint ones.
    """
    ia = np.floor(np.asarray(a, float) / bin_width + 0.5).astype(np.int64)
    ib = np.floor(np.asarray(b, float) / bin_width + 0.5).astype(np.int64)
    lo = min(ia.min(), ib.min())
    n = max(ia.max(), ib.max()) - lo + 1
    pa = np.bincount(ia - lo, minlength=n) / ia.size
    pb = np.bincount(ib - lo, minlength=n) / ib.size
    return float(np.sum(np.sqrt(pa * pb)))
