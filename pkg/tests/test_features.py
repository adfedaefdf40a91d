import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snspdsim.features import (CalibrationReference, InsufficientDataError, NoiseThresholdWarning,
                               PulseFeatures, PulseSegment, TruncatedPulseError, auto_threshold,
                               build_feature_vector, calibration_factor, extract_features, histogram_mode,
                               histogram_overlap, resample_window, threshold_filter)
from snspdsim.physics import EventKind, PhotonEvent
from snspdsim.rng import substream
from snspdsim.synth import NM, AdcTrace, EventStream, render_event, render_stream

RATE = 4e9


def _trace(codes):
    return AdcTrace(RATE, np.asarray(codes, dtype=np.int64))


def _box(n, starts, width, height=1000, base=100):
    y = np.full(n, base)
    for s in starts:
        y[s:s + width] = base + height
    return y


# --- threshold filter -------------------------------------------------------

def test_flat_trace_has_no_segments():
    assert threshold_filter(_trace(np.full(5000, 100)), 112, 400, 400) == []


def test_single_rendered_pulse_gives_one_segment(params, chain):
    tr = render_event(PhotonEvent(0.0, 1535 * NM), params, chain, substream(1, "seg"))
    segs = threshold_filter(tr, auto_threshold(chain.baseline, chain.noise_sigma), 400, 1000)
    assert len(segs) == 1
    peak = int(np.argmax(tr.codes))
    assert segs[0].start_index <= peak < segs[0].start_index + len(segs[0])
    assert segs[0].peak_index == peak


def test_two_pulses_one_microsecond_apart_give_two_segments():
    y = _box(12000, [1000, 1000 + 4000], 100)
    segs = threshold_filter(_trace(y), 150, 400, 400)
    assert [s.start_index for s in segs] == [600, 4600]
    assert [len(s) for s in segs] == [900, 900]


def test_overlapping_pads_merge_and_clip_to_trace():
    y = _box(3000, [50, 700], 100)
    segs = threshold_filter(_trace(y), 150, 400, 400)
    assert len(segs) == 1
    assert segs[0].start_index == 0 and len(segs[0]) == 1200


def test_threshold_inside_noise_band_warns():
    rng = np.random.default_rng(0)
    quiet = _trace(np.rint(100 + rng.normal(0, 2, 20000)))
    with pytest.warns(NoiseThresholdWarning):
        threshold_filter(quiet, 101, 10, 10, calibration_trace=quiet)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        threshold_filter(quiet, 112, 10, 10, calibration_trace=quiet)


def test_filter_completeness_on_rendered_stream(params, chain):
    # Ten events 5 us apart, alternating signal and dark, at default noise.
    times = [(2000 + 20000 * k) * chain.dt for k in range(10)]
    evs = [PhotonEvent(t, (1535 if k % 2 else 1366) * NM, kind=EventKind.SIGNAL if k % 2 else EventKind.DARK)
           for k, t in enumerate(times)]
    for seed in (1, 2, 3):
        tr = render_stream(EventStream(52e-6, evs, seed), params, chain, seed).trace
        segs = threshold_filter(tr, auto_threshold(chain.baseline, chain.noise_sigma), 400, 1000)
        assert len(segs) == len(evs)
        for seg, t in zip(segs, times):
            i = int(round(t * chain.sample_rate))
            assert seg.start_index <= i < seg.start_index + len(seg)


def test_auto_threshold_floor():
    assert auto_threshold(100, 2.0, 6.0) == 112.0
    assert auto_threshold(100, 0.0, 6.0) == 101.0


# --- scalar features --------------------------------------------------------

def test_triangle_fwhm():
    y = 100 + 100 * (1 - np.abs(np.arange(11) - 5) / 5)
    f = extract_features(PulseSegment(0, y, 1.0), 100)
    assert f.v_max == 100.0
    assert f.fwhm == pytest.approx(5.0)
    assert f.rise_time == pytest.approx(4.0)
    assert f.fall_time == pytest.approx(4.0)


@pytest.mark.parametrize("w", [3, 10, 57])
def test_rectangle_fwhm_within_one_sample(w):
    y = np.concatenate([np.zeros(5), np.full(w, 80.0), np.zeros(5)])
    assert abs(extract_features(PulseSegment(0, y, 1.0), 0).fwhm - w) <= 1


def test_truncated_pulse_raises():
    with pytest.raises(TruncatedPulseError):
        extract_features(PulseSegment(0, np.array([100, 150, 200, 180, 170]), 1.0), 100)
    with pytest.raises(ValueError):
        extract_features(PulseSegment(0, np.array([100, 100]), 1.0), 100)


def test_default_rendered_pulse_shape(params, chain):
    tr = render_event(PhotonEvent(0.0, 1535 * NM), params, chain, substream(2, "shape"))
    seg = threshold_filter(tr, 112, 400, 1000)[0]
    f = extract_features(seg, chain.baseline)
    assert 80e-9 <= f.fwhm <= 120e-9
    assert 0 < f.rise_time < f.fall_time


# --- histogram mode ---------------------------------------------------------

def test_identical_maxima():
    ref = histogram_mode([3400] * 150, 20)
    assert ref.mode_value == 3400 and ref.mode_probability == 1.0


def test_gaussian_mode_matches_brute_force():
    v = np.random.default_rng(1234).normal(3400, 50, 10 ** 4)
    ref = histogram_mode(v, 10)
    # Oracle: count every sample into the bin whose centre is the nearest multiple of 10.
    counts = Counter(int(np.floor(x / 10 + 0.5)) for x in v)
    top = max(counts.values())
    oracle = 10 * min(k for k, c in counts.items() if c == top)
    assert ref.mode_value == oracle
    assert abs(ref.mode_value - 3400) <= 10
    assert sum(p for _, p in ref.histogram) == pytest.approx(1.0, abs=1e-9)
    for c, p in ref.histogram:
        assert p == counts.get(int(round(c / 10)), 0) / v.size


def test_mode_tie_goes_to_lower_bin():
    assert histogram_mode([100] * 60 + [140] * 60, 20).mode_value == 100


def test_mode_input_checks():
    with pytest.raises(InsufficientDataError):
        histogram_mode([1.0] * 99, 10)
    with pytest.raises(ValueError):
        histogram_mode([1.0] * 100, 0.5)


def test_reference_round_trip():
    ref = histogram_mode(np.arange(100.0) * 3, 20)
    back = CalibrationReference.from_dict(ref.to_dict())
    assert back == ref
    assert back.probability(41.0) == ref.probability(41.0)


# --- calibration factor -----------------------------------------------------

@pytest.fixture(scope="module")
def ref():
    return histogram_mode(np.random.default_rng(7).normal(3400, 40, 2000), 20)


def test_factor_at_mode(ref):
    assert calibration_factor(ref.mode_value, ref, 2.0, 5.0) == 2.0 * ref.mode_probability


def test_factor_beta_zero_depends_only_on_probability(ref):
    for v in (3330.0, 3405.0, 3460.0):
        assert calibration_factor(v, ref, 1.5, 0.0) == 1.5 * ref.probability(v)


def test_factor_outside_support(ref):
    assert not ref.in_support(9000.0)
    assert calibration_factor(9000.0, ref) == pytest.approx((9000.0 - ref.mode_value) / ref.mode_value)


@settings(max_examples=100, deadline=None)
@given(v1=st.floats(3000, 3800), v2=st.floats(3000, 3800))
def test_factor_linearity_identity(ref, v1, v2):
    a = 1.3
    mid = (v1 + v2) / 2
    lhs = calibration_factor(v1, ref, a) + calibration_factor(v2, ref, a) - 2 * calibration_factor(mid, ref, a)
    rhs = a * (ref.probability(v1) + ref.probability(v2) - 2 * ref.probability(mid))
    assert abs(lhs - rhs) <= 1e-12


# --- feature vector ---------------------------------------------------------

def _features():
    return PulseFeatures(1.0, 1.0, 1.0, 1.0, 0.25)


def test_constant_segment_gives_constant_window():
    x = build_feature_vector(PulseSegment(0, np.full(300, 512), RATE), _features(), 0.7)
    assert np.all(x[:128] == 512 / 4095)
    assert x[128] == 0.25 and x[129] == 0.7


def test_window_len_equal_to_segment_is_identity():
    codes = np.random.default_rng(0).integers(0, 4096, 64)
    x = build_feature_vector(PulseSegment(0, codes, RATE), _features(), 0.7, window_len=64)
    np.testing.assert_allclose(x[:64], codes / 4095, rtol=1e-15)


def test_default_vector_length(params, chain, cfg):
    tr = render_event(PhotonEvent(0.0, 1535 * NM), params, chain, substream(3, "len"))
    seg = threshold_filter(tr, 112, 400, 1000)[0]
    f = extract_features(seg, chain.baseline)
    s = cfg.features
    x = build_feature_vector(seg, f, 0.7, s.window_len, 4095, s.window_span, s.window_pre_peak)
    assert x.shape == (130,)
    assert len(build_feature_vector(seg, f, 0.7)) == 130


@settings(max_examples=60, deadline=None)
@given(n=st.integers(16, 3000), frac=st.floats(0, 1))
def test_resampling_preserves_peak_position(n, frac):
    k = min(int(frac * n), n - 1)
    i = np.arange(n)
    codes = np.exp(-(((i - k) / max(n / 40, 1.0)) ** 2))
    w = resample_window(codes, 128)
    assert abs(np.argmax(w) / 127 - k / (n - 1)) <= 1 / 128 + 1e-12


def test_histogram_overlap_limits():
    a = np.arange(1000.0)
    assert histogram_overlap(a, a, 10) == pytest.approx(1.0)
    assert histogram_overlap(a, a + 5000, 10) == 0.0
