import dataclasses

import numpy as np
import pytest

from snspdsim.config import DecayExperiment, FeatureSettings, NnConfig
from snspdsim.experiments import (DatasetIntegrityError, FitFailure, build_dataset, centroid_separation,
                                  dark_elimination_study, delay_histogram, fit_exponential, oracle_classifier,
                                  polarization_study, read_feature_csv, simulate_emitter, split,
                                  train_and_evaluate, wavelength_study, write_feature_csv)
from snspdsim.features import histogram_overlap
from snspdsim.physics import EventKind
from snspdsim.synth import ScenarioSpec

SMALL_NN = NnConfig(hidden=(16, 8), lr=0.1, epochs=30, batch=32)


@pytest.fixture(scope="module")
def small_cfg():
    from snspdsim.config import default_config
    return dataclasses.replace(default_config(), nn=SMALL_NN)


@pytest.fixture(scope="module")
def dvp(small_cfg):
    spec = ScenarioSpec.dark_vs_photon(n_per_class=300)
    return build_dataset(spec, small_cfg.physics, small_cfg.chain, 5, small_cfg.features, small_cfg.dark)


@pytest.fixture(scope="module")
def dvp_model(dvp):
    return train_and_evaluate(dvp, SMALL_NN, 5).model


# --- datasets ---------------------------------------------------------------

def test_dataset_shape_and_balance(dvp):
    assert dvp.inputs.shape == (600, 130)
    assert np.bincount(dvp.targets).tolist() == [300, 300]
    assert dvp.class_names == ("dark", "photon")
    train, test = split(dvp)
    assert len(train) == 480 and np.bincount(test.targets).tolist() == [60, 60]


def test_dataset_reference_is_photon_training_histogram(dvp):
    ref = dvp.meta["reference"]
    assert abs(ref["mode_value"] - 3400) <= 20
    assert abs(dvp.meta["class_references"][0]["mode_value"] - 3800) <= 20


def test_dataset_files_are_reproducible(tmp_path, small_cfg):
    spec = ScenarioSpec.polarization_pair(n_per_class=130)
    paths = []
    for k in range(2):
        ds = build_dataset(spec, small_cfg.physics, small_cfg.chain, 77, small_cfg.features)
        paths.append(tmp_path / f"d{k}.csv")
        write_feature_csv(ds, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_feature_csv_round_trip(tmp_path, dvp):
    path = tmp_path / "f.csv"
    write_feature_csv(dvp, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:7] == ["event_id", "label", "v_max", "fwhm_ns", "rise_ns", "fall_ns", "calib_factor"]
    assert header[7] == "w0" and header[134] == "w127" and header[-1] == "bias_norm"
    back = read_feature_csv(path)
    assert np.array_equal(back.inputs, dvp.inputs)
    assert np.array_equal(back.targets, dvp.targets)


def test_missing_detections_raise_integrity_error(small_cfg):
    blind = FeatureSettings(threshold_mode="fixed", threshold=4000.0)
    with pytest.raises(DatasetIntegrityError, match="missed"):
        build_dataset(ScenarioSpec.dark_vs_photon(n_per_class=100), small_cfg.physics, small_cfg.chain, 1, blind)


def test_scenario_checks():
    with pytest.raises(ValueError):
        ScenarioSpec.dark_vs_photon(n_per_class=99)
    with pytest.raises(ValueError):
        ScenarioSpec.wavelength_pair(1535.0, 1560.0)


# --- classification studies ---------------------------------------------------

def test_identical_wavelengths_are_indistinguishable(small_cfg):
    spec = ScenarioSpec.wavelength_pair(1535.0, 1535.0, n_per_class=500)
    ds = build_dataset(spec, small_cfg.physics, small_cfg.chain, 3, small_cfg.features)
    assert abs(train_and_evaluate(ds, SMALL_NN, 3).accuracy - 0.5) <= 0.12


def test_large_wavelength_offset_is_separable(small_cfg):
    spec = ScenarioSpec.wavelength_pair(1535.0, 1550.0, n_per_class=300)
    ds = build_dataset(spec, small_cfg.physics, small_cfg.chain, 4, small_cfg.features)
    peaks = ds.meta["peak_codes"]
    # Oracle before training: the maximum-code histograms do not overlap at all.
    assert histogram_overlap(peaks[ds.targets == 0], peaks[ds.targets == 1], 20.0) == 0.0
    assert train_and_evaluate(ds, SMALL_NN, 4).accuracy >= 0.99


def test_wavelength_study_table(small_cfg):
    table = wavelength_study([5.0, 15.0], small_cfg, 6, n_per_class=150)
    assert [d for d, _ in table] == [5.0, 15.0]
    assert all(0 <= a <= 1 for _, a in table)
    with pytest.raises(ValueError):
        wavelength_study([0.0], small_cfg, 6, n_per_class=150)


def test_polarization_study_and_export(tmp_path, small_cfg):
    res = polarization_study(small_cfg, 8, tmp_path / "h.csv", n_per_class=300)
    assert res.accuracy >= 0.99
    between, within = centroid_separation(res.hidden, res.labels)
    assert between > within
    assert len((tmp_path / "h.csv").read_text().splitlines()) == len(res.labels) + 1


def test_unit_pol_ratio_warns_and_is_chance(small_cfg):
    same = small_cfg.with_physics(pol_ratio=1.0)
    with pytest.warns(UserWarning, match="identical"):
        res = polarization_study(same, 8, n_per_class=500)
    assert abs(res.accuracy - 0.5) <= 0.12


# --- emitter ------------------------------------------------------------------

def _exp(**kw):
    return dataclasses.replace(DecayExperiment(), **kw)


def test_emitter_lifetime_mle_without_darks(params, chain):
    exp = _exp(dark_rate=0.0, p_emit=1.0)
    det = simulate_emitter(exp, params, chain, 3)
    assert all(d.kind is EventKind.SIGNAL for d in det)
    assert np.mean([d.delay for d in det]) == pytest.approx(exp.lifetime, rel=0.05)


def test_emitter_short_lifetime_fills_first_bin(params, chain):
    exp = _exp(lifetime=1e-9, dark_rate=0.0, p_emit=0.5)
    _, counts = delay_histogram([d.delay for d in simulate_emitter(exp, params, chain, 3)], exp)
    assert counts[0] == counts.sum() > 0


def test_emitter_detection_count_band(params, chain):
    exp = DecayExperiment()
    n = len(simulate_emitter(exp, params, chain, 4))
    # Emissions beyond the window are lost with probability exp(-window / lifetime).
    p_in = exp.p_emit * (1 - np.exp(-exp.window / exp.lifetime))
    mean = exp.n_cycles * p_in + exp.dark_rate * exp.window * exp.n_cycles
    var = exp.n_cycles * p_in * (1 - p_in) + exp.dark_rate * exp.window * exp.n_cycles
    assert abs(n - mean) <= 3 * np.sqrt(var)


def test_detection_waveform_is_reproducible(params, chain):
    det = simulate_emitter(_exp(n_cycles=50), params, chain, 4)[0]
    assert np.array_equal(det.waveform(params, chain).codes, det.waveform(params, chain).codes)


# --- decay fit ----------------------------------------------------------------

def test_noiseless_fit_recovers_parameters():
    exp = DecayExperiment()
    centers = exp.bin_width * (np.arange(exp.n_bins) + 0.5)
    counts = 123.4 * np.exp(-centers / 1.3e-3)
    fit = fit_exponential(centers, counts)
    assert fit.amplitude == pytest.approx(123.4, rel=1e-6)
    assert fit.lifetime_est == pytest.approx(1.3e-3, rel=1e-6)


def test_offset_contamination_raises_rms():
    centers = 0.2e-3 * (np.arange(50) + 0.5)
    clean = 100 * np.exp(-centers / 1e-3)
    assert fit_exponential(centers, clean + 5.0).rms_error > fit_exponential(centers, clean).rms_error


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_poisson_histogram_lifetime_within_five_percent(params, chain, seed):
    # Unweighted least squares scatters by about 4.5% at 10^4 cycles, so use enough cycles
    # for the 5% band to sit several standard deviations out.
    exp = _exp(dark_rate=0.0, n_cycles=200_000)
    det = simulate_emitter(exp, params, chain, seed)
    centers, counts = delay_histogram([d.delay for d in det], exp)
    assert fit_exponential(centers, counts).lifetime_est == pytest.approx(exp.lifetime, rel=0.05)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_exponential(np.arange(10.0), np.r_[np.ones(4), np.zeros(6)])
    centers = 0.2e-3 * (np.arange(50) + 0.5)
    with pytest.raises(FitFailure) as err:
        fit_exponential(centers, 100 * np.exp(-centers / 1e-3) + 3.0, max_iter=0)
    assert err.value.initial.lifetime_est > 0


# --- dark elimination -----------------------------------------------------------

def test_no_darks_means_no_improvement(params, chain):
    res = dark_elimination_study(_exp(dark_rate=0.0, n_cycles=3000), None, params, chain, 2,
                                 classifier=oracle_classifier)
    assert res.improvement_ratio == 1.0


def test_oracle_dominates_model_and_filter_only_removes(params, chain, small_cfg, dvp_model):
    exp = _exp(n_cycles=3000)
    model_res = dark_elimination_study(exp, dvp_model, params, chain, 9, small_cfg.features, small_cfg.dark)
    oracle_res = dark_elimination_study(exp, None, params, chain, 9, classifier=oracle_classifier)
    assert oracle_res.improvement_ratio >= model_res.improvement_ratio
    assert np.all(model_res.counts_filtered <= model_res.counts_all)
    c = model_res.confusion
    dark_recall = c[0, 0] / c[0].sum()
    photon_reject = c[1, 0] / c[1].sum()
    if dark_recall > photon_reject:
        assert model_res.improvement_ratio >= 1.0


def test_study_is_deterministic(params, chain):
    a = dark_elimination_study(_exp(n_cycles=2000), None, params, chain, 4, classifier=oracle_classifier)
    b = dark_elimination_study(_exp(n_cycles=2000), None, params, chain, 4, classifier=oracle_classifier)
    assert a.metrics() == b.metrics()


def test_model_without_reference_is_rejected(params, chain, dvp_model):
    bare = dvp_model.copy()
    bare.calibration = None
    with pytest.raises(ValueError):
        dark_elimination_study(_exp(n_cycles=10), bare, params, chain, 1)
