"""Classification studies and the emitter dark-count elimination study."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import fcnn
from .config import DecayExperiment, FeatureSettings, NnConfig, PipelineConfig
from .features import (CalibrationReference, PulseFeatures, PulseSegment, build_feature_vector,
                       calibration_factor, extract_features, histogram_mode, threshold_filter)
from .physics import EventKind, PhotonEvent, SnspdParams
from .rng import derive_seed, substream
from .synth import (NM, ClassSpec, DarkConfig, ReadoutChain, ScenarioKind, ScenarioSpec, dark_event_sampler,
                    render_event)

__all__ = [
    "ScenarioSpec", "ScenarioKind", "ClassSpec", "DecayExperiment", "DecayFit", "Detection",
    "DatasetIntegrityError", "FitFailure", "build_dataset", "train_and_evaluate", "wavelength_study",
    "polarization_study", "simulate_emitter", "fit_exponential", "dark_elimination_study",
]

FEATURE_HEADER = ["event_id", "label", "v_max", "fwhm_ns", "rise_ns", "fall_ns", "calib_factor"]


class DatasetIntegrityError(RuntimeError):
    pass


class FitFailure(RuntimeError):
    def __init__(self, message: str, initial: "DecayFit"):
        super().__init__(message)
        self.initial = initial


@dataclass
class SegmentedPulse:
    segment: PulseSegment
    features: PulseFeatures
    peak_code: int


def segment_detection(codes_trace, chain: ReadoutChain, settings: FeatureSettings) -> list[SegmentedPulse]:
    segments = threshold_filter(codes_trace, settings.trigger_level(chain), settings.pre_pad, settings.post_pad)
    return [SegmentedPulse(s, extract_features(s, chain.baseline), int(s.codes.max())) for s in segments]


def _class_event(cls: ClassSpec, dark: DarkConfig, rng: np.random.Generator) -> PhotonEvent:
    if cls.kind is EventKind.DARK:
        return dark_event_sampler(dark, rng)
    return PhotonEvent(0.0, cls.wavelength_nm * NM, cls.polarization, EventKind.SIGNAL)


def feature_vector(pulse: SegmentedPulse, reference: CalibrationReference, params: SnspdParams,
                   chain: ReadoutChain, settings: FeatureSettings) -> np.ndarray:
    pulse.features.calib_factor = calibration_factor(pulse.peak_code, reference, settings.alpha, settings.beta)
    return build_feature_vector(pulse.segment, pulse.features, params.i_bias / settings.bias_scale,
                                settings.window_len, float(chain.max_code), settings.window_span,
                                settings.window_pre_peak)


def build_dataset(spec: ScenarioSpec, params: SnspdParams, chain: ReadoutChain, seed: int,
                  settings: FeatureSettings = FeatureSettings(), dark: DarkConfig = DarkConfig(),
                  test_fraction: float = 0.2) -> fcnn.LabeledDataset:
    """Simulate, digitize and featurize ``n_per_class`` detections of each class.

    Each detection is recorded in its own trigger-gated window. The
    calibration reference is the maximum-code histogram of the training rows
    of ``spec.reference_class``; per-class references are reported in
    ``meta["class_references"]``. ``meta["train_mask"]`` marks the stratified
    training rows.
    """
    n = spec.n_per_class
    classes = (spec.class_a, spec.class_b)
    pulses: list[SegmentedPulse] = []
    missing = extra = 0
    for label, cls in enumerate(classes):
        for j in range(n):
            rng = substream(seed, "dataset", label, j)
            trace = render_event(_class_event(cls, dark, rng), params, chain, rng)
            found = segment_detection(trace, chain, settings)
            if len(found) == 0:
                missing += 1
                continue
            extra += len(found) - 1
            pulses.append(max(found, key=lambda p: p.peak_code))
    if missing or extra:
        raise DatasetIntegrityError(f"filter found {2 * n - missing} of {2 * n} detections "
                                    f"({missing} missed, {extra} spurious segments)")
    targets = np.repeat([0, 1], n)
    train_mask = fcnn.stratified_split(targets, test_fraction, derive_seed(seed, "split"))
    peaks = np.array([p.peak_code for p in pulses], dtype=float)
    class_refs = [histogram_mode(peaks[(targets == k) & train_mask], settings.bin_width) for k in (0, 1)]
    reference = class_refs[spec.reference_class]
    inputs = np.array([feature_vector(p, reference, params, chain, settings) for p in pulses])
    table = np.array([[p.features.v_max, p.features.fwhm * 1e9, p.features.rise_time * 1e9,
                       p.features.fall_time * 1e9, p.features.calib_factor] for p in pulses])
    meta = {
        "scenario": spec.kind.value,
        "seed": int(seed),
        "train_mask": train_mask,
        "features": table,
        "reference": reference.to_dict(),
        "class_references": [r.to_dict() for r in class_refs],
        "peak_codes": peaks,
    }
    return fcnn.LabeledDataset.from_targets(inputs, targets, spec.class_names, meta)


def split(dataset: fcnn.LabeledDataset) -> tuple[fcnn.LabeledDataset, fcnn.LabeledDataset]:
    mask = dataset.meta["train_mask"]
    return dataset.subset(mask), dataset.subset(~mask)


def write_feature_csv(dataset: fcnn.LabeledDataset, path, rows=None) -> None:
    """Per-detection features followed by the resampled window ``w0..`` and the bias input."""
    rows = np.arange(len(dataset)) if rows is None else np.flatnonzero(rows) if np.asarray(rows).dtype == bool \
        else np.asarray(rows)
    table = dataset.meta["features"]
    window_len = dataset.inputs.shape[1] - 2
    header = FEATURE_HEADER + [f"w{i}" for i in range(window_len)] + ["bias_norm"]
    targets = dataset.targets
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in rows.tolist():
            x = dataset.inputs[i]
            w.writerow([i, int(targets[i])] + [repr(float(v)) for v in table[i]]
                       + [repr(float(v)) for v in x[:window_len]] + [repr(float(x[-1]))])


def read_feature_csv(path, class_names=("class0", "class1")) -> fcnn.LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:len(FEATURE_HEADER)] != FEATURE_HEADER or header[-1] != "bias_norm":
            raise ValueError(f"{path}: not a feature file")
        rows = [r for r in reader]
    data = np.array([[float(v) for v in r] for r in rows]) if rows else np.zeros((0, len(header)))
    k = len(FEATURE_HEADER)
    calib = data[:, 6:7]
    window = data[:, k:-1]
    inputs = np.hstack([window, calib, data[:, -1:]])
    meta = {"event_ids": data[:, 0].astype(int), "features": data[:, 2:k]}
    return fcnn.LabeledDataset.from_targets(inputs, data[:, 1].astype(int), class_names, meta)


@dataclass
class StudyResult:
    accuracy: float
    evaluation: fcnn.Evaluation
    model: fcnn.FcnnModel
    loss_curve: list[float]
    test_set: fcnn.LabeledDataset


def train_and_evaluate(dataset: fcnn.LabeledDataset, nn: NnConfig, seed: int) -> StudyResult:
    train_set, test_set = split(dataset)
    result = fcnn.train(train_set, nn.arch(dataset.inputs.shape[1]), nn.lr, nn.epochs, nn.batch,
                        nn.init_scale, derive_seed(seed, "train"))
    result.model.calibration = dataset.meta.get("reference")
    ev = fcnn.evaluate(result.model, test_set)
    return StudyResult(ev.accuracy, ev, result.model, result.loss_curve, test_set)


def wavelength_study(deltas: Sequence[float], config: PipelineConfig, seed: int,
                     n_per_class: int | None = None) -> list[tuple[float, float]]:
    """Test accuracy separating the centre wavelength from centre + delta, per delta (nm).

    Every delta reuses the same seed, so the noise realizations are shared.
    """
    if any(d <= 0 for d in deltas):
        raise ValueError("wavelength deltas must be positive")
    centre = config.scenario.signal_wavelength_nm
    n = n_per_class or config.scenario.n_per_class
    table = []
    for delta in deltas:
        spec = ScenarioSpec.wavelength_pair(centre, centre + delta, n_per_class=n,
                                            signal_rate=config.scenario.signal_rate, dark_rate=0.0)
        ds = build_dataset(spec, config.physics, config.chain, seed, config.features, config.dark,
                           config.nn.test_fraction)
        table.append((float(delta), train_and_evaluate(ds, config.nn, seed).accuracy))
    return table


@dataclass
class PolarizationResult:
    accuracy: float
    evaluation: fcnn.Evaluation
    hidden: np.ndarray
    labels: np.ndarray


def polarization_study(config: PipelineConfig, seed: int, export_path=None,
                       n_per_class: int | None = None) -> PolarizationResult:
    """Vertical versus horizontal photons at the centre wavelength."""
    if config.physics.pol_ratio == 1.0:
        warnings.warn("pol_ratio is 1: the two polarization classes are identical", stacklevel=2)
    spec = ScenarioSpec.polarization_pair(config.scenario.signal_wavelength_nm,
                                          n_per_class=n_per_class or config.scenario.n_per_class,
                                          signal_rate=config.scenario.signal_rate, dark_rate=0.0)
    ds = build_dataset(spec, config.physics, config.chain, seed, config.features, config.dark,
                       config.nn.test_fraction)
    res = train_and_evaluate(ds, config.nn, seed)
    if export_path is not None:
        hidden = fcnn.export_penultimate_features(res.model, res.test_set, export_path)
    else:
        hidden = fcnn.hidden_activations(res.model, res.test_set.inputs)
    return PolarizationResult(res.accuracy, res.evaluation, hidden, res.test_set.targets)


def centroid_separation(features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Distance between class centroids and the mean distance of points to their own centroid."""
    c0 = features[labels == 0].mean(axis=0)
    c1 = features[labels == 1].mean(axis=0)
    within = np.concatenate([np.linalg.norm(features[labels == 0] - c0, axis=1),
                             np.linalg.norm(features[labels == 1] - c1, axis=1)]).mean()
    return float(np.linalg.norm(c0 - c1)), float(within)


@dataclass
class Detection:
    cycle: int
    index: int
    delay: float
    kind: EventKind
    event: PhotonEvent
    seed: int

    def waveform(self, params: SnspdParams, chain: ReadoutChain):
        """Digitized record of this detection; regenerated deterministically on demand."""
        return render_event(self.event, params, chain, substream(self.seed, "emitter-render", self.cycle, self.index))


def simulate_emitter(exp: DecayExperiment, params: SnspdParams, chain: ReadoutChain, seed: int,
                     signal_wavelength_nm: float = 1535.0, dark: DarkConfig = DarkConfig()) -> list[Detection]:
    """Time-tagged detections after each excitation pulse, inside the acquisition window.

    Per cycle the emitter releases one photon with probability ``p_emit`` after
    an exponential delay; dark counts arrive as a Poisson process over the
    window. Delays beyond the window are discarded.
    """
    rng = substream(seed, "emitter")
    emitted = rng.random(exp.n_cycles) < exp.p_emit
    delays = rng.exponential(exp.lifetime, exp.n_cycles)
    n_dark = rng.poisson(exp.dark_rate * exp.window, exp.n_cycles)
    dark_rng = substream(seed, "emitter-dark")
    out: list[Detection] = []
    for c in range(exp.n_cycles):
        hits = []
        if emitted[c] and delays[c] < exp.window:
            hits.append((float(delays[c]), EventKind.SIGNAL))
        for t in dark_rng.random(n_dark[c]) * exp.window:
            hits.append((float(t), EventKind.DARK))
        hits.sort(key=lambda h: h[0])
        for k, (t, kind) in enumerate(hits):
            if kind is EventKind.SIGNAL:
                ev = PhotonEvent(c * exp.pulse_period + t, signal_wavelength_nm * NM, kind=EventKind.SIGNAL)
            else:
                ev = dark_event_sampler(dark, dark_rng, c * exp.pulse_period + t)
            out.append(Detection(c, k, t, kind, ev, int(seed)))
    return out


def delay_histogram(delays, exp: DecayExperiment) -> tuple[np.ndarray, np.ndarray]:
    edges = exp.bin_width * np.arange(exp.n_bins + 1)
    counts, _ = np.histogram(np.asarray(delays, dtype=float), bins=edges)
    return 0.5 * (edges[:-1] + edges[1:]), counts.astype(float)


@dataclass
class DecayFit:
    amplitude: float
    lifetime_est: float
    rms_error: float
    histogram: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)
    iterations: int = 0

    def curve(self, t) -> np.ndarray:
        return self.amplitude * np.exp(-np.asarray(t) / self.lifetime_est)


def _rms(t, y, a, tau) -> float:
    return float(np.sqrt(np.mean((y - a * np.exp(-t / tau)) ** 2)))


def fit_exponential(centers, counts, max_iter: int = 100, tol: float = 1e-12) -> DecayFit:
    """Unweighted least-squares fit of ``A exp(-t / tau)`` to a histogram.

    Starts from a straight-line fit to the logarithm of the nonzero bins and
    refines with Gauss-Newton steps, halving a step while it fails to lower
    the squared error.
    """
    t = np.asarray(centers, dtype=float)
    y = np.asarray(counts, dtype=float)
    nz = y > 0
    if nz.sum() < 5:
        raise ValueError("need at least 5 nonzero bins")
    slope, intercept = np.polyfit(t[nz], np.log(y[nz]), 1)
    span = float(t.max() - t.min()) or 1.0
    tau = -1.0 / slope if slope < 0 else span
    a = float(np.exp(intercept))
    initial = DecayFit(a, tau, _rms(t, y, a, tau), (t, y), 0)
    sse = float(np.sum((y - a * np.exp(-t / tau)) ** 2))
    for it in range(1, max_iter + 1):
        e = np.exp(-t / tau)
        r = y - a * e
        jac = np.column_stack([e, a * t * e / tau ** 2])
        step, *_ = np.linalg.lstsq(jac, r, rcond=None)
        lam = 1.0
        while True:
            a_new, tau_new = a + lam * step[0], tau + lam * step[1]
            if tau_new > 0:
                sse_new = float(np.sum((y - a_new * np.exp(-t / tau_new)) ** 2))
                if sse_new <= sse:
                    break
            lam *= 0.5
            if lam < 1e-10:
                a_new, tau_new, sse_new = a, tau, sse
                break
        converged = (abs(a_new - a) <= tol * max(abs(a), 1e-300)
                     and abs(tau_new - tau) <= tol * tau) or sse_new == 0.0 or sse - sse_new <= tol * tol * sse
        a, tau, sse = a_new, tau_new, sse_new
        if converged:
            return DecayFit(a, tau, _rms(t, y, a, tau), (t, y), it)
    raise FitFailure(f"Gauss-Newton did not converge in {max_iter} iterations", initial)


@dataclass
class EliminationResult:
    rms_with_dark: float
    rms_filtered: float
    improvement_ratio: float
    confusion: np.ndarray  # rows: true (dark, photon), columns: kept as (dark, photon)
    fit_all: DecayFit
    fit_filtered: DecayFit
    counts_all: np.ndarray
    counts_filtered: np.ndarray
    centers: np.ndarray

    def metrics(self) -> dict:
        return {"rms_with_dark": self.rms_with_dark, "rms_filtered": self.rms_filtered,
                "improvement_ratio": self.improvement_ratio, "confusion": self.confusion.tolist(),
                "lifetime_all": self.fit_all.lifetime_est, "lifetime_filtered": self.fit_filtered.lifetime_est}


def model_classifier(model: fcnn.FcnnModel, params: SnspdParams, chain: ReadoutChain,
                     settings: FeatureSettings) -> Callable[[Detection], int]:
    """Wrap a trained dark-vs-photon model as ``detection -> 1 (photon) / 0 (dark)``."""
    if model.calibration is None:
        raise ValueError("model carries no calibration reference")
    reference = CalibrationReference.from_dict(model.calibration)

    def classify(det: Detection) -> int:
        found = segment_detection(det.waveform(params, chain), chain, settings)
        if not found:
            return 0
        pulse = max(found, key=lambda p: p.peak_code)
        return fcnn.predict(model, feature_vector(pulse, reference, params, chain, settings))[0]

    return classify


def oracle_classifier(det: Detection) -> int:
    return 1 if det.kind is EventKind.SIGNAL else 0


def dark_elimination_study(exp: DecayExperiment, model: fcnn.FcnnModel | None, params: SnspdParams,
                           chain: ReadoutChain, seed: int, settings: FeatureSettings = FeatureSettings(),
                           dark: DarkConfig = DarkConfig(), classifier: Callable | None = None,
                           signal_wavelength_nm: float = 1535.0) -> EliminationResult:
    """Fit the delay histogram with and without the detections the classifier calls dark.

    ``classifier`` overrides the model (for instance :func:`oracle_classifier`).
    The improvement ratio is the RMS fit residual of the raw histogram over
    that of the filtered one.
    """
    if classifier is None:
        classifier = model_classifier(model, params, chain, settings)
    detections = simulate_emitter(exp, params, chain, seed, signal_wavelength_nm, dark)
    kept = np.array([classifier(d) == 1 for d in detections], dtype=bool)
    truth = np.array([d.kind is EventKind.SIGNAL for d in detections], dtype=bool)
    delays = np.array([d.delay for d in detections])
    centers, counts_all = delay_histogram(delays, exp)
    _, counts_kept = delay_histogram(delays[kept], exp)
    fit_all = fit_exponential(centers, counts_all)
    fit_kept = fit_exponential(centers, counts_kept)
    confusion = fcnn.evaluate_predictions(truth.astype(int), kept.astype(int)).confusion \
        if len(detections) else np.zeros((2, 2), dtype=np.int64)
    ratio = fit_all.rms_error / fit_kept.rms_error if fit_kept.rms_error > 0 else math.inf
    return EliminationResult(fit_all.rms_error, fit_kept.rms_error, ratio, confusion, fit_all, fit_kept,
                             counts_all, counts_kept, centers)
