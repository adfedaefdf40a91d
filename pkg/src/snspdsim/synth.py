"""Event streams, readout-chain rendering and the bias-current sweep."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .physics import (EventKind, PhotonEvent, Polarization, SnspdParams, effective_gamma,
                      electron_excess, photon_energy, pulse_from_excess)
from .rng import substream

NM = 1e-9


@dataclass(frozen=True)
class ReadoutChain:
    """Amplifier and digitizer.

    ``noise_sigma`` is in ADC codes; ``jitter_sd`` is the relative standard
    deviation of the per-event amplitude factor. Each detection is recorded in
    a window of ``record_length`` seconds starting ``pre_trigger`` seconds
    before the photon arrival.
    """

    sample_rate: float = 4e9
    gain: float = 1000.0
    noise_sigma: float = 2.0
    baseline: int = 100
    adc_bits: int = 12
    full_scale: float = 3.6
    jitter_sd: float = 0.05
    record_length: float = 1.6e-6
    pre_trigger: float = 25e-9

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not 8 <= self.adc_bits <= 16:
            raise ValueError("adc_bits must lie in [8, 16]")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.baseline < 2 ** self.adc_bits:
            raise ValueError("baseline must lie in [0, 2**adc_bits)")
        if not (self.gain > 0 and self.full_scale > 0):
            raise ValueError("gain and full_scale must be positive")
        if not self.jitter_sd >= 0:
            raise ValueError("jitter_sd must be non-negative")
        if not (self.record_length > 0 and self.pre_trigger >= 0):
            raise ValueError("record_length must be positive and pre_trigger non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def max_code(self) -> int:
        return 2 ** self.adc_bits - 1

    @property
    def n_pre(self) -> int:
        return int(round(self.pre_trigger * self.sample_rate))

    @property
    def n_pulse(self) -> int:
        return int(round(self.record_length * self.sample_rate))

    def codes_per_volt(self) -> float:
        """ADC codes per volt at the detector output (gain included)."""
        return self.gain * 2 ** self.adc_bits / self.full_scale

    def quantize(self, volts: np.ndarray, noise_codes: np.ndarray | float = 0.0) -> np.ndarray:
        """Amplify, add noise, offset by the baseline, round half-to-even, clamp."""
        analog = self.baseline + np.asarray(volts) * self.codes_per_volt() + noise_codes
        return np.clip(np.rint(analog), 0, self.max_code).astype(np.int64)

    @classmethod
    def from_dict(cls, data: dict) -> "ReadoutChain":
        return _strict(cls, data, ints={"baseline", "adc_bits"})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DarkConfig:
    """Dark counts are stray photons of shorter wavelength than the signal."""

    wavelength_mean_nm: float = 1366.0
    wavelength_sd_nm: float = 5.0

    def __post_init__(self):
        if not self.wavelength_mean_nm > 0 or not self.wavelength_sd_nm >= 0:
            raise ValueError("dark wavelength mean must be positive and sd non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "DarkConfig":
        return _strict(cls, data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class BiasResponseSpec:
    """Detection efficiency versus bias: exponential rise up to ``i_th``,
    flat plateau, and zero counts above the latching current."""

    i_th: float = 0.070e-3
    s_rise: float = 0.005e-3
    i_latch: float = 0.0735e-3
    flux: float = 1e5
    integration_time: float = 1.0
    grid_start: float = 0.040e-3
    grid_stop: float = 0.090e-3
    grid_step: float = 0.0025e-3

    def __post_init__(self):
        if not (self.s_rise > 0 and self.integration_time > 0 and self.grid_step > 0):
            raise ValueError("s_rise, integration_time and grid_step must be positive")
        if not self.flux >= 0:
            raise ValueError("flux must be non-negative")
        if not self.grid_stop >= self.grid_start:
            raise ValueError("grid_stop must not precede grid_start")

    def grid(self) -> np.ndarray:
        n = int(math.floor((self.grid_stop - self.grid_start) / self.grid_step + 1e-9)) + 1
        return self.grid_start + self.grid_step * np.arange(n)

    def efficiency(self, i_bias) -> np.ndarray:
        i = np.asarray(i_bias, dtype=float)
        eta = np.minimum(1.0, np.exp(np.minimum((i - self.i_th) / self.s_rise, 0.0)))
        return np.where(i > self.i_latch, 0.0, eta)

    @classmethod
    def from_dict(cls, data: dict) -> "BiasResponseSpec":
        return _strict(cls, data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ScenarioKind(str, enum.Enum):
    DARK_VS_PHOTON = "DarkVsPhoton"
    WAVELENGTH_PAIR = "WavelengthPair"
    POLARIZATION_PAIR = "PolarizationPair"


@dataclass(frozen=True)
class ClassSpec:
    kind: EventKind = EventKind.SIGNAL
    wavelength_nm: float = 1535.0
    polarization: Polarization = Polarization.VERTICAL
    name: str = "photon"


@dataclass(frozen=True)
class ScenarioSpec:
    """Two event classes to tell apart. ``class_a`` is label 0, ``class_b`` label 1."""

    kind: ScenarioKind
    class_a: ClassSpec
    class_b: ClassSpec
    signal_rate: float = 1e4
    dark_rate: float = 2.5
    n_per_class: int = 5000

    def __post_init__(self):
        if self.n_per_class < 100:
            raise ValueError("n_per_class must be at least 100")
        if self.signal_rate < 0 or self.dark_rate < 0:
            raise ValueError("rates must be non-negative")
        if self.kind is ScenarioKind.WAVELENGTH_PAIR:
            for c in (self.class_a, self.class_b):
                if not 1520.0 <= c.wavelength_nm <= 1550.0:
                    raise ValueError(f"wavelength {c.wavelength_nm} nm outside [1520, 1550] nm")

    @property
    def class_names(self) -> tuple[str, str]:
        return (self.class_a.name, self.class_b.name)

    @property
    def reference_class(self) -> int:
        # Calibration is referenced to the ordinary photon class.
        return 1 if self.kind is ScenarioKind.DARK_VS_PHOTON else 0

    @classmethod
    def dark_vs_photon(cls, wavelength_nm=1535.0, **kw) -> "ScenarioSpec":
        return cls(ScenarioKind.DARK_VS_PHOTON,
                   ClassSpec(EventKind.DARK, wavelength_nm, Polarization.VERTICAL, "dark"),
                   ClassSpec(EventKind.SIGNAL, wavelength_nm, Polarization.VERTICAL, "photon"), **kw)

    @classmethod
    def wavelength_pair(cls, wl_a_nm: float, wl_b_nm: float, **kw) -> "ScenarioSpec":
        return cls(ScenarioKind.WAVELENGTH_PAIR,
                   ClassSpec(EventKind.SIGNAL, wl_a_nm, Polarization.VERTICAL, f"{wl_a_nm:g}nm"),
                   ClassSpec(EventKind.SIGNAL, wl_b_nm, Polarization.VERTICAL, f"{wl_b_nm:g}nm"), **kw)

    @classmethod
    def polarization_pair(cls, wavelength_nm=1535.0, **kw) -> "ScenarioSpec":
        return cls(ScenarioKind.POLARIZATION_PAIR,
                   ClassSpec(EventKind.SIGNAL, wavelength_nm, Polarization.VERTICAL, "vertical"),
                   ClassSpec(EventKind.SIGNAL, wavelength_nm, Polarization.HORIZONTAL, "horizontal"), **kw)


@dataclass
class EventStream:
    duration: float
    events: list[PhotonEvent]
    seed: int

    def __post_init__(self):
        arrivals = [e.arrival for e in self.events]
        if any(not 0 <= a < self.duration for a in arrivals):
            raise ValueError("event arrivals must lie in [0, duration)")
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("events must be sorted by arrival")

    def __len__(self):
        return len(self.events)

    def count(self, kind: EventKind) -> int:
        return sum(e.kind is kind for e in self.events)


@dataclass
class AdcTrace:
    sample_rate: float
    codes: np.ndarray
    t_start: float = 0.0
    adc_bits: int = 12

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > 2 ** self.adc_bits - 1):
            raise ValueError("ADC codes outside the converter range")

    def __len__(self):
        return len(self.codes)

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(len(self.codes)) / self.sample_rate


@dataclass
class StreamRender:
    trace: AdcTrace
    overlaps: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class BiasSweepResult:
    bias_points: list[tuple[float, float]]

    def __post_init__(self):
        biases = [b for b, _ in self.bias_points]
        if biases != sorted(biases):
            raise ValueError("bias points must be sorted by bias")


def _strict(cls, data: dict, ints: set = frozenset()):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: (int(v) if k in ints else float(v)) for k, v in data.items()})


def dark_event_sampler(config: DarkConfig, rng: np.random.Generator, arrival: float = 0.0,
                       signal_wavelength_nm: float | None = None) -> PhotonEvent:
    """Draw one dark count: a photon with wavelength ~ Normal(mean, sd), truncated positive."""
    if signal_wavelength_nm is not None and not config.wavelength_mean_nm < signal_wavelength_nm:
        raise ValueError("dark wavelength mean must be shorter than the signal wavelength")
    wl = rng.normal(config.wavelength_mean_nm, config.wavelength_sd_nm)
    while wl <= 0:
        wl = rng.normal(config.wavelength_mean_nm, config.wavelength_sd_nm)
    return PhotonEvent(arrival, wl * NM, Polarization.VERTICAL, EventKind.DARK)


def _poisson_arrivals(rate: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(rate * duration) if rate > 0 else 0
    return np.sort(rng.random(n) * duration)


def generate_event_stream(scenario: ScenarioSpec, duration: float, rng_seed: int,
                          dark: DarkConfig = DarkConfig()) -> EventStream:
    """Poisson signal photons (of ``scenario.class_a`` unless it is a dark class)
    merged with Poisson dark counts."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    signal_cls = scenario.class_b if scenario.class_a.kind is EventKind.DARK else scenario.class_a
    sig_t = _poisson_arrivals(scenario.signal_rate, duration, substream(rng_seed, "signal-arrivals"))
    dark_t = _poisson_arrivals(scenario.dark_rate, duration, substream(rng_seed, "dark-arrivals"))
    dark_rng = substream(rng_seed, "dark-wavelengths")
    events = [PhotonEvent(float(t), signal_cls.wavelength_nm * NM, signal_cls.polarization, EventKind.SIGNAL)
              for t in sig_t]
    events += [dark_event_sampler(dark, dark_rng, float(t)) for t in dark_t]
    events.sort(key=lambda e: (e.arrival, e.kind is EventKind.DARK))
    return EventStream(duration, events, int(rng_seed))


def event_voltage(event: PhotonEvent, params: SnspdParams, chain: ReadoutChain, jitter: float = 1.0,
                  energy: float | None = None) -> np.ndarray:
    """Detector voltage pulse for ``event`` sampled on the ADC grid, ``chain.n_pulse`` long."""
    energy = photon_energy(event) if energy is None else energy
    gamma = effective_gamma(params, event.polarization)
    excess = electron_excess(energy, gamma, params, chain.dt, chain.n_pulse * chain.dt)
    return jitter * pulse_from_excess(excess, params)[: chain.n_pulse]


def draw_jitter(chain: ReadoutChain, rng: np.random.Generator) -> float:
    return float(rng.normal(1.0, chain.jitter_sd))


def render_event(event: PhotonEvent, params: SnspdParams, chain: ReadoutChain,
                 rng: np.random.Generator, energy: float | None = None) -> AdcTrace:
    """Digitize one detection in its own record window.

    The generator is consumed in a fixed order: the amplitude jitter factor,
    then one noise draw per sample.
    """
    jitter = draw_jitter(chain, rng)
    volts = np.zeros(chain.n_pre + chain.n_pulse)
    volts[chain.n_pre:] = event_voltage(event, params, chain, jitter, energy)
    noise = rng.normal(0.0, chain.noise_sigma, volts.size) if chain.noise_sigma > 0 else 0.0
    codes = chain.quantize(volts, noise)
    return AdcTrace(chain.sample_rate, codes, event.arrival - chain.n_pre * chain.dt, chain.adc_bits)


def render_stream(stream: EventStream, params: SnspdParams, chain: ReadoutChain, seed: int) -> StreamRender:
    """Superpose every event's voltage pulse on one timeline and digitize once.

    Event ``i`` draws its jitter from substream ``(seed, "event", i)`` and the
    whole trace draws its noise from ``(seed, "noise")``.
    """
    n = int(math.ceil(stream.duration * chain.sample_rate - 1e-9))
    volts = np.zeros(n)
    overlaps = []
    pulse_end = -math.inf
    for i, ev in enumerate(stream.events):
        start = int(round(ev.arrival * chain.sample_rate))
        pulse = event_voltage(ev, params, chain, draw_jitter(chain, event_rng(seed, i)))
        stop = min(n, start + pulse.size)
        volts[start:stop] += pulse[: stop - start]
        if ev.arrival < pulse_end:
            overlaps.append((ev.arrival, pulse_end))
        pulse_end = max(pulse_end, ev.arrival + chain.record_length)
    noise_rng = substream(seed, "noise")
    noise = noise_rng.normal(0.0, chain.noise_sigma, n) if chain.noise_sigma > 0 else 0.0
    trace = AdcTrace(chain.sample_rate, chain.quantize(volts, noise), 0.0, chain.adc_bits)
    return StreamRender(trace, overlaps)


def event_rng(seed: int, index: int) -> np.random.Generator:
    return substream(seed, "event", index)


def bias_sweep(bias_grid: Sequence[float], flux: float, params: SnspdParams, model: BiasResponseSpec,
               rng: np.random.Generator) -> BiasSweepResult:
    """Poisson-sampled count rate at each bias current.

    ``params`` is accepted for interface symmetry; the response is set by ``model``.
    """
    grid = np.asarray(bias_grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("bias grid must be sorted ascending")
    expected = flux * model.efficiency(grid) * model.integration_time
    counts = rng.poisson(expected) / model.integration_time
    return BiasSweepResult([(float(i), float(c)) for i, c in zip(grid, counts)])


def select_optimal_bias(sweep: BiasSweepResult) -> float:
    """Lowest bias current reaching the maximum count rate."""
    if not sweep.bias_points:
        raise ValueError("empty bias sweep")
    best = max(c for _, c in sweep.bias_points)
    return next(i for i, c in sweep.bias_points if c == best)


def write_trace_csv(trace: AdcTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t_ns,adc_code\n")
        t_ns = trace.times * 1e9
        fh.writelines(f"{t:.3f},{c}\n" for t, c in zip(t_ns, trace.codes.tolist()))


def read_trace_csv(path, adc_bits: int = 12) -> AdcTrace:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t_ns, codes = data[:, 0], data[:, 1].astype(np.int64)
    rate = 1e9 / (t_ns[1] - t_ns[0]) if len(t_ns) > 1 else 4e9
    return AdcTrace(rate, codes, t_ns[0] * 1e-9, adc_bits)


EVENT_HEADER = ["event_id", "arrival_s", "kind", "wavelength_nm", "polarization"]


def write_events_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for i, e in enumerate(stream.events):
            w.writerow([i, repr(e.arrival), e.kind.value, repr(e.wavelength / NM), e.polarization.value])


def read_events_csv(path, duration: float, seed: int = 0) -> EventStream:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    events = [PhotonEvent(float(r["arrival_s"]), float(r["wavelength_nm"]) * NM,
                          Polarization(r["polarization"]), EventKind(r["kind"])) for r in rows]
    return EventStream(duration, events, seed)
