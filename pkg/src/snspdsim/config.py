"""Pipeline configuration: one JSON document, strictly validated."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

from .physics import SnspdParams
from .synth import BiasResponseSpec, DarkConfig, ReadoutChain

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class FeatureSettings:
    """Trigger, segmentation, calibration-factor and input-vector settings."""

    threshold_mode: str = "auto"
    k_sigma: float = 6.0
    threshold: float = 0.0
    pre_pad: int = 400
    post_pad: int = 1000
    bin_width: float = 20.0
    alpha: float = 1.0
    beta: float = 1.0
    window_len: int = 128
    window_span: int | None = 1024
    window_pre_peak: int = 40
    bias_scale: float = 1e-4

    def __post_init__(self):
        if self.threshold_mode not in ("auto", "fixed"):
            raise ValueError("threshold_mode must be 'auto' or 'fixed'")
        if self.pre_pad < 0 or self.post_pad < 0:
            raise ValueError("pads must be non-negative")
        if not self.bin_width >= 1:
            raise ValueError("bin_width must be at least 1")
        if self.window_len < 2:
            raise ValueError("window_len must be at least 2")
        if self.window_span is not None and not 0 <= self.window_pre_peak < self.window_span:
            raise ValueError("window_pre_peak must lie inside window_span")
        if not self.bias_scale > 0:
            raise ValueError("bias_scale must be positive")

    def trigger_level(self, chain: ReadoutChain) -> float:
        from .features import auto_threshold
        if self.threshold_mode == "fixed":
            return self.threshold
        return auto_threshold(chain.baseline, chain.noise_sigma, self.k_sigma)


@dataclass(frozen=True)
class NnConfig:
    hidden: tuple = (128, 64, 32)
    lr: float = 0.05
    epochs: int = 200
    batch: int = 32
    init_scale: float | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden layer sizes must be positive")
        if self.lr < 0 or self.epochs < 0 or self.batch <= 0:
            raise ValueError("lr and epochs must be non-negative, batch positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")

    def arch(self, n_inputs: int) -> list[int]:
        return [n_inputs, *self.hidden, 2]


@dataclass(frozen=True)
class ScenarioDefaults:
    signal_wavelength_nm: float = 1535.0
    signal_rate: float = 1e4
    dark_rate: float = 2.5
    n_per_class: int = 5000
    wavelength_deltas_nm: tuple = (0.4, 1.0, 2.0, 5.0, 10.0, 15.0)

    def __post_init__(self):
        object.__setattr__(self, "wavelength_deltas_nm", tuple(float(d) for d in self.wavelength_deltas_nm))
        if self.n_per_class < 100:
            raise ValueError("n_per_class must be at least 100")
        if any(d <= 0 for d in self.wavelength_deltas_nm):
            raise ValueError("wavelength deltas must be positive")


@dataclass(frozen=True)
class DecayExperiment:
    """Pulsed excitation of an exponential emitter observed through the detector."""

    lifetime: float = 1e-3
    pulse_period: float = 20e-3
    n_cycles: int = 10000
    dark_rate: float = 6.5
    bin_width: float = 0.2e-3
    window: float = 10e-3
    p_emit: float = 0.1

    def __post_init__(self):
        if not (self.lifetime > 0 and self.bin_width > 0 and self.n_cycles > 0):
            raise ValueError("lifetime, bin_width and n_cycles must be positive")
        if not self.window < self.pulse_period:
            raise ValueError("window must be shorter than the pulse period")
        if not self.bin_width < self.window:
            raise ValueError("bin_width must be shorter than the window")
        if not 0 <= self.p_emit <= 1 or self.dark_rate < 0:
            raise ValueError("p_emit must lie in [0, 1] and dark_rate be non-negative")

    @property
    def n_bins(self) -> int:
        return int(round(self.window / self.bin_width))


@dataclass(frozen=True)
class PipelineConfig:
    physics: SnspdParams
    chain: ReadoutChain = ReadoutChain()
    dark: DarkConfig = DarkConfig()
    bias: BiasResponseSpec = BiasResponseSpec()
    features: FeatureSettings = FeatureSettings()
    nn: NnConfig = NnConfig()
    scenario: ScenarioDefaults = ScenarioDefaults()
    emitter: DecayExperiment = DecayExperiment()
    seed: int = 42

    def to_dict(self) -> dict:
        d = {"format_version": CONFIG_FORMAT_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v if f.name == "seed" else _plain(asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_chain(self, **changes) -> "PipelineConfig":
        return _replace(self, chain=_replace(self.chain, **changes))

    def with_physics(self, **changes) -> "PipelineConfig":
        return _replace(self, physics=_replace(self.physics, **changes))


def _replace(obj, **changes):
    from dataclasses import replace
    return replace(obj, **changes)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if hasattr(v, "value"):
        return v.value
    return v


_SECTIONS = {
    "physics": SnspdParams,
    "chain": ReadoutChain,
    "dark": DarkConfig,
    "bias": BiasResponseSpec,
    "features": FeatureSettings,
    "nn": NnConfig,
    "scenario": ScenarioDefaults,
    "emitter": DecayExperiment,
}


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    version = data.get("format_version")
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {version!r}")
    unknown = set(data) - set(_SECTIONS) - {"format_version", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "physics" not in data:
        raise ConfigError("missing 'physics' section")
    kwargs = {name: _strict(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    if "seed" in data:
        seed = data["seed"]
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        kwargs["seed"] = seed
    return PipelineConfig(**kwargs)


def load_config(path=None) -> PipelineConfig:
    """Read a configuration file; ``None`` loads the shipped defaults."""
    if path is None:
        text = resources.files("snspdsim").joinpath("default_config.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def default_config() -> PipelineConfig:
    return load_config(None)
