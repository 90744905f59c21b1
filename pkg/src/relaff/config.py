"""Experiment configuration: one JSON document, defaults materialised, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SCALES, SamplingConfig, SynthConfig
from .encoder import ConfigError, EncoderConfig
from .fusion import HeadConfig

LOSS_KINDS = ("rmse", "one_minus_ccc")
MODES = ("cv", "single")


@dataclass
class TrainingConfig:
    loss_kind: str = "one_minus_ccc"
    lam: float = 2.0
    B: int = 16
    epochs: int = 15
    lr: float = 1e-4
    weight_decay: float = 5e-3
    K: int = 1
    subsample_fraction: float = 1.0
    batches_per_epoch: int = 0  # 0 means ceil(train videos / B)
    lr_step: int = 5
    lr_gamma: float = 0.1
    augment: bool = True
    mode: str = "cv"
    reencode_center: bool = False
    contrastive_epochs: int = 10
    contrastive_temperature: float = 0.1
    alignment_batches: int = 10

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError("training.loss_kind", f"must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.lam < 0:
            raise ConfigError("training.lam", "must be >= 0")
        if self.B < 1:
            raise ConfigError("training.B", "must be >= 1")
        if self.loss_kind == "one_minus_ccc" and self.B < 2:
            raise ConfigError("training.B", "CCC loss needs batches of at least 2")
        if self.epochs < 0:
            raise ConfigError("training.epochs", "must be >= 0")
        if self.lr <= 0:
            raise ConfigError("training.lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("training.weight_decay", "must be >= 0")
        if self.K < 0:
            raise ConfigError("training.K", "must be >= 0")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConfigError("training.subsample_fraction", "must lie in (0, 1]")
        if self.batches_per_epoch < 0:
            raise ConfigError("training.batches_per_epoch", "must be >= 0")
        if self.lr_step < 1:
            raise ConfigError("training.lr_step", "must be >= 1")
        if self.mode not in MODES:
            raise ConfigError("training.mode", f"must be one of {MODES}")
        if self.contrastive_temperature <= 0:
            raise ConfigError("training.contrastive_temperature", "must be > 0")
        if self.contrastive_epochs < 0:
            raise ConfigError("training.contrastive_epochs", "must be >= 0")
        if self.alignment_batches < 1:
            raise ConfigError("training.alignment_batches", "must be >= 1")


@dataclass
class Seeds:
    corpus: int = 0
    init: int = 0
    train: int = 0


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(drift_period=48))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self) -> None:
        self.encoder.validate()
        self.head.validate()
        self.synth.validate()
        self.training.validate()
        if self.sampling.K != self.training.K:
            raise ConfigError("sampling.K", f"must equal training.K ({self.sampling.K} != {self.training.K})")
        if self.sampling.T != self.encoder.T:
            raise ConfigError("sampling.T", f"must equal encoder.T ({self.sampling.T} != {self.encoder.T})")
        if self.head.C != self.synth.C:
            raise ConfigError("head.C", f"must equal synth.C ({self.head.C} != {self.synth.C})")
        if (self.synth.H, self.synth.W) != (self.encoder.H, self.encoder.W):
            raise ConfigError("synth.H", "synth frame size must match encoder H, W")
        if self.head.total_score_enabled and SCALES[self.synth.scale].total_native is None:
            raise ConfigError("head.total_score_enabled", f"scale {self.synth.scale!r} has no total score")
        if self.synth.drift_period < 1:
            raise ConfigError("synth.drift_period", "must be >= 1 after resolution")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def label_names(self) -> list[str]:
        return list(SCALES[self.synth.scale].names)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(training={"lam": 0})``."""
        d = self.to_dict()
        for sec, upd in sections.items():
            d[sec].update(upd)
        return from_dict(d)


_SECTIONS = {
    "encoder": EncoderConfig,
    "head": HeadConfig,
    "sampling": SamplingConfig,
    "synth": SynthConfig,
    "training": TrainingConfig,
    "seeds": Seeds,
}


def _build(section: str, cls, raw: dict[str, Any]):
    if not isinstance(raw, dict):
        raise ConfigError(section, "must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key) if cls is not SynthConfig else getattr(SynthConfig(drift_period=1), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key}", f"expected boolean, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key}", f"expected integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}", f"expected number, got {value!r}")
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    synth = raw.get("synth", {})
    if isinstance(synth, dict):
        synth.setdefault("drift_period", 0)
    training = raw.get("training", {})
    sampling = raw.get("sampling", {})
    if isinstance(training, dict) and isinstance(sampling, dict):
        # K and T are stated once in practice; mirror them when only one side is given
        if "K" in training and "K" not in sampling:
            sampling["K"] = training["K"]
        elif "K" in sampling and "K" not in training:
            training["K"] = sampling["K"]
    encoder = raw.get("encoder", {})
    if isinstance(encoder, dict) and isinstance(sampling, dict):
        if "T" in encoder and "T" not in sampling:
            sampling["T"] = encoder["T"]
        elif "T" in sampling and "T" not in encoder:
            encoder["T"] = sampling["T"]
    if isinstance(synth, dict) and isinstance(encoder, dict):
        for k in ("H", "W"):
            if k in encoder and k not in synth:
                synth[k] = encoder[k]
            elif k in synth and k not in encoder:
                encoder[k] = synth[k]
    head = raw.get("head", {})
    scale = synth.get("scale", "affect") if isinstance(synth, dict) else "affect"
    if isinstance(head, dict) and scale in SCALES:
        head.setdefault("C", synth.get("C", len(SCALES[scale].names)))
        if scale == "panss":
            head.setdefault("supervised_mask", [True, True, True, False])
        if SCALES[scale].total_native is not None:
            head.setdefault("total_score_enabled", True)
    if isinstance(synth, dict) and scale in SCALES:
        synth.setdefault("C", len(SCALES[scale].names))
    for name, val in (("synth", synth), ("training", training), ("sampling", sampling),
                      ("encoder", encoder), ("head", head)):
        if name in raw or val:
            raw[name] = val
    built = {}
    for name, cls in _SECTIONS.items():
        if name == "synth":
            continue
        built[name] = _build(name, cls, raw.get(name, {}))
    synth_raw = raw.get("synth", {"drift_period": 0})
    if isinstance(synth_raw, dict) and synth_raw.get("drift_period", 0) == 0:
        synth_raw = {**synth_raw, "drift_period": (2 * built["sampling"].K + 1) * built["sampling"].T}
    built["synth"] = _build("synth", SynthConfig, synth_raw)
    cfg = ExperimentConfig(**built)
    cfg.validate()
    return cfg


def load_config(path: Path | None) -> ExperimentConfig:
    if path is None:
        return from_dict({})
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` (or bare ``seeds`` keys like ``init=3``) overrides."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like KEY=VALUE")
        key, value = item.split("=", 1)
        section, _, name = key.rpartition(".")
        section = section or "seeds"
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        raw.setdefault(section, {})[name] = parsed
    return raw
