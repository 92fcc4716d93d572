"""Experiment configuration: a strict JSON key-value tree.

Example file::

    {
      "model":   {"width": 8, "height": 8, "channels": 96, "heads": 4,
                  "depth": 4, "seed": 0},
      "adapter": {"kind": "moppa", "rank": null, "w": 0.1, "eta": 0.001},
      "train":   {"iterations": 5000, "lr": 0.002, "metric_cadence": 100,
                  "seeds": [1, 2, 3, 4, 5], "warmup": 0},
      "output":  {"directory": "out", "formats": ["csv"]}
    }

Every key is optional (defaults above); unknown keys are rejected. All
fields are validated before any run starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import ConfigError
from .toymodel import ADAPTER_KINDS, ModelConfig
from .training import TrainConfig

SUPPORTED_FORMATS = ("csv",)


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "moppa"
    rank: int | None = None
    w: float = 0.1
    eta: float = 0.001

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(
                f"adapter.kind must be one of {ADAPTER_KINDS}, got {self.kind!r}"
            )
        if self.rank is not None and self.rank < 1:
            raise ConfigError(f"adapter.rank must be >= 1, got {self.rank}")
        if self.w < 0:
            raise ConfigError(f"adapter.w must be >= 0, got {self.w}")
        if self.eta <= 0:
            raise ConfigError(f"adapter.eta must be > 0, got {self.eta}")


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple = ("csv",)

    def __post_init__(self):
        if not self.directory:
            raise ConfigError("output.directory must not be empty")
        bad = [f for f in self.formats if f not in SUPPORTED_FORMATS]
        if bad or not self.formats:
            raise ConfigError(
                f"output.formats must be a non-empty subset of {SUPPORTED_FORMATS}, "
                f"got {list(self.formats)}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    adapter: AdapterConfig
    train: TrainConfig
    output: OutputConfig

    def model_for(self, kind: str, paths=None) -> ModelConfig:
        """Model config for one adapter arm, carrying the adapter settings."""
        cfg = replace(
            self.model,
            adapter=kind,
            lora_rank=self.adapter.rank,
            eta=self.adapter.eta,
        )
        if paths is not None:
            cfg = replace(cfg, moppa_paths=tuple(paths))
        return cfg


_SECTIONS = ("model", "adapter", "train", "output")

_MODEL_KEYS = {"width", "height", "channels", "heads", "depth", "seed"}
_ADAPTER_KEYS = {"kind", "rank", "w", "eta"}
_TRAIN_KEYS = {"iterations", "lr", "metric_cadence", "seeds", "warmup"}
_OUTPUT_KEYS = {"directory", "formats"}


def _check_keys(section: str, data: dict, allowed: set):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {unknown} in section {section!r}; allowed: {sorted(allowed)}"
        )


def _coerce_int(section, key, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    return value


def _coerce_number(section, key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
    return float(value)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(
            f"unknown section(s) {unknown}; allowed sections: {list(_SECTIONS)}"
        )

    model_doc = doc.get("model", {})
    _check_keys("model", model_doc, _MODEL_KEYS)
    model_kwargs = {k: _coerce_int("model", k, v) for k, v in model_doc.items()}
    if model_kwargs.get("depth", 4) < 1:
        raise ConfigError("model.depth must be >= 1 for experiments")

    adapter_doc = doc.get("adapter", {})
    _check_keys("adapter", adapter_doc, _ADAPTER_KEYS)
    adapter_kwargs = {}
    if "kind" in adapter_doc:
        if not isinstance(adapter_doc["kind"], str):
            raise ConfigError(f"adapter.kind must be a string, got {adapter_doc['kind']!r}")
        adapter_kwargs["kind"] = adapter_doc["kind"]
    if "rank" in adapter_doc and adapter_doc["rank"] is not None:
        adapter_kwargs["rank"] = _coerce_int("adapter", "rank", adapter_doc["rank"])
    for key in ("w", "eta"):
        if key in adapter_doc:
            adapter_kwargs[key] = _coerce_number("adapter", key, adapter_doc[key])

    train_doc = doc.get("train", {})
    _check_keys("train", train_doc, _TRAIN_KEYS)
    train_kwargs = {}
    for key in ("iterations", "metric_cadence", "warmup"):
        if key in train_doc:
            train_kwargs[key] = _coerce_int("train", key, train_doc[key])
    if "lr" in train_doc:
        train_kwargs["lr"] = _coerce_number("train", "lr", train_doc["lr"])
    if "seeds" in train_doc:
        seeds = train_doc["seeds"]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError(f"train.seeds must be a non-empty list, got {seeds!r}")
        train_kwargs["seeds"] = tuple(_coerce_int("train", "seeds", s) for s in seeds)

    output_doc = doc.get("output", {})
    _check_keys("output", output_doc, _OUTPUT_KEYS)
    output_kwargs = {}
    if "directory" in output_doc:
        if not isinstance(output_doc["directory"], str):
            raise ConfigError("output.directory must be a string")
        output_kwargs["directory"] = output_doc["directory"]
    if "formats" in output_doc:
        formats = output_doc["formats"]
        if not isinstance(formats, list):
            raise ConfigError(f"output.formats must be a list, got {formats!r}")
        output_kwargs["formats"] = tuple(formats)

    try:
        model = ModelConfig(**model_kwargs)
        adapter = AdapterConfig(**adapter_kwargs)
        if adapter.rank is not None and adapter.rank >= model.channels:
            raise ConfigError(
                f"adapter.rank must be < model.channels, got rank={adapter.rank} "
                f"D={model.channels}"
            )
        train = TrainConfig(**train_kwargs)
        output = OutputConfig(**output_kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    # The train coefficient lives in the adapter section of the file; copy it in.
    train = replace(train, w=adapter.w)
    return ExperimentConfig(model=model, adapter=adapter, train=train, output=output)


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; parse errors carry line numbers."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"config {path} is not valid JSON: {e.msg} at line {e.lineno}, "
            f"column {e.colno}"
        ) from e
    return config_from_dict(doc)
