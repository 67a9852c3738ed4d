"""Run configuration: one YAML file with sections mirroring the module
configs, strict about unknown keys, fingerprinted into every artifact.

Sections (all optional, every field has a default): ``encoder``,
``dataset``, ``distill``, ``eval``, ``theory``, ``viz``, ``output``.
CLI flags override file values; the effective config is echoed into the
output directory next to the artifacts it produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .distill import DistillConfig
from .errors import ValidationError
from .evaluate import EvalConfig
from .synthesis import AugmentParams
from .theory import McConfig


@dataclass
class EncoderSection:
    name: str = "toy-conv-32"   # builtin name or path to a weight file
    seed: int = 7
    eval_name: str | None = None  # evaluation encoder; defaults to `name`
    eval_seed: int | None = None


@dataclass
class DatasetSection:
    name: str = "toy"           # "toy" or "npz"
    path: str | None = None     # for npz
    num_classes: int = 10
    per_class: int = 200
    val_per_class: int = 200
    resolution: int = 32
    seed: int = 0
    hue_jitter: float = 0.10
    noise_sigma: float = 0.06


@dataclass
class VizSection:
    k_classes: int = 10


@dataclass
class OutputSection:
    dir: str = "runs/out"


@dataclass
class RunConfig:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    theory: McConfig = field(default_factory=McConfig)
    viz: VizSection = field(default_factory=VizSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build_section(cls, mapping: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValidationError(
            f"unknown key(s) {sorted(unknown)} in config section {where!r}"
        )
    kwargs = dict(mapping)
    if cls is DistillConfig and "augment" in kwargs and kwargs["augment"] is not None:
        if isinstance(kwargs["augment"], dict):
            kwargs["augment"] = _build_section(AugmentParams, kwargs["augment"],
                                               where + ".augment")
    if cls is DistillConfig and "adam_betas" in kwargs:
        kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
    return cls(**kwargs)


_SECTIONS = {
    "encoder": EncoderSection,
    "dataset": DatasetSection,
    "distill": DistillConfig,
    "eval": EvalConfig,
    "theory": McConfig,
    "viz": VizSection,
    "output": OutputSection,
}


def config_from_mapping(mapping: dict) -> RunConfig:
    if not isinstance(mapping, dict):
        raise ValidationError("config root must be a mapping")
    unknown = set(mapping) - set(_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config section(s) {sorted(unknown)}")
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in mapping and mapping[key] is not None:
            if not isinstance(mapping[key], dict):
                raise ValidationError(f"config section {key!r} must be a mapping")
            kwargs[key] = _build_section(cls, mapping[key], key)
    return RunConfig(**kwargs)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    return config_from_mapping(raw)


def echo_config(config: RunConfig, out_dir: str) -> str:
    """Write the effective config + fingerprint into the output dir."""
    from .tensorio import atomic_write_text

    os.makedirs(out_dir, exist_ok=True)
    d = config.to_dict()
    d["_fingerprint"] = config.fingerprint()
    path = os.path.join(out_dir, "config.yaml")
    atomic_write_text(path, yaml.safe_dump(d, sort_keys=True))
    return path
