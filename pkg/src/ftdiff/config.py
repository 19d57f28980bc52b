"""Declarative run configuration shared by every CLI stage.

A run document is YAML or JSON with the sections below; any key not listed
is rejected. ``digest()`` hashes the canonical JSON form (excluding the
output location) and is embedded in every artifact a run writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data_eval import MaskConfig, SyntheticFieldSpec
from .errors import ContractError
from .ftm import FTMConfig
from .gpsd import GPSDTrainConfig, NoiseSchedule
from .mpdps import GuidanceConfig

OUTPUT_ROOT_ENV = "FTDIFF_OUTPUT_ROOT"


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style floats (YAML 1.1 needs a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))


@dataclass
class DataConfig:
    records: int = 200
    test_records: int = 20
    # records used to fit the latent functions; the rest are only encoded
    fit_records: int = 40
    train_rho: float = 0.15

    def __post_init__(self):
        if self.records < 1 or not 0 <= self.test_records < self.records:
            raise ContractError("need records >= 1 and 0 <= test_records < records")
        if self.fit_records < 1:
            raise ContractError("fit_records must be >= 1")
        if not 0 < self.train_rho <= 1:
            raise ContractError("train_rho must be in (0, 1]")


@dataclass
class EvalConfig:
    seeds: int = 10
    modes: tuple = ("none", "dps", "mpdps")
    noise_kind: str | None = None
    noise_level: float = 0.0
    # when False the sampler is not told the noise level and keeps guidance.obs_noise_std
    noise_known: bool = False
    grid_scale: int = 1

    def __post_init__(self):
        self.modes = tuple(self.modes)
        if self.seeds < 1 or self.grid_scale < 1:
            raise ContractError("seeds and grid_scale must be >= 1")


SECTIONS = {
    "spec": SyntheticFieldSpec,
    "data": DataConfig,
    "ftm": FTMConfig,
    "gpsd": GPSDTrainConfig,
    "schedule": NoiseSchedule,
    "guidance": GuidanceConfig,
    "mask": MaskConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    spec: SyntheticFieldSpec = field(default_factory=SyntheticFieldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    ftm: FTMConfig = field(default_factory=FTMConfig)
    gpsd: GPSDTrainConfig = field(default_factory=GPSDTrainConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_root: str | None = None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("output_root")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def root(self) -> Path:
        base = self.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
        return Path(base)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = dict(doc or {})
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - allowed
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in doc.items():
            if name in SECTIONS:
                kwargs[name] = _build_section(name, SECTIONS[name], value)
            else:
                kwargs[name] = value
        return cls(**kwargs)


def _build_section(name, klass, value):
    if value is None:
        return klass()
    if not isinstance(value, dict):
        raise ContractError(f"config section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(klass)}
    unknown = set(value) - allowed
    if unknown:
        raise ContractError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return klass(**value)
    except TypeError as exc:
        raise ContractError(f"bad value in {name!r}: {exc}") from exc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ContractError(f"override {item!r} descends into a non-mapping")
        node[keys[-1]] = yaml.load(raw, Loader=_Loader)
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.load(text, Loader=_Loader) or {}
        except yaml.YAMLError as exc:
            raise ContractError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ContractError(f"{path} must hold a mapping at top level")
    if overrides:
        doc = apply_overrides(doc, overrides)
    return RunConfig.from_dict(doc)
