"""Experiment configuration: one JSON document holding every sub-config."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .engine import StageConfig
from .losses import LossSpec, PseudoLabelConfig
from .search import SearchConfig
from .segmodel import OptimConfig
from .synthgen import GenConfig

# not part of the experiment's identity
_NON_SEMANTIC = ("output_dir", "jobs")


@dataclass
class ExperimentConfig:
    dataset: GenConfig = field(default_factory=GenConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    master_seed: int = 0
    output_dir: str = "runs"
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = GenConfig(**self.dataset)
        if isinstance(self.stage, dict):
            self.stage = StageConfig(**self.stage)
        if isinstance(self.search, dict):
            self.search = SearchConfig(**self.search)

    @property
    def pseudo(self) -> PseudoLabelConfig:
        return self.stage.pseudo_cfg

    @property
    def loss(self) -> LossSpec:
        return self.stage.loss_spec

    @property
    def optim(self) -> OptimConfig:
        return self.stage.optim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def semantic_dict(self):
        d = self.to_dict()
        for key in _NON_SEMANTIC:
            d.pop(key, None)
        return d

    def config_hash(self):
        """SHA-256 of the canonical (key-sorted) JSON of semantic fields."""
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def merge(base: dict, override: dict) -> dict:
    """Recursive dict update; returns a new dict."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


ADDON_ROWS = (
    ("no add-on", frozenset()),
    ("+CL", frozenset({"CL"})),
    ("+CL +LE", frozenset({"CL", "LE"})),
    ("+CL +LE +TS", frozenset({"CL", "LE", "TS"})),
)


@dataclass
class AblationPlan:
    rows: tuple = ADDON_ROWS

    def __post_init__(self):
        sets = [s for _, s in self.rows]
        for a, b in zip(sets, sets[1:]):
            if not a < b:
                raise ValueError("ablation add-on sets must be strictly nested")

    @classmethod
    def named(cls, name):
        if name != "default":
            raise ValueError(f"unknown ablation plan {name!r}")
        return cls()


def with_addons(stage: StageConfig, addons) -> StageConfig:
    """Copy of ``stage`` with CL / LE / TS switched on or off."""
    d = asdict(stage)
    d["loss_spec"]["consistency_enabled"] = "CL" in addons
    d["pseudo_cfg"]["erase_enabled"] = "LE" in addons
    d["pseudo_cfg"]["ts_enabled"] = "TS" in addons
    return StageConfig(**d)
