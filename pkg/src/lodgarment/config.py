"""Run configuration shared by the command-line tools.

Precedence is CLI flag > config file > built-in default. The effective
configuration is hashed and echoed into every manifest.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .mesh import CATEGORIES
from .registration import ReconstructConfig


@dataclass
class SynthConfig:
    n_style: int = 40              # PCA training corpus size
    n_components: int = 32
    n_detail: int = 8
    n_deform: int = 8
    detail_amplitude: float = 0.006
    swing_amplitude: float = 0.05
    beta_scale: float = 0.5
    tube_radius: float = 0.015     # fraction of the fine garment's bbox diagonal
    k: int = 4                     # garment-to-body KNN size


@dataclass
class MetricConfig:
    samples: int = 100_000
    resolution: int = 128
    seed: int = 42


@dataclass
class RunConfig:
    category: str = "dress"
    resolution: int = 2            # garment template resolution
    body_resolution: int = 1
    seed: int = 0
    workers: int = 1
    body_model: str | None = None  # optional saved BodyModel; built procedurally otherwise
    synth: SynthConfig = field(default_factory=SynthConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def validate(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}; expected one of {CATEGORIES}")
        if self.resolution < 1 or self.body_resolution < 1:
            raise ValueError("resolutions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.body_model is not None and not Path(self.body_model).exists():
            raise FileNotFoundError(f"body model {self.body_model} does not exist")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        synth = SynthConfig(**d.pop("synth", {}))
        metrics = MetricConfig(**d.pop("metrics", {}))
        rec = ReconstructConfig.from_dict(d.pop("reconstruct", {}))
        return cls(synth=synth, metrics=metrics, reconstruct=rec, **d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self):
        """Hash of everything that affects outputs (``workers`` excluded)."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resolve(config_path=None, **overrides) -> RunConfig:
    """Defaults, then the config file, then non-None overrides."""
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()
