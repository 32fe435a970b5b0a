"""Run configuration: every numeric choice of a run, serialized as JSON.

The digest of the model-defining part of a config is stamped into
checkpoints so a checkpoint cannot be evaluated under a different
architecture. The digest of the whole config is stamped into every artifact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataio import DEFAULT_BACKBONE_GFLOPS, SyntheticSpec
from .ledger import CostModel
from .model import ModalityOrder, ModelConfig, preset_dims
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def desk_train_config() -> TrainConfig:
    # desk-scale runs have ~45 updates per epoch, so the step size is larger
    # than the full-scale 1e-4
    return TrainConfig(epochs=30, batch_size=16, lr=3e-3)


@dataclass
class CostConfig:
    audio: float = DEFAULT_BACKBONE_GFLOPS["audio"]
    appearance: float = DEFAULT_BACKBONE_GFLOPS["appearance"]
    motion: float = DEFAULT_BACKBONE_GFLOPS["motion"]
    include_heads: bool = False


@dataclass
class RunConfig:
    dims_preset: str = "desk"
    modality_order: list = field(default_factory=lambda: ["audio", "appearance", "motion"])
    override_cell: bool = False
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=desk_train_config)
    cost: CostConfig = field(default_factory=CostConfig)
    sweep_budgets: list = field(default_factory=lambda: [])
    reserve_audio: bool = False
    eval_sample: bool = False
    workers: int = 1

    # -- derived objects ---------------------------------------------------
    def model_config(self, num_classes: int | None = None, raw_dims=None) -> ModelConfig:
        C = num_classes if num_classes is not None else self.synthetic.num_classes
        raw = tuple(raw_dims) if raw_dims is not None else (self.synthetic.dims if self.dims_preset == "desk" else None)
        try:
            dims = preset_dims(self.dims_preset, C, raw)
            order = ModalityOrder.parse(self.modality_order)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"invalid model settings: {e}") from None
        return ModelConfig(dims, order, self.override_cell)

    def cost_model(self, model_config: ModelConfig) -> CostModel:
        c = self.cost
        return CostModel.from_config(
            model_config,
            include_heads=c.include_heads,
            backbone={"audio": c.audio, "appearance": c.appearance, "motion": c.motion},
        )

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["synthetic"] = self.synthetic.to_dict()
        d["synthetic"]["group_sizes"] = list(self.synthetic.group_sizes)
        d["synthetic"]["dims"] = list(self.synthetic.dims)
        d["sweep_budgets"] = [b if b != float("inf") else "inf" for b in self.sweep_budgets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "synthetic" in d:
                d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"])
            if "train" in d:
                base = desk_train_config().to_dict()
                base.update(d["train"])
                d["train"] = TrainConfig.from_dict(base)
            if "cost" in d:
                d["cost"] = CostConfig(**d["cost"])
            if "sweep_budgets" in d:
                d["sweep_budgets"] = [float(b) for b in d["sweep_budgets"]]
            cfg = cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"malformed config: {e}") from None
        if any(v < 0 for v in (cfg.cost.audio, cfg.cost.appearance, cfg.cost.motion)):
            raise ConfigError("backbone costs must be non-negative")
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    # -- digests -----------------------------------------------------------
    def digest(self) -> str:
        return _digest(self.to_dict())


def model_digest(mc: ModelConfig) -> str:
    """Digest of the settings that fix the parameter layout."""
    d = mc.dims
    return _digest(
        {
            "raw": list(d.raw),
            "proj": list(d.proj),
            "hidden": list(d.hidden),
            "num_classes": d.num_classes,
            "order": list(mc.order.tiers),
            "override_cell": mc.override_cell,
        }
    )


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
