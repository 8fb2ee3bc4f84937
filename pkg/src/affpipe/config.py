"""Run configuration: YAML in, fully-materialized snapshot out.

Every default consumed by a run is resolved into the emitted snapshot so an
archived run directory specifies itself completely.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone_zoo import BACKBONE_REGISTRY, Family, resolve_spec
from .face_preprocess import AugmentConfig
from .linear_probe import FAMILY_LEARNING_RATES, OptimizerConfig

FORMAT_VERSION = 1


@dataclass
class BackboneEntry:
    backbone_id: str
    weights: str
    checksum: Optional[str] = None


@dataclass
class SplitParams:
    n_train_subjects: int
    n_test_subjects: int
    seed: int = 0


@dataclass
class RunConfig:
    manifest: str
    out_dir: str
    backbones: list[BackboneEntry]
    split_file: Optional[str] = None
    split_params: Optional[SplitParams] = None
    boxes: Optional[str] = None  # sidecar box file; None = frames are already face crops
    min_confidence: float = 0.5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    learning_rates: dict[str, float] = field(
        default_factory=lambda: dict(FAMILY_LEARNING_RATES))
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    seed: int = 0
    mean_tokens: bool = False
    frame_sampling_rate_hz: float = 5.0

    def learning_rate_for(self, backbone_id: str) -> float:
        family = resolve_spec(backbone_id).family
        return self.learning_rates[family.name]

    def optimizer_for(self, backbone_id: str) -> OptimizerConfig:
        cfg = OptimizerConfig(**asdict(self.optimizer))
        cfg.learning_rate = self.learning_rate_for(backbone_id)
        return cfg


def _require(obj: dict, key: str, path: Path):
    if key not in obj:
        raise ValueError(f"{path}: missing required config key {key!r}")
    return obj[key]


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}

    backbones = []
    for entry in _require(raw, "backbones", path):
        if isinstance(entry, str):
            raise ValueError(f"{path}: backbone entries need an id and a weights path")
        bid = entry["backbone_id"]
        if bid not in BACKBONE_REGISTRY:
            raise ValueError(f"{path}: unknown backbone_id {bid!r}; "
                             f"valid: {sorted(BACKBONE_REGISTRY)}")
        backbones.append(BackboneEntry(backbone_id=bid, weights=entry["weights"],
                                       checksum=entry.get("checksum")))

    opt_raw = raw.get("optimizer", {})
    optimizer = OptimizerConfig(**opt_raw)

    lrs = dict(FAMILY_LEARNING_RATES)
    lrs.update(raw.get("learning_rates", {}))

    aug_raw = raw.get("augment", "default")
    if aug_raw is None:
        augment = None
    elif aug_raw == "default":
        augment = AugmentConfig()
    else:
        augment = AugmentConfig(**aug_raw)

    split_file = raw.get("split_file")
    split_params = None
    if raw.get("split_params"):
        split_params = SplitParams(**raw["split_params"])
    if split_file is None and split_params is None:
        raise ValueError(f"{path}: need either split_file or split_params")

    return RunConfig(
        manifest=str(_require(raw, "manifest", path)),
        out_dir=str(_require(raw, "out_dir", path)),
        backbones=backbones,
        split_file=split_file,
        split_params=split_params,
        boxes=raw.get("boxes"),
        min_confidence=float(raw.get("min_confidence", 0.5)),
        optimizer=optimizer,
        learning_rates=lrs,
        augment=augment,
        seed=int(raw.get("seed", 0)),
        mean_tokens=bool(raw.get("mean_tokens", False)),
        frame_sampling_rate_hz=float(raw.get("frame_sampling_rate_hz", 5.0)),
    )


def snapshot_run_config(cfg: RunConfig) -> dict:
    """Fully-resolved, serializable view of the config (no implicit defaults)."""
    return {
        "format_version": FORMAT_VERSION,
        "manifest": cfg.manifest,
        "out_dir": cfg.out_dir,
        "backbones": [asdict(b) for b in cfg.backbones],
        "split_file": cfg.split_file,
        "split_params": asdict(cfg.split_params) if cfg.split_params else None,
        "boxes": cfg.boxes,
        "min_confidence": cfg.min_confidence,
        "optimizer": asdict(cfg.optimizer),
        "learning_rates": dict(cfg.learning_rates),
        "augment": asdict(cfg.augment) if cfg.augment else None,
        "seed": cfg.seed,
        "mean_tokens": cfg.mean_tokens,
        "frame_sampling_rate_hz": cfg.frame_sampling_rate_hz,
    }


def save_run_config(cfg: RunConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(snapshot_run_config(cfg), f, sort_keys=False)


def config_from_snapshot(path: Path) -> RunConfig:
    """Load a config emitted by save_run_config; snapshots are valid configs."""
    return load_run_config(path)
