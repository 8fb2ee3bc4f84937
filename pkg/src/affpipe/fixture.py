"""Bundled synthetic fixture: tiny face-like dataset plus seeded backbone
weights, for smoke runs and demos where the real dataset is unavailable."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import yaml

from .backbone_zoo import BACKBONE_REGISTRY, save_initialized_weights
from .data_ingest import (ConditionLabel, DatasetManifest, FrameRecord, Sex,
                          SubjectMeta, save_manifest)


def _synthetic_face(rng: np.random.Generator, positive: bool) -> np.ndarray:
    """224x224 face-ish image; label controls mouth curvature and hue."""
    img = np.full((224, 224, 3), 0.35, dtype=np.float32)
    img += rng.normal(0, 0.03, img.shape).astype(np.float32)

    fur = np.array([0.55, 0.45, 0.30], dtype=np.float32) if positive \
        else np.array([0.40, 0.38, 0.36], dtype=np.float32)
    cx, cy = 112 + int(rng.integers(-15, 16)), 112 + int(rng.integers(-15, 16))
    axes = (70 + int(rng.integers(-10, 11)), 85 + int(rng.integers(-10, 11)))
    cv2.ellipse(img, (cx, cy), axes, 0, 0, 360, fur.tolist(), -1)

    # ears
    for dx in (-55, 55):
        cv2.ellipse(img, (cx + dx, cy - 60), (22, 40), 0, 0, 360,
                    (fur * 0.8).tolist(), -1)
    # eyes
    for dx in (-30, 30):
        cv2.circle(img, (cx + dx, cy - 20), 9, (0.05, 0.05, 0.05), -1)
    # nose
    cv2.circle(img, (cx, cy + 15), 11, (0.08, 0.05, 0.05), -1)
    # mouth: open (anticipation) vs closed line (frustration)
    if positive:
        cv2.ellipse(img, (cx, cy + 45), (25, 14), 0, 0, 180, (0.1, 0.05, 0.05), -1)
    else:
        cv2.line(img, (cx - 25, cy + 45), (cx + 25, cy + 45), (0.1, 0.05, 0.05), 3)
    return np.clip(img, 0.0, 1.0)


def make_fixture(out_dir: Path, n_subjects: int = 10, frames_per_subject: int = 5,
                 seed: int = 0, backbone_ids=None, epochs: int = 30) -> Path:
    """Build dataset, weights, and run config under ``out_dir``.

    Returns the path of the generated run config.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    weights_dir = out_dir / "weights"
    if backbone_ids is None:
        backbone_ids = list(BACKBONE_REGISTRY)

    rng = np.random.default_rng(seed)
    records: list[FrameRecord] = []
    subjects: list[SubjectMeta] = []
    for s in range(n_subjects):
        sid = f"dog{s:02d}"
        subjects.append(SubjectMeta(
            subject_id=sid,
            sex=Sex.FEMALE if s % 2 == 0 else Sex.MALE,
            age_years=float(2 + s % 7),
            neutered=bool(s % 3),
        ))
        for k in range(frames_per_subject):
            # roughly the 1:2 positive:negative imbalance of the source videos
            positive = (s * frames_per_subject + k) % 3 == 0
            label = (ConditionLabel.POSITIVE_ANTICIPATION if positive
                     else ConditionLabel.FRUSTRATION)
            frame_id = f"{sid}_v{k}_f0"
            img = _synthetic_face(rng, positive)
            path = images_dir / f"{frame_id}.png"
            cv2.imwrite(str(path), cv2.cvtColor((img * 255).astype(np.uint8),
                                                cv2.COLOR_RGB2BGR))
            records.append(FrameRecord(
                frame_id=frame_id, image_ref=str(path), subject_id=sid,
                video_id=f"{sid}_v{k}", label=label, frame_index=0,
            ))

    manifest = DatasetManifest(records=records, subjects=subjects,
                               provenance=f"synthetic fixture seed={seed}")
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)

    entries = []
    for i, bid in enumerate(backbone_ids):
        wpath = weights_dir / f"{bid}.pt"
        checksum = save_initialized_weights(bid, wpath, seed=seed + i)
        entries.append({"backbone_id": bid, "weights": str(wpath),
                        "checksum": checksum})

    config = {
        "manifest": str(manifest_path),
        "out_dir": str(out_dir / "run"),
        "backbones": entries,
        "split_params": {
            "n_train_subjects": max(1, int(round(n_subjects * 0.7))),
            "n_test_subjects": max(1, n_subjects - int(round(n_subjects * 0.7))),
            "seed": seed,
        },
        "optimizer": {"epochs": epochs, "batch_size": 16},
        "augment": None,  # keeps the smoke run fast: features extracted once
        "seed": seed,
    }
    config_path = out_dir / "config.yaml"
    with open(config_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config, f, sort_keys=False)
    return config_path
