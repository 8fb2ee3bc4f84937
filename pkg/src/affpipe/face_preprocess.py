"""Face localization, cropping to model resolution, and training augmentations.

Images are float32 numpy arrays of shape (H, W, 3) with values in [0, 1].
Localizers are pluggable; the bundled implementations read precomputed
sidecar boxes or wrap an arbitrary detection callable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import cv2
import numpy as np

CROP_SIDE = 224


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    w: float
    h: float
    confidence: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


@dataclass
class FaceCrop:
    pixels: np.ndarray  # (side, side, 3) float32 in [0,1]
    source_frame_id: str
    source_box: Optional[FaceBox] = None


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    jitter_hue: float = 0.05
    crop_area_min: float = 0.80
    crop_area_max: float = 1.00

    def __post_init__(self):
        if not 0.0 < self.crop_area_min <= self.crop_area_max <= 1.0:
            raise ValueError(
                f"crop area range must satisfy 0 < min <= max <= 1, "
                f"got [{self.crop_area_min}, {self.crop_area_max}]"
            )

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(hflip_prob=0.0, jitter_brightness=0.0, jitter_contrast=0.0,
                   jitter_saturation=0.0, jitter_hue=0.0,
                   crop_area_min=1.0, crop_area_max=1.0)


class LocalizerFailure(Exception):
    """The localizer backend itself raised; distinct from finding no face."""


class DegenerateBoxError(Exception):
    pass


class FaceLocalizer(Protocol):
    implementation_id: str

    def detect(self, image: np.ndarray) -> list[FaceBox]:
        """Return candidate boxes sorted by confidence, best first."""
        ...


class SidecarBoxLocalizer:
    """Reads precomputed boxes keyed by frame_id from a JSONL sidecar file.

    Sidecar lines: {"frame_id": ..., "x": ..., "y": ..., "w": ..., "h": ...,
    "confidence": ...}. Multiple lines per frame_id are allowed.
    """

    implementation_id = "sidecar"

    def __init__(self, sidecar_path: Path):
        self.boxes: dict[str, list[FaceBox]] = {}
        with open(sidecar_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                box = FaceBox(x=float(obj["x"]), y=float(obj["y"]),
                              w=float(obj["w"]), h=float(obj["h"]),
                              confidence=float(obj["confidence"]))
                self.boxes.setdefault(str(obj["frame_id"]), []).append(box)
        for frame_boxes in self.boxes.values():
            frame_boxes.sort(key=lambda b: b.confidence, reverse=True)
        self._current_frame_id: Optional[str] = None

    def for_frame(self, frame_id: str) -> "SidecarBoxLocalizer":
        self._current_frame_id = frame_id
        return self

    def detect(self, image: np.ndarray) -> list[FaceBox]:
        if self._current_frame_id is None:
            raise LocalizerFailure("sidecar localizer needs for_frame() before detect()")
        return list(self.boxes.get(self._current_frame_id, []))


class CallableLocalizer:
    """Adapter for an external detection model given as image -> list[FaceBox]."""

    def __init__(self, implementation_id: str, fn: Callable[[np.ndarray], list[FaceBox]]):
        self.implementation_id = implementation_id
        self._fn = fn

    def detect(self, image: np.ndarray) -> list[FaceBox]:
        try:
            boxes = self._fn(image)
        except Exception as e:
            raise LocalizerFailure(f"detector backend {self.implementation_id!r} failed: {e}") from e
        return sorted(boxes, key=lambda b: b.confidence, reverse=True)


def localize_face(image: np.ndarray, localizer: FaceLocalizer,
                  min_confidence: float = 0.5) -> Optional[FaceBox]:
    """Highest-confidence box at or above the threshold, else None."""
    if image.size == 0:
        raise ValueError("empty image")
    boxes = localizer.detect(image)
    best = None
    for box in boxes:
        if box.confidence >= min_confidence and (best is None or box.confidence > best.confidence):
            best = box
    return best


def crop_and_resize(image: np.ndarray, box: FaceBox, side: int = CROP_SIDE,
                    frame_id: str = "") -> FaceCrop:
    """Crop the box (clamped to image bounds) and bilinearly resize to side x side."""
    h, w = image.shape[:2]
    x0 = max(0, int(round(box.x)))
    y0 = max(0, int(round(box.y)))
    x1 = min(w, int(round(box.x + box.w)))
    y1 = min(h, int(round(box.y + box.h)))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBoxError(
            f"box ({box.x},{box.y},{box.w},{box.h}) has no intersection with {w}x{h} image")
    patch = image[y0:y1, x0:x1].astype(np.float32)
    if patch.shape[0] == side and patch.shape[1] == side:
        resized = patch.copy()
    else:
        resized = cv2.resize(patch, (side, side), interpolation=cv2.INTER_LINEAR)
    resized = np.clip(resized, 0.0, 1.0)
    return FaceCrop(pixels=resized, source_frame_id=frame_id, source_box=box)


def rng_for_frame(global_seed: int, frame_id: str) -> np.random.Generator:
    """Per-frame generator so parallel workers reproduce the serial stream."""
    digest = hashlib.sha256(f"{global_seed}:{frame_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class AugmentParams:
    """Realized draw of one augmentation; shared by augment() and tests."""
    crop_side: int  # side length of the random crop in source pixels
    crop_x: int
    crop_y: int
    flip: bool
    brightness: float
    contrast: float
    saturation: float
    hue_shift: float

    def realized_area_fraction(self, side: int) -> float:
        return (self.crop_side / side) ** 2


def draw_augment_params(cfg: AugmentConfig, rng: np.random.Generator,
                        side: int = CROP_SIDE) -> AugmentParams:
    """Consume the seeded stream in a fixed order regardless of config."""
    area_frac = rng.uniform(cfg.crop_area_min, cfg.crop_area_max)
    do_flip = rng.random() < cfg.hflip_prob
    b = rng.uniform(max(0.0, 1 - cfg.jitter_brightness), 1 + cfg.jitter_brightness)
    c = rng.uniform(max(0.0, 1 - cfg.jitter_contrast), 1 + cfg.jitter_contrast)
    s = rng.uniform(max(0.0, 1 - cfg.jitter_saturation), 1 + cfg.jitter_saturation)
    hshift = rng.uniform(-cfg.jitter_hue, cfg.jitter_hue)
    if area_frac < 1.0:
        # ceil keeps the realized area fraction at or above the configured
        # minimum after integer truncation
        new_side = min(side, max(1, int(np.ceil(side * np.sqrt(area_frac)))))
    else:
        new_side = side
    x0 = int(rng.integers(0, side - new_side + 1))
    y0 = int(rng.integers(0, side - new_side + 1))
    return AugmentParams(crop_side=new_side, crop_x=x0, crop_y=y0, flip=do_flip,
                         brightness=b, contrast=c, saturation=s, hue_shift=hshift)


def augment(crop: FaceCrop, cfg: AugmentConfig, rng: np.random.Generator) -> FaceCrop:
    """Random square crop (area in [crop_area_min, crop_area_max]) + resize,
    horizontal flip, color jitter. Output stays side x side in [0,1]."""
    img = crop.pixels
    side = img.shape[0]
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"augment expects a square crop, got {img.shape}")

    p = draw_augment_params(cfg, rng, side)
    b, c, s, hshift = p.brightness, p.contrast, p.saturation, p.hue_shift

    if p.crop_side < side:
        img = img[p.crop_y:p.crop_y + p.crop_side, p.crop_x:p.crop_x + p.crop_side]
        img = cv2.resize(img, (side, side), interpolation=cv2.INTER_LINEAR)

    if p.flip:
        img = img[:, ::-1]

    if b != 1.0:
        img = img * b
    if c != 1.0:
        mean = img.mean()
        img = mean + (img - mean) * c
    if s != 1.0:
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        img = gray[..., None] + (img - gray[..., None]) * s
    if hshift != 0.0:
        hsv = cv2.cvtColor(np.clip(img, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + hshift * 360.0) % 360.0
        img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return FaceCrop(pixels=np.ascontiguousarray(img),
                    source_frame_id=crop.source_frame_id,
                    source_box=crop.source_box)
