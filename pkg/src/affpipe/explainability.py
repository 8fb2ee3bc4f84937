"""Class-agnostic saliency from final backbone activations.

The saliency of a frame is the projection of its activation matrix onto the
first right singular vector, min-max normalized. No label, prediction, or
gradient enters the computation, so maps are identical for correctly and
incorrectly classified frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .backbone_zoo import ActivationTensor, Layout
from .face_preprocess import CROP_SIDE, FaceCrop

DEGENERATE_RTOL = 1e-12


class NonSquareTokenCountError(Exception):
    pass


@dataclass
class SaliencyGrid:
    values: np.ndarray  # (h, w) in [0, 1]
    source_layout: Layout
    source_frame_id: str = ""
    degenerate: bool = False


@dataclass
class OverlayImage:
    pixels: np.ndarray  # (224, 224, 3) in [0, 1]
    colormap_id: str
    blend_alpha: float


def tokens_to_grid(activation: ActivationTensor) -> np.ndarray:
    """Drop the class token and reshape patch tokens row-major to (h, w, C)."""
    if activation.layout != Layout.TOKENS:
        raise ValueError(f"expected TOKENS layout, got {activation.layout}")
    n_tokens, channels = activation.data.shape
    t = n_tokens - 1
    side = math.isqrt(t)
    if side * side != t:
        raise NonSquareTokenCountError(f"{t} patch tokens do not form a square grid")
    return activation.data[1:].reshape(side, side, channels)


def eigencam(activation: ActivationTensor, center: bool = False,
             frame_id: str = "") -> SaliencyGrid:
    """Project activations onto their first principal direction.

    Uses the raw (uncentered) activation matrix by default; ``center=True``
    subtracts the per-channel mean first, for ablation.
    """
    if activation.layout == Layout.SPATIAL:
        h, w, c = activation.data.shape
        mat = activation.data.reshape(h * w, c)
    else:
        grid = tokens_to_grid(activation)
        h, w, c = grid.shape
        mat = grid.reshape(h * w, c)

    if center:
        mat = mat - mat.mean(axis=0, keepdims=True)

    scale = np.abs(mat).max()
    if scale == 0 or not np.isfinite(scale):
        return SaliencyGrid(values=np.full((h, w), 0.5), source_layout=activation.layout,
                            source_frame_id=frame_id, degenerate=True)
    # max-abs pre-normalization: conditions the SVD and makes the output
    # invariant to exact floating-point rescalings of the input
    mat = mat / scale

    _, singular_values, vt = np.linalg.svd(mat, full_matrices=False)
    v = vt[0]
    s = mat @ v

    # SVD sign is arbitrary; orient so the strongest response is positive
    peak = np.argmax(np.abs(s))
    if s[peak] < 0:
        s = -s

    lo, hi = s.min(), s.max()
    if hi - lo <= DEGENERATE_RTOL * max(abs(hi), abs(lo), 1.0) or \
            singular_values[0] <= DEGENERATE_RTOL:
        return SaliencyGrid(values=np.full((h, w), 0.5), source_layout=activation.layout,
                            source_frame_id=frame_id, degenerate=True)

    values = (s - lo) / (hi - lo)
    return SaliencyGrid(values=values.reshape(h, w), source_layout=activation.layout,
                        source_frame_id=frame_id)


def _blue_red_colormap(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue -> cyan -> yellow -> red map on [0, 1]."""
    stops = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    colors = np.array([
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ])
    out = np.empty(values.shape + (3,), dtype=np.float64)
    for ch in range(3):
        out[..., ch] = np.interp(values, stops, colors[:, ch])
    return out


def render_overlay(crop: FaceCrop, saliency: SaliencyGrid,
                   alpha: float = 0.5) -> OverlayImage:
    """Upsample the saliency grid to crop resolution and alpha-blend a
    blue-to-red heatmap onto it."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    up = cv2.resize(saliency.values.astype(np.float32), (CROP_SIDE, CROP_SIDE),
                    interpolation=cv2.INTER_LINEAR)
    heat = _blue_red_colormap(up.astype(np.float64))
    blended = (1 - alpha) * crop.pixels.astype(np.float64) + alpha * heat
    return OverlayImage(pixels=np.clip(blended, 0.0, 1.0),
                        colormap_id="blue-red", blend_alpha=alpha)


def contact_sheet(entries: list[tuple[OverlayImage, str]],
                  n_cols: Optional[int] = None) -> np.ndarray:
    """Tile overlays with positive-label rows above negative-label rows.

    ``entries`` pairs each overlay with its serialized label ("positive" /
    "negative"). Returns one (rows*224, cols*224, 3) image.
    """
    positives = [o for o, lab in entries if lab == "positive"]
    negatives = [o for o, lab in entries if lab != "positive"]
    if n_cols is None:
        n_cols = max(1, max(len(positives), len(negatives)))

    def rows_for(group: list[OverlayImage]) -> list[np.ndarray]:
        rows = []
        for start in range(0, len(group), n_cols):
            chunk = [o.pixels for o in group[start:start + n_cols]]
            while len(chunk) < n_cols:
                chunk.append(np.zeros((CROP_SIDE, CROP_SIDE, 3)))
            rows.append(np.concatenate(chunk, axis=1))
        return rows

    all_rows = rows_for(positives) + rows_for(negatives)
    if not all_rows:
        return np.zeros((CROP_SIDE, CROP_SIDE, 3))
    return np.concatenate(all_rows, axis=0)
