"""Frozen pretrained feature extractors.

Four supported backbones: ResNet50 and ViT-Small, each either supervised
ImageNet-pretrained or self-distilled (DINO). Weights are loaded from local
state-dict files pinned by checksum; the architectures are defined here so
feature and activation shapes are independent of any weight source.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torchvision.models import resnet50

from .face_preprocess import CROP_SIDE, FaceCrop

# ImageNet channel statistics used by all four pretraining regimes
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VIT_EMBED_DIM = 384
RESNET_FEATURE_DIM = 2048


class Family(Enum):
    RESIDUAL_CNN = "residual_cnn"
    VISION_TRANSFORMER = "vision_transformer"


class Pretraining(Enum):
    SUPERVISED = "supervised"
    SELF_DISTILLATION = "self_distillation"


class Layout(Enum):
    SPATIAL = "spatial"  # (H, W, C)
    TOKENS = "tokens"  # (1 + T, C), leading class token


@dataclass(frozen=True)
class BackboneSpec:
    family: Family
    pretraining: Pretraining
    variant: str
    weights_checksum: Optional[str] = None


# the four supported combinations, keyed by CLI-facing id
BACKBONE_REGISTRY: dict[str, BackboneSpec] = {
    "sup_resnet50": BackboneSpec(Family.RESIDUAL_CNN, Pretraining.SUPERVISED, "depth-50"),
    "sup_vit_s16": BackboneSpec(Family.VISION_TRANSFORMER, Pretraining.SUPERVISED, "small/16"),
    "dino_resnet50": BackboneSpec(Family.RESIDUAL_CNN, Pretraining.SELF_DISTILLATION, "depth-50"),
    "dino_vit_s8": BackboneSpec(Family.VISION_TRANSFORMER, Pretraining.SELF_DISTILLATION, "small/8"),
}


def spec_id(spec: BackboneSpec) -> str:
    for bid, s in BACKBONE_REGISTRY.items():
        if (s.family, s.pretraining, s.variant) == (spec.family, spec.pretraining, spec.variant):
            return bid
    raise UnsupportedSpecError(spec)


class WeightsNotFoundError(Exception):
    pass


class ChecksumMismatchError(Exception):
    pass


class UnsupportedSpecError(Exception):
    def __init__(self, spec):
        super().__init__(
            f"unsupported backbone spec {spec}; supported: "
            + ", ".join(f"{bid} ({s.family.value}, {s.pretraining.value}, {s.variant})"
                        for bid, s in BACKBONE_REGISTRY.items()))


class ShapeError(Exception):
    pass


class _MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _MLP(dim, int(dim * mlp_ratio))

    def forward(self, x):
        y = self.norm1(x)
        attn_out, _ = self.attn(y, y, y, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class VisionTransformerSmall(nn.Module):
    """ViT-Small: 12 blocks, dim 384, 6 heads, configurable patch size."""

    def __init__(self, patch_size: int, image_size: int = CROP_SIDE,
                 depth: int = 12, dim: int = VIT_EMBED_DIM, heads: int = 6):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(f"image size {image_size} not divisible by patch {patch_size}")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        n_tokens = self.grid * self.grid + 1
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, dim))
        self.blocks = nn.ModuleList([_Block(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """All token embeddings after the final norm: (B, 1+T, dim)."""
        b = x.shape[0]
        x = self.patch_embed(x)  # (B, dim, g, g)
        x = x.flatten(2).transpose(1, 2)  # (B, T, dim), row-major patch order
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_tokens(x)[:, 0]


class _ResNetTrunk(nn.Module):
    """ResNet50 without the classification head; exposes the final 7x7 map."""

    def __init__(self):
        super().__init__()
        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward_map(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)  # (B, 2048, 7, 7)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_map(x).mean(dim=(2, 3))


@dataclass
class BackboneHandle:
    spec: BackboneSpec
    module: nn.Module
    feature_dim: int
    parameter_fingerprint: str
    frozen: bool = True
    use_mean_tokens: bool = False  # ViT only: mean of patch tokens instead of class token

    @property
    def backbone_id(self) -> str:
        return spec_id(self.spec)


@dataclass
class FeatureBatch:
    vectors: np.ndarray  # (N, D)
    frame_ids: list[str]
    spec: BackboneSpec


@dataclass
class ActivationTensor:
    layout: Layout
    data: np.ndarray  # SPATIAL: (H, W, C); TOKENS: (1+T, C)
    patch_size: Optional[int] = None  # TOKENS only


def _build_module(spec: BackboneSpec) -> tuple[nn.Module, int]:
    if spec.family == Family.RESIDUAL_CNN:
        if spec.variant != "depth-50":
            raise UnsupportedSpecError(spec)
        return _ResNetTrunk(), RESNET_FEATURE_DIM
    if spec.family == Family.VISION_TRANSFORMER:
        if spec.variant == "small/16":
            return VisionTransformerSmall(patch_size=16), VIT_EMBED_DIM
        if spec.variant == "small/8":
            return VisionTransformerSmall(patch_size=8), VIT_EMBED_DIM
        raise UnsupportedSpecError(spec)
    raise UnsupportedSpecError(spec)


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint_module(module: nn.Module) -> str:
    """Stable hash over all parameters and buffers in name order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def fingerprint(handle: BackboneHandle) -> str:
    return fingerprint_module(handle.module)


def resolve_spec(spec_or_id) -> BackboneSpec:
    if isinstance(spec_or_id, BackboneSpec):
        return spec_or_id
    if spec_or_id in BACKBONE_REGISTRY:
        return BACKBONE_REGISTRY[spec_or_id]
    raise UnsupportedSpecError(spec_or_id)


def load_backbone(spec_or_id, weights_ref: Path) -> BackboneHandle:
    """Build the architecture and load frozen weights from a state-dict file.

    The file's sha256 is checked against ``spec.weights_checksum`` when the
    spec pins one.
    """
    spec = resolve_spec(spec_or_id)
    module, feature_dim = _build_module(spec)

    weights_path = Path(weights_ref)
    if not weights_path.is_file():
        raise WeightsNotFoundError(f"weights file not found: {weights_path}")
    if spec.weights_checksum:
        actual = _file_sha256(weights_path)
        if actual != spec.weights_checksum:
            raise ChecksumMismatchError(
                f"weights {weights_path} sha256 {actual} != pinned {spec.weights_checksum}")
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    module.load_state_dict(state)

    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return BackboneHandle(spec=spec, module=module, feature_dim=feature_dim,
                          parameter_fingerprint=fingerprint_module(module))


def save_initialized_weights(spec_or_id, path: Path, seed: int = 0) -> str:
    """Write a seeded fresh-initialization state dict; returns its sha256.

    Stand-in weight source for fixtures and environments without access to
    the published checkpoints; shape and freezing contracts are identical.
    """
    spec = resolve_spec(spec_or_id)
    torch.manual_seed(seed)
    module, _ = _build_module(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    return _file_sha256(path)


def _to_input_tensor(crops: list[FaceCrop]) -> torch.Tensor:
    arrs = []
    for crop in crops:
        px = crop.pixels
        if px.shape != (CROP_SIDE, CROP_SIDE, 3):
            raise ShapeError(f"expected ({CROP_SIDE}, {CROP_SIDE}, 3) crop, got {px.shape}")
        arrs.append(px)
    x = torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def extract_features(handle: BackboneHandle, crops: list[FaceCrop]) -> FeatureBatch:
    """One feature vector per crop: pooled final conv map (CNN) or final-layer
    class token (ViT)."""
    if not crops:
        raise ShapeError("empty crop batch")
    x = _to_input_tensor(crops)
    with torch.no_grad():
        if handle.spec.family == Family.VISION_TRANSFORMER and handle.use_mean_tokens:
            tokens = handle.module.forward_tokens(x)
            feats = tokens[:, 1:].mean(dim=1)
        else:
            feats = handle.module(x)
    vectors = feats.cpu().numpy().astype(np.float64)
    if vectors.shape[1] != handle.feature_dim:
        raise ShapeError(f"feature dim {vectors.shape[1]} != expected {handle.feature_dim}")
    return FeatureBatch(vectors=vectors, frame_ids=[c.source_frame_id for c in crops],
                        spec=handle.spec)


def extract_activations(handle: BackboneHandle, crop: FaceCrop) -> ActivationTensor:
    """Final-block activations: 7x7 spatial map for the CNN, token matrix
    (class token leading) for the ViT."""
    x = _to_input_tensor([crop])
    with torch.no_grad():
        if handle.spec.family == Family.RESIDUAL_CNN:
            fmap = handle.module.forward_map(x)[0]  # (C, H, W)
            data = fmap.permute(1, 2, 0).cpu().numpy().astype(np.float64)
            return ActivationTensor(layout=Layout.SPATIAL, data=data)
        tokens = handle.module.forward_tokens(x)[0]  # (1+T, C)
        return ActivationTensor(layout=Layout.TOKENS,
                                data=tokens.cpu().numpy().astype(np.float64),
                                patch_size=handle.module.patch_size)
