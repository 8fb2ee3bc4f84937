"""Subject-disjoint splits, training orchestration, metrics, and reports."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from . import linear_probe as lp
from .backbone_zoo import (BackboneHandle, extract_features, fingerprint,
                           load_backbone, resolve_spec, spec_id, BackboneSpec)
from .config import RunConfig, snapshot_run_config
from .data_ingest import (ConditionLabel, DatasetManifest, FrameRecord,
                          load_manifest, summarize)
from .face_preprocess import (AugmentConfig, FaceBox, FaceCrop,
                              SidecarBoxLocalizer, augment, crop_and_resize,
                              localize_face, rng_for_frame)

log = logging.getLogger("affpipe")

# class index convention: 0 = negative (frustration), 1 = positive
LABEL_TO_INDEX = {"negative": 0, "positive": 1}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}

# Table row order: supervised CNN, supervised ViT, self-distilled CNN,
# self-distilled ViT
TABLE_ORDER = ["sup_resnet50", "sup_vit_s16", "dino_resnet50", "dino_vit_s8"]

CHECKPOINT_FORMAT_VERSION = 1


class InsufficientSubjectsError(Exception):
    pass


class EmptySplitError(Exception):
    pass


class FrozenBackboneViolation(Exception):
    pass


@dataclass
class SplitAssignment:
    train_subjects: set[str]
    test_subjects: set[str]
    train_frames: list[str]
    test_frames: list[str]
    excluded: list[tuple[str, str]]  # (frame_id, reason)
    seed: int


@dataclass
class Metrics:
    accuracy: float
    n_correct: int
    n_total: int
    per_label_accuracy: dict[str, float]
    confusion: list[list[int]]  # rows = true class, cols = predicted class

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReportRow:
    backbone_id: str
    train_accuracy: Optional[float]
    val_accuracy: Optional[float]
    status: str = "ok"  # "ok" | "failed"
    error: Optional[str] = None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    curves: dict[str, lp.TrainingCurve]
    config_snapshot: dict
    dataset_summary: dict
    split_descriptor: dict
    metrics: dict[str, dict] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


def _pos_fraction(frames: list[FrameRecord]) -> float:
    if not frames:
        return 0.0
    pos = sum(1 for r in frames if r.label == ConditionLabel.POSITIVE_ANTICIPATION)
    return pos / len(frames)


def subject_disjoint_split(manifest: DatasetManifest, n_train_subjects: int,
                           n_test_subjects: int, seed: int = 0,
                           n_candidates: int = 200,
                           max_ratio_gap: float = 0.10) -> SplitAssignment:
    """Partition subjects into disjoint train/test sides by a seeded draw.

    Among ``n_candidates`` seeded shuffles, prefers the first whose
    positive-frame ratios on the two sides differ by at most
    ``max_ratio_gap``; otherwise keeps the closest one. Disjointness and
    complete frame assignment hold unconditionally.
    """
    frames_by_subject: dict[str, list[FrameRecord]] = {}
    for r in manifest.records:
        frames_by_subject.setdefault(r.subject_id, []).append(r)
    eligible = sorted(frames_by_subject)
    if n_train_subjects + n_test_subjects > len(eligible):
        raise InsufficientSubjectsError(
            f"need {n_train_subjects}+{n_test_subjects} subjects with frames, "
            f"manifest has {len(eligible)}")

    rng = np.random.default_rng(seed)
    best: Optional[tuple[float, list[str]]] = None
    for _ in range(max(1, n_candidates)):
        order = list(rng.permutation(eligible))
        train_side = order[:n_train_subjects]
        test_side = order[n_train_subjects:n_train_subjects + n_test_subjects]
        train_f = [f for s in train_side for f in frames_by_subject[s]]
        test_f = [f for s in test_side for f in frames_by_subject[s]]
        gap = abs(_pos_fraction(train_f) - _pos_fraction(test_f))
        if best is None or gap < best[0]:
            best = (gap, order)
        if gap <= max_ratio_gap:
            break

    order = best[1]
    train_subjects = set(order[:n_train_subjects])
    test_subjects = set(order[n_train_subjects:n_train_subjects + n_test_subjects])

    train_frames, test_frames, excluded = [], [], []
    for r in manifest.records:
        if r.subject_id in train_subjects:
            train_frames.append(r.frame_id)
        elif r.subject_id in test_subjects:
            test_frames.append(r.frame_id)
        else:
            excluded.append((r.frame_id, f"subject {r.subject_id} not drawn into either side"))
    assert not (train_subjects & test_subjects)
    return SplitAssignment(train_subjects=train_subjects, test_subjects=test_subjects,
                           train_frames=train_frames, test_frames=test_frames,
                           excluded=excluded, seed=seed)


def save_split(split: SplitAssignment, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": {"seed": split.seed,
                   "n_train_subjects": len(split.train_subjects),
                   "n_test_subjects": len(split.test_subjects)},
        "subjects": {**{s: "train" for s in sorted(split.train_subjects)},
                     **{s: "test" for s in sorted(split.test_subjects)}},
        "train_frames": split.train_frames,
        "test_frames": split.test_frames,
        "excluded": [{"frame_id": f, "reason": r} for f, r in split.excluded],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_split(path: Path) -> SplitAssignment:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    subjects = payload["subjects"]
    return SplitAssignment(
        train_subjects={s for s, side in subjects.items() if side == "train"},
        test_subjects={s for s, side in subjects.items() if side == "test"},
        train_frames=list(payload["train_frames"]),
        test_frames=list(payload["test_frames"]),
        excluded=[(e["frame_id"], e["reason"]) for e in payload.get("excluded", [])],
        seed=int(payload["header"]["seed"]),
    )


def metrics_from_predictions(pred: np.ndarray, true: np.ndarray) -> Metrics:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise lp.ShapeError(f"prediction shape {pred.shape} != label shape {true.shape}")
    if len(true) == 0:
        raise EmptySplitError("no frames to evaluate")
    confusion = [[0, 0], [0, 0]]
    for p, t in zip(pred, true):
        confusion[int(t)][int(p)] += 1
    n_correct = confusion[0][0] + confusion[1][1]
    n_total = len(true)
    per_label = {}
    for idx, name in INDEX_TO_LABEL.items():
        row_total = sum(confusion[idx])
        per_label[name] = confusion[idx][idx] / row_total if row_total else float("nan")
    return Metrics(accuracy=n_correct / n_total, n_correct=n_correct, n_total=n_total,
                   per_label_accuracy=per_label, confusion=confusion)


def evaluate_features(probe: lp.ProbeModel, features: np.ndarray,
                      labels: np.ndarray) -> Metrics:
    pred, _ = lp.predict(probe, features)
    return metrics_from_predictions(pred, labels)


def evaluate(probe: lp.ProbeModel, handle: BackboneHandle,
             crops: list[FaceCrop], labels: np.ndarray) -> Metrics:
    """Metrics over un-augmented crops of one split side."""
    if not crops:
        raise EmptySplitError("no frames to evaluate")
    batch = extract_features(handle, crops)
    return evaluate_features(probe, batch.vectors, labels)


def load_image(image_ref: str) -> np.ndarray:
    img = cv2.imread(image_ref, cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {image_ref}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def preprocess_records(records: list[FrameRecord],
                       localizer: Optional[SidecarBoxLocalizer],
                       min_confidence: float = 0.5):
    """Crop every record's face. Returns (kept_records, crops, dropped).

    Without a localizer the full image is treated as the face region.
    Frames with no confident detection are dropped and reported, not raised.
    """
    kept, crops, dropped = [], [], []
    for rec in records:
        img = load_image(rec.image_ref)
        if localizer is not None:
            box = localize_face(img, localizer.for_frame(rec.frame_id), min_confidence)
            if box is None:
                dropped.append(rec.frame_id)
                continue
        else:
            h, w = img.shape[:2]
            box = FaceBox(x=0, y=0, w=w, h=h, confidence=1.0)
        crops.append(crop_and_resize(img, box, frame_id=rec.frame_id))
        kept.append(rec)
    if dropped:
        log.info("dropped %d frames with no confident face detection", len(dropped))
    return kept, crops, dropped


def labels_array(records: list[FrameRecord]) -> np.ndarray:
    return np.array([LABEL_TO_INDEX[r.label.value] for r in records], dtype=np.int64)


def _stable_rng(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def train_probe_with_backbone(probe: lp.ProbeModel, handle: BackboneHandle,
                              train_crops: list[FaceCrop], train_y: np.ndarray,
                              val_crops: list[FaceCrop], val_y: np.ndarray,
                              opt_cfg: lp.OptimizerConfig,
                              aug_cfg: Optional[AugmentConfig],
                              seed: int):
    """Full probe training against a frozen backbone.

    Augmentations (when configured) are re-applied to the training crops
    each epoch with per-frame seeded generators; evaluation features are
    always un-augmented. The backbone fingerprint is checked afterwards.
    """
    fp_before = fingerprint(handle)
    val_features = extract_features(handle, val_crops).vectors
    train_features = extract_features(handle, train_crops).vectors

    per_epoch = None
    if aug_cfg is not None:
        def per_epoch(epoch: int) -> np.ndarray:
            augmented = [
                augment(crop, aug_cfg,
                        rng_for_frame(seed, f"{crop.source_frame_id}:e{epoch}"))
                for crop in train_crops
            ]
            return extract_features(handle, augmented).vectors

    rng = _stable_rng(seed, f"train:{handle.backbone_id}")
    trained, curve = lp.train_on_features(probe, train_features, train_y,
                                          val_features, val_y, opt_cfg, rng,
                                          train_x_per_epoch=per_epoch)
    fp_after = fingerprint(handle)
    if fp_before != fp_after:
        raise FrozenBackboneViolation(
            f"backbone {handle.backbone_id} parameters changed during probe training")
    return trained, curve, train_features, val_features


def save_checkpoint(path: Path, probe: lp.ProbeModel, opt_cfg: lp.OptimizerConfig,
                    seed: int, backbone_fingerprint: str,
                    backbone_spec: BackboneSpec) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone_id": spec_id(backbone_spec),
        "backbone_family": backbone_spec.family.name,
        "backbone_pretraining": backbone_spec.pretraining.name,
        "backbone_variant": backbone_spec.variant,
        "backbone_fingerprint": backbone_fingerprint,
        "optimizer": asdict(opt_cfg),
        "seed": seed,
        "feature_dim": probe.feature_dim,
    }
    np.savez(path, weights=probe.weights, bias=probe.bias,
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_checkpoint(path: Path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        probe = lp.ProbeModel(weights=data["weights"], bias=data["bias"],
                              feature_dim=int(meta["feature_dim"]),
                              backbone_id=meta["backbone_id"])
    return probe, meta


def _emit_saliency_sheet(handle: BackboneHandle, records: list[FrameRecord],
                         crops: list[FaceCrop], out_path: Path,
                         per_label: int = 4) -> None:
    """Overlay sheet for a few held-out frames: positive row above negative."""
    from .backbone_zoo import extract_activations
    from .explainability import contact_sheet, eigencam, render_overlay

    entries = []
    counts = {"positive": 0, "negative": 0}
    for rec, crop in zip(records, crops):
        lab = rec.label.value
        if counts[lab] >= per_label:
            continue
        counts[lab] += 1
        grid = eigencam(extract_activations(handle, crop), frame_id=rec.frame_id)
        entries.append((render_overlay(crop, grid, alpha=0.5), lab))
    if not entries:
        return
    sheet = contact_sheet(entries, n_cols=per_label)
    cv2.imwrite(str(out_path),
                cv2.cvtColor((sheet * 255).astype(np.uint8), cv2.COLOR_RGB2BGR))


def run_experiment(cfg: RunConfig) -> EvalReport:
    """End-to-end run: split, preprocess, per-backbone train + evaluate,
    persisted report. One backbone failing does not abort the others."""
    from . import reporting  # deferred: matplotlib import cost

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "VERSION").write_text(f"affpipe-run-layout {CHECKPOINT_FORMAT_VERSION}\n")

    manifest = load_manifest(cfg.manifest)
    summary = summarize(manifest)

    if cfg.split_file:
        split = load_split(cfg.split_file)
    else:
        sp = cfg.split_params
        split = subject_disjoint_split(manifest, sp.n_train_subjects,
                                       sp.n_test_subjects, seed=sp.seed)
    save_split(split, out_dir / "split.json")

    snapshot = snapshot_run_config(cfg)
    from .config import save_run_config
    save_run_config(cfg, out_dir / "config.yaml")

    by_id = {r.frame_id: r for r in manifest.records}
    train_records = [by_id[f] for f in split.train_frames]
    test_records = [by_id[f] for f in split.test_frames]

    localizer = SidecarBoxLocalizer(cfg.boxes) if cfg.boxes else None
    train_records, train_crops, dropped_tr = preprocess_records(
        train_records, localizer, cfg.min_confidence)
    test_records, test_crops, dropped_te = preprocess_records(
        test_records, localizer, cfg.min_confidence)
    train_y = labels_array(train_records)
    test_y = labels_array(test_records)

    report = EvalReport(rows=[], curves={}, config_snapshot=snapshot,
                        dataset_summary=asdict(summary),
                        split_descriptor={
                            "seed": split.seed,
                            "n_train_subjects": len(split.train_subjects),
                            "n_test_subjects": len(split.test_subjects),
                            "n_train_frames": len(split.train_frames),
                            "n_test_frames": len(split.test_frames),
                            "n_excluded_frames": len(split.excluded),
                            "n_dropped_no_face": len(dropped_tr) + len(dropped_te),
                        })
    report.notes.append("model-selection and test sets coincide in the source protocol")

    for entry in cfg.backbones:
        bid = entry.backbone_id
        bdir = out_dir / bid
        bdir.mkdir(exist_ok=True)
        try:
            spec = resolve_spec(bid)
            if entry.checksum:
                spec = BackboneSpec(spec.family, spec.pretraining, spec.variant,
                                    weights_checksum=entry.checksum)
            handle = load_backbone(spec, entry.weights)
            handle.use_mean_tokens = cfg.mean_tokens
            log.info("backbone %s loaded, fingerprint %s", bid,
                     handle.parameter_fingerprint[:16])

            probe = lp.init_probe(handle.feature_dim,
                                  _stable_rng(cfg.seed, f"init:{bid}"),
                                  backbone_id=bid)
            opt_cfg = cfg.optimizer_for(bid)
            probe, curve, train_x, test_x = train_probe_with_backbone(
                probe, handle, train_crops, train_y, test_crops, test_y,
                opt_cfg, cfg.augment, cfg.seed)

            train_metrics = evaluate_features(probe, train_x, train_y)
            val_metrics = evaluate_features(probe, test_x, test_y)

            save_checkpoint(bdir / "probe.npz", probe, opt_cfg, cfg.seed,
                            handle.parameter_fingerprint, handle.spec)
            with open(bdir / "curve.json", "w", encoding="utf-8") as f:
                json.dump([asdict(e) for e in curve], f, indent=1)
            with open(bdir / "metrics.json", "w", encoding="utf-8") as f:
                json.dump({"train": train_metrics.to_dict(),
                           "val": val_metrics.to_dict()}, f, indent=1)

            _emit_saliency_sheet(handle, test_records, test_crops,
                                 bdir / "saliency_sheet.png")

            report.rows.append(ReportRow(backbone_id=bid,
                                         train_accuracy=train_metrics.accuracy,
                                         val_accuracy=val_metrics.accuracy))
            report.curves[bid] = curve
            report.metrics[bid] = {"train": train_metrics.to_dict(),
                                   "val": val_metrics.to_dict()}
        except Exception as e:  # failure isolation across backbones
            log.exception("backbone %s failed", bid)
            report.rows.append(ReportRow(backbone_id=bid, train_accuracy=None,
                                         val_accuracy=None, status="failed",
                                         error=f"{type(e).__name__}: {e}"))
            (bdir / "FAILED").write_text(f"{type(e).__name__}: {e}\n")

    reporting.save_report(report, out_dir / "report.json")
    reporting.emit_table_file(report, out_dir / "table.txt")
    ok_curves = {bid: c for bid, c in report.curves.items() if c}
    if ok_curves:
        reporting.emit_curves(ok_curves, out_dir)
    return report


def compare_backbones(report: EvalReport) -> list[tuple[ReportRow, bool]]:
    """Rows in fixed table order with a best-validation-accuracy flag.

    Ties flag every tied row.
    """
    if not report.rows:
        raise ValueError("empty report")
    ordered = sorted(
        report.rows,
        key=lambda r: TABLE_ORDER.index(r.backbone_id)
        if r.backbone_id in TABLE_ORDER else len(TABLE_ORDER))
    vals = [r.val_accuracy for r in ordered if r.val_accuracy is not None]
    best = max(vals) if vals else None
    return [(r, r.val_accuracy is not None and r.val_accuracy == best) for r in ordered]
