"""Dataset manifests: loading, validation, frame extraction and summary stats.

A manifest is a UTF-8 JSONL file: one header object on the first line
(provenance), then one frame record per line with exactly the fields
frame_id, image_ref, subject_id, video_id, label, frame_index.
Subject metadata lives in a companion ``<stem>.subjects.jsonl`` file.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import cv2


class ConditionLabel(Enum):
    POSITIVE_ANTICIPATION = "positive"
    FRUSTRATION = "negative"

    @classmethod
    def from_str(cls, s: str) -> "ConditionLabel":
        for member in cls:
            if member.value == s:
                return member
        raise ValueError(f"unknown label {s!r}; expected 'positive' or 'negative'")


class Sex(Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    sex: Sex = Sex.UNKNOWN
    age_years: Optional[float] = None
    neutered: Optional[bool] = None


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    image_ref: str
    subject_id: str
    video_id: str
    label: ConditionLabel
    frame_index: int


@dataclass
class DatasetManifest:
    records: list[FrameRecord]
    subjects: list[SubjectMeta]
    provenance: str = ""

    def subjects_by_id(self) -> dict[str, SubjectMeta]:
        return {s.subject_id: s for s in self.subjects}


@dataclass
class DatasetSummary:
    n_frames_by_label: dict[str, int]
    n_subjects: int
    subjects_by_sex: dict[str, int]
    subjects_by_age_bucket: dict[int, int]
    frames_per_subject: dict[str, int]


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "ERROR" | "WARNING"
    locator: str  # frame_id / subject_id the issue points at
    message: str


class ManifestError(Exception):
    pass


class ManifestNotFoundError(ManifestError):
    pass


class ManifestParseError(ManifestError):
    def __init__(self, path: Path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class ManifestValidationError(ManifestError):
    def __init__(self, issues: list[ValidationIssue]):
        self.issues = issues
        msgs = "; ".join(f"[{i.locator}] {i.message}" for i in issues)
        super().__init__(f"manifest failed validation: {msgs}")


class VideoDecodeError(Exception):
    pass


class EmptyVideoError(VideoDecodeError):
    pass


RECORD_FIELDS = ("frame_id", "image_ref", "subject_id", "video_id", "label", "frame_index")


def default_subjects_path(manifest_path: Path) -> Path:
    suffix = manifest_path.suffix or ".jsonl"
    return manifest_path.with_name(manifest_path.stem + ".subjects" + suffix)


def save_manifest(manifest: DatasetManifest, path: Path, subjects_path: Optional[Path] = None) -> None:
    path = Path(path)
    subjects_path = Path(subjects_path) if subjects_path else default_subjects_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = {"provenance": manifest.provenance, "subjects_file": subjects_path.name}
        f.write(json.dumps(header) + "\n")
        for r in manifest.records:
            f.write(json.dumps({
                "frame_id": r.frame_id,
                "image_ref": r.image_ref,
                "subject_id": r.subject_id,
                "video_id": r.video_id,
                "label": r.label.value,
                "frame_index": r.frame_index,
            }) + "\n")
    with open(subjects_path, "w", encoding="utf-8") as f:
        for s in manifest.subjects:
            f.write(json.dumps({
                "subject_id": s.subject_id,
                "sex": s.sex.value,
                "age_years": s.age_years,
                "neutered": s.neutered,
            }) + "\n")


def load_manifest(path: Path, subjects_path: Optional[Path] = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest file not found: {path}")
    subjects_path = Path(subjects_path) if subjects_path else default_subjects_path(path)

    provenance = ""
    records: list[FrameRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(path, line_no, f"invalid JSON: {e.msg}") from e
            if line_no == 1 and "frame_id" not in obj:
                provenance = obj.get("provenance", "")
                continue
            missing = [k for k in RECORD_FIELDS if k not in obj]
            if missing:
                raise ManifestParseError(path, line_no, f"missing fields: {missing}")
            try:
                label = ConditionLabel.from_str(obj["label"])
            except ValueError as e:
                raise ManifestParseError(path, line_no, str(e)) from e
            records.append(FrameRecord(
                frame_id=str(obj["frame_id"]),
                image_ref=str(obj["image_ref"]),
                subject_id=str(obj["subject_id"]),
                video_id=str(obj["video_id"]),
                label=label,
                frame_index=int(obj["frame_index"]),
            ))

    subjects: list[SubjectMeta] = []
    if subjects_path.is_file():
        with open(subjects_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestParseError(subjects_path, line_no, f"invalid JSON: {e.msg}") from e
                subjects.append(SubjectMeta(
                    subject_id=str(obj["subject_id"]),
                    sex=Sex(obj.get("sex", "unknown")),
                    age_years=obj.get("age_years"),
                    neutered=obj.get("neutered"),
                ))

    manifest = DatasetManifest(records=records, subjects=subjects, provenance=provenance)
    errors = [i for i in validate_manifest(manifest) if i.severity == "ERROR"]
    if errors:
        raise ManifestValidationError(errors)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> list[ValidationIssue]:
    """Check manifest invariants. Issues are data, not exceptions."""
    issues: list[ValidationIssue] = []
    seen_frames: set[str] = set()
    subject_ids = Counter(s.subject_id for s in manifest.subjects)

    for sid, count in subject_ids.items():
        if not sid:
            issues.append(ValidationIssue("ERROR", sid, "empty subject_id"))
        if count > 1:
            issues.append(ValidationIssue("ERROR", sid, f"duplicate subject_id ({count} entries)"))

    referenced: set[str] = set()
    for r in manifest.records:
        if r.frame_id in seen_frames:
            issues.append(ValidationIssue("ERROR", r.frame_id, f"duplicate frame_id {r.frame_id!r}"))
        seen_frames.add(r.frame_id)
        if r.subject_id not in subject_ids:
            issues.append(ValidationIssue("ERROR", r.frame_id, f"unresolved subject {r.subject_id!r}"))
        referenced.add(r.subject_id)
        if r.frame_index < 0:
            issues.append(ValidationIssue("ERROR", r.frame_id, f"negative frame_index {r.frame_index}"))

    for sid in subject_ids:
        if sid and sid not in referenced:
            issues.append(ValidationIssue("WARNING", sid, "subject has no frames"))
    return issues


def extract_frames(
    video_ref: Path,
    video_id: str,
    label: ConditionLabel,
    subject_id: str,
    sampling_rate_hz: float,
    out_dir: Optional[Path] = None,
) -> list[FrameRecord]:
    """Sample frames uniformly at ``sampling_rate_hz`` from a short video.

    All frames inherit the video's single label. If ``out_dir`` is given the
    sampled frames are written there as PNGs and image_ref points at them;
    otherwise image_ref is ``<video_ref>#<source_frame>``.
    """
    if sampling_rate_hz <= 0:
        raise ValueError(f"sampling_rate_hz must be positive, got {sampling_rate_hz}")
    video_ref = Path(video_ref)
    cap = cv2.VideoCapture(str(video_ref))
    if not cap.isOpened():
        raise VideoDecodeError(f"cannot open video {video_ref}")
    try:
        fps = cap.get(cv2.CAP_PROP_FPS)
        frames = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(frame)
    finally:
        cap.release()
    if not frames:
        raise EmptyVideoError(f"no decodable frames in {video_ref}")
    if not fps or fps <= 0 or not math.isfinite(fps):
        fps = 25.0  # container without fps metadata

    duration = len(frames) / fps
    n_samples = max(1, math.floor(duration * sampling_rate_hz + 1e-9))
    records: list[FrameRecord] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(n_samples):
        src = min(int(round(k / sampling_rate_hz * fps)), len(frames) - 1)
        frame_id = f"{video_id}_f{k:05d}"
        if out_dir is not None:
            image_ref = str(out_dir / f"{frame_id}.png")
            cv2.imwrite(image_ref, frames[src])
        else:
            image_ref = f"{video_ref}#{src}"
        records.append(FrameRecord(
            frame_id=frame_id,
            image_ref=image_ref,
            subject_id=subject_id,
            video_id=video_id,
            label=label,
            frame_index=k,
        ))
    return records


def summarize(manifest: DatasetManifest) -> DatasetSummary:
    by_label = Counter(r.label.value for r in manifest.records)
    per_subject = Counter(r.subject_id for r in manifest.records)
    by_sex = Counter(s.sex.value for s in manifest.subjects)
    by_age: Counter[int] = Counter()
    for s in manifest.subjects:
        if s.age_years is not None:
            by_age[int(math.floor(s.age_years))] += 1
    return DatasetSummary(
        n_frames_by_label=dict(by_label),
        n_subjects=len(manifest.subjects),
        subjects_by_sex=dict(by_sex),
        subjects_by_age_bucket=dict(by_age),
        frames_per_subject=dict(per_subject),
    )
