import numpy as np
import pytest

from affpipe.backbone_zoo import (BACKBONE_REGISTRY, load_backbone,
                                  save_initialized_weights)
from affpipe.data_ingest import (ConditionLabel, DatasetManifest, FrameRecord,
                                 Sex, SubjectMeta)
from affpipe.face_preprocess import FaceCrop


def make_manifest(n_subjects=3, frames_per_subject=2) -> DatasetManifest:
    subjects = [SubjectMeta(subject_id=f"s{i}", sex=Sex.FEMALE if i % 2 == 0 else Sex.MALE,
                            age_years=float(i + 1))
                for i in range(n_subjects)]
    records = []
    for i in range(n_subjects):
        for k in range(frames_per_subject):
            label = (ConditionLabel.POSITIVE_ANTICIPATION if (i + k) % 2 == 0
                     else ConditionLabel.FRUSTRATION)
            records.append(FrameRecord(
                frame_id=f"s{i}_v{k}_f0", image_ref=f"/img/s{i}_{k}.png",
                subject_id=f"s{i}", video_id=f"s{i}_v{k}",
                label=label, frame_index=0))
    return DatasetManifest(records=records, subjects=subjects, provenance="test")


def random_crop(rng: np.random.Generator, frame_id: str = "f0") -> FaceCrop:
    return FaceCrop(pixels=rng.random((224, 224, 3)).astype(np.float32),
                    source_frame_id=frame_id)


@pytest.fixture(scope="session")
def weights_dir(tmp_path_factory):
    """Seeded fresh-initialization weight files for all four backbones."""
    d = tmp_path_factory.mktemp("weights")
    checksums = {}
    for i, bid in enumerate(BACKBONE_REGISTRY):
        checksums[bid] = save_initialized_weights(bid, d / f"{bid}.pt", seed=100 + i)
    return d, checksums


@pytest.fixture(scope="session")
def backbone_handles(weights_dir):
    d, _ = weights_dir
    return {bid: load_backbone(bid, d / f"{bid}.pt") for bid in BACKBONE_REGISTRY}
