"""``affpipe`` command line: ingest, preprocess, train, run, report, explain.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime failure.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

log = logging.getLogger("affpipe")


def _fail(code: int, error_type: str, message: str):
    print(json.dumps({"error": error_type, "message": message}), file=sys.stderr)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .data_ingest import ManifestError
        try:
            return fn(*args, **kwargs)
        except ManifestError as e:
            _fail(EXIT_VALIDATION, type(e).__name__, str(e))
        except (ValueError, FileNotFoundError) as e:
            _fail(EXIT_VALIDATION, type(e).__name__, str(e))
        except click.ClickException:
            raise
        except SystemExit:
            raise
        except Exception as e:
            _fail(EXIT_RUNTIME, type(e).__name__, str(e))
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    """Classify animal emotional states from facial images with linear
    probes on frozen pretrained backbones."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_weights(weights: str) -> str:
    if Path(weights).is_file():
        return weights
    cache = os.environ.get("AFFPIPE_CACHE")
    if cache and (Path(cache) / weights).is_file():
        return str(Path(cache) / weights)
    return weights


@main.command()
@click.option("--videos", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--labels", "labels_csv", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns: video,subject_id,label.")
@click.option("--rate", default=5.0, show_default=True, help="Frame sampling rate in Hz.")
@click.option("--out", "out_manifest", required=True, type=click.Path())
@handle_errors
def ingest(videos, labels_csv, rate, out_manifest):
    """Extract labeled frames from condition-labeled videos into a manifest."""
    from .data_ingest import (ConditionLabel, DatasetManifest, SubjectMeta,
                              extract_frames, save_manifest)
    videos = Path(videos)
    out_manifest = Path(out_manifest)
    frames_dir = out_manifest.parent / (out_manifest.stem + "_frames")

    records = []
    subject_ids = {}
    with open(labels_csv, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            video_path = videos / row["video"]
            label = ConditionLabel.from_str(row["label"])
            sid = row["subject_id"]
            subject_ids[sid] = True
            recs = extract_frames(video_path, video_id=Path(row["video"]).stem,
                                  label=label, subject_id=sid,
                                  sampling_rate_hz=rate, out_dir=frames_dir)
            records.extend(recs)
            log.info("%s: %d frames", row["video"], len(recs))

    manifest = DatasetManifest(
        records=records,
        subjects=[SubjectMeta(subject_id=s) for s in sorted(subject_ids)],
        provenance=f"affpipe ingest from {videos} at {rate} Hz",
    )
    save_manifest(manifest, out_manifest)
    click.echo(f"wrote {len(records)} records to {out_manifest}")


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def summarize(manifest):
    """Print dataset summary statistics."""
    from .data_ingest import load_manifest
    from .data_ingest import summarize as summarize_manifest
    summary = summarize_manifest(load_manifest(manifest))
    click.echo(json.dumps(asdict(summary), indent=1))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--boxes", type=click.Path(exists=True, dir_okay=False),
              help="Sidecar file of precomputed face boxes.")
@click.option("--min-conf", default=0.5, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def preprocess(manifest, boxes, min_conf, out_dir):
    """Crop faces to 224x224 and write them as PNGs."""
    import cv2
    from .data_ingest import load_manifest
    from .experiment import preprocess_records
    from .face_preprocess import SidecarBoxLocalizer
    m = load_manifest(manifest)
    localizer = SidecarBoxLocalizer(boxes) if boxes else None
    kept, crops, dropped = preprocess_records(m.records, localizer, min_conf)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for crop in crops:
        bgr = cv2.cvtColor((crop.pixels * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out_dir / f"{crop.source_frame_id}.png"), bgr)
    click.echo(f"wrote {len(crops)} crops to {out_dir}; dropped {len(dropped)} "
               f"frames with no confident face")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n-train", required=True, type=int)
@click.option("--n-test", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_file", required=True, type=click.Path())
@handle_errors
def split(manifest, n_train, n_test, seed, out_file):
    """Draw a subject-disjoint train/test split."""
    from .data_ingest import load_manifest
    from .experiment import save_split, subject_disjoint_split
    m = load_manifest(manifest)
    assignment = subject_disjoint_split(m, n_train, n_test, seed=seed)
    save_split(assignment, out_file)
    click.echo(f"{len(assignment.train_subjects)} train / "
               f"{len(assignment.test_subjects)} test subjects; "
               f"{len(assignment.train_frames)}/{len(assignment.test_frames)} frames; "
               f"{len(assignment.excluded)} excluded")


@main.command()
@click.option("--backbone", "backbone_id", required=True)
@click.option("--weights", required=True)
@click.option("--crops", "crops_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of <frame_id>.png face crops.")
@click.option("--out", "out_file", required=True, type=click.Path())
@handle_errors
def features(backbone_id, weights, crops_dir, out_file):
    """Extract one feature vector per crop into an npz matrix file."""
    from .backbone_zoo import extract_features, load_backbone
    from .experiment import load_image
    from .face_preprocess import FaceCrop
    handle = load_backbone(backbone_id, _resolve_weights(weights))
    crops = []
    for path in sorted(Path(crops_dir).glob("*.png")):
        crops.append(FaceCrop(pixels=load_image(str(path)), source_frame_id=path.stem))
    if not crops:
        raise ValueError(f"no .png crops in {crops_dir}")
    batch = extract_features(handle, crops)
    np.savez(out_file, vectors=batch.vectors,
             frame_ids=np.array(batch.frame_ids))
    click.echo(f"wrote {batch.vectors.shape[0]}x{batch.vectors.shape[1]} features "
               f"to {out_file}")


@main.command()
@click.option("--backbone", "backbone_id", required=True)
@click.option("--weights", required=True)
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", "split_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="Optional YAML with optimizer/augment overrides.")
@click.option("--out", "out_ckpt", required=True, type=click.Path())
@handle_errors
def train(backbone_id, weights, manifest, split_file, config_file, out_ckpt):
    """Train a linear probe for one backbone and write its checkpoint."""
    import yaml
    from . import linear_probe as lp
    from .backbone_zoo import load_backbone
    from .data_ingest import load_manifest
    from .experiment import (_stable_rng, evaluate_features, labels_array,
                             load_split, preprocess_records, save_checkpoint,
                             train_probe_with_backbone)
    from .face_preprocess import AugmentConfig

    raw = {}
    if config_file:
        with open(config_file, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    opt_cfg = lp.OptimizerConfig(**raw.get("optimizer", {}))
    if "learning_rate" not in raw.get("optimizer", {}):
        from .backbone_zoo import resolve_spec
        opt_cfg.learning_rate = lp.FAMILY_LEARNING_RATES[resolve_spec(backbone_id).family.name]
    aug_raw = raw.get("augment", "default")
    aug_cfg = (None if aug_raw is None
               else AugmentConfig() if aug_raw == "default"
               else AugmentConfig(**aug_raw))
    seed = int(raw.get("seed", 0))

    m = load_manifest(manifest)
    assignment = load_split(split_file)
    by_id = {r.frame_id: r for r in m.records}
    train_recs = [by_id[f] for f in assignment.train_frames]
    test_recs = [by_id[f] for f in assignment.test_frames]
    train_recs, train_crops, _ = preprocess_records(train_recs, None)
    test_recs, test_crops, _ = preprocess_records(test_recs, None)

    handle = load_backbone(backbone_id, _resolve_weights(weights))
    probe = lp.init_probe(handle.feature_dim, _stable_rng(seed, f"init:{backbone_id}"),
                          backbone_id=backbone_id)
    probe, curve, train_x, test_x = train_probe_with_backbone(
        probe, handle, train_crops, labels_array(train_recs),
        test_crops, labels_array(test_recs), opt_cfg, aug_cfg, seed)
    save_checkpoint(out_ckpt, probe, opt_cfg, seed,
                    handle.parameter_fingerprint, handle.spec)
    final = curve[-1]
    click.echo(f"epoch {final.epoch}: train acc {final.train_accuracy:.3f}, "
               f"val acc {final.val_accuracy:.3f}; checkpoint at {out_ckpt}")


@main.command()
@click.option("--config", "config_file", required=True,
              type=click.Path(exists=True, dir_okay=False))
@handle_errors
def run(config_file):
    """Run the full multi-backbone comparison experiment."""
    from .config import load_run_config
    from .experiment import run_experiment
    from .reporting import emit_table
    cfg = load_run_config(config_file)
    report = run_experiment(cfg)
    click.echo(emit_table(report))
    if any(r.status != "ok" for r in report.rows):
        _fail(EXIT_RUNTIME, "PartialFailure",
              "one or more backbone runs failed; see run directory")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@handle_errors
def report(run_dir):
    """Render the comparison table of a finished run."""
    from .reporting import emit_table, load_report
    click.echo(emit_table(load_report(Path(run_dir) / "report.json")))


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--backbone", "backbone_id", required=True)
@click.option("--weights", required=True)
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", "frames_file", type=click.Path(exists=True, dir_okay=False),
              help="Text file with one frame_id per line; default: all frames.")
@click.option("--alpha", default=0.5, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def explain(ckpt, backbone_id, weights, manifest, frames_file, alpha, out_dir):
    """Write per-frame saliency overlays and a labeled contact sheet."""
    import cv2
    from .backbone_zoo import extract_activations, load_backbone
    from .data_ingest import load_manifest
    from .experiment import load_checkpoint, load_image, preprocess_records
    from .explainability import contact_sheet, eigencam, render_overlay

    _, meta = load_checkpoint(ckpt)
    if meta["backbone_id"] != backbone_id:
        raise ValueError(f"checkpoint was trained with {meta['backbone_id']}, "
                         f"not {backbone_id}")
    handle = load_backbone(backbone_id, _resolve_weights(weights))
    m = load_manifest(manifest)
    wanted = None
    if frames_file:
        wanted = {line.strip() for line in open(frames_file, encoding="utf-8")
                  if line.strip()}
    records = [r for r in m.records if wanted is None or r.frame_id in wanted]
    if not records:
        raise ValueError("no frames selected")
    records, crops, _ = preprocess_records(records, None)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec, crop in zip(records, crops):
        activation = extract_activations(handle, crop)
        grid = eigencam(activation, frame_id=rec.frame_id)
        overlay = render_overlay(crop, grid, alpha=alpha)
        bgr = cv2.cvtColor((overlay.pixels * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out_dir / f"{rec.frame_id}_saliency.png"), bgr)
        with open(out_dir / f"{rec.frame_id}_saliency.json", "w", encoding="utf-8") as f:
            json.dump({"frame_id": rec.frame_id, "degenerate": grid.degenerate,
                       "layout": grid.source_layout.value,
                       "class_token_excluded": grid.source_layout.value == "tokens",
                       "values": grid.values.tolist()}, f)
        entries.append((overlay, rec.label.value))
    sheet = contact_sheet(entries)
    cv2.imwrite(str(out_dir / "contact_sheet.png"),
                cv2.cvtColor((sheet * 255).astype(np.uint8), cv2.COLOR_RGB2BGR))
    click.echo(f"wrote {len(entries)} overlays and contact sheet to {out_dir}")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--subjects", default=10, show_default=True, type=int)
@click.option("--frames-per-subject", default=5, show_default=True, type=int)
@click.option("--epochs", default=30, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@handle_errors
def fixture(out_dir, subjects, frames_per_subject, epochs, seed):
    """Generate the bundled synthetic dataset, weights, and run config."""
    from .fixture import make_fixture
    config_path = make_fixture(Path(out_dir), n_subjects=subjects,
                               frames_per_subject=frames_per_subject,
                               seed=seed, epochs=epochs)
    click.echo(f"fixture config at {config_path}")


if __name__ == "__main__":
    main()
