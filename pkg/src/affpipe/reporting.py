"""Report persistence, comparison tables, and training-curve plots."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import EvalReport, ReportRow, compare_backbones  # noqa: E402
from .linear_probe import EpochRecord, TrainingCurve  # noqa: E402

DISPLAY_NAMES = {
    "sup_resnet50": ("Sup.", "ResNet50"),
    "sup_vit_s16": ("Sup.", "ViT-S/16"),
    "dino_resnet50": ("DINO", "ResNet50"),
    "dino_vit_s8": ("DINO", "ViT-S/8"),
}


def save_report(report: EvalReport, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "rows": [asdict(r) for r in report.rows],
        "curves": {bid: [asdict(e) for e in curve]
                   for bid, curve in report.curves.items()},
        "metrics": report.metrics,
        "config_snapshot": report.config_snapshot,
        "dataset_summary": report.dataset_summary,
        "split_descriptor": report.split_descriptor,
        "notes": report.notes,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_report(path: Path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return EvalReport(
        rows=[ReportRow(**r) for r in payload["rows"]],
        curves={bid: [EpochRecord(**e) for e in curve]
                for bid, curve in payload["curves"].items()},
        metrics=payload.get("metrics", {}),
        config_snapshot=payload.get("config_snapshot", {}),
        dataset_summary=payload.get("dataset_summary", {}),
        split_descriptor=payload.get("split_descriptor", {}),
        notes=payload.get("notes", []),
    )


def _fmt(value) -> str:
    return f"{value:.3f}" if value is not None else "--"


def emit_table(report: EvalReport) -> str:
    """Four-column comparison table; best validation accuracy marked with *."""
    rows = compare_backbones(report)
    header = ("Pretraining", "Backbone", "Train Accuracy", "Val. Accuracy")
    body = []
    for row, is_best in rows:
        pre, arch = DISPLAY_NAMES.get(row.backbone_id, ("?", row.backbone_id))
        val = _fmt(row.val_accuracy) + ("*" if is_best else "")
        if row.status != "ok":
            val = f"FAILED ({row.error})"
        body.append((pre, arch, _fmt(row.train_accuracy), val))

    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(4)]
    lines = []
    sep = "-+-".join("-" * w for w in widths)
    lines.append(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append(sep)
    for b in body:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(b, widths)))
    lines.append("")
    lines.append("* best validation accuracy")
    return "\n".join(lines)


def emit_table_file(report: EvalReport, path: Path) -> None:
    Path(path).write_text(emit_table(report) + "\n", encoding="utf-8")


def emit_curves(curves: dict[str, TrainingCurve], out_dir: Path) -> list[Path]:
    """One loss plot and one accuracy plot with all backbone series."""
    if not curves:
        raise ValueError("no curves to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    panels = [
        ("loss", "val_loss", "Validation loss", "loss_curves.png"),
        ("accuracy", "val_accuracy", "Validation accuracy", "accuracy_curves.png"),
    ]
    for _, attr, ylabel, filename in panels:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for bid, curve in curves.items():
            epochs = [e.epoch for e in curve]
            values = [getattr(e, attr) for e in curve]
            pre, arch = DISPLAY_NAMES.get(bid, ("", bid))
            ax.plot(epochs, values, label=f"{pre} {arch}".strip())
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        out = out_dir / filename
        fig.savefig(out, dpi=120)
        plt.close(fig)
        outputs.append(out)
    return outputs
