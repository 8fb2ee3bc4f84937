import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from affpipe.cli import main
from affpipe.fixture import make_fixture


@pytest.fixture(scope="module")
def small_fixture(tmp_path_factory):
    """One-backbone synthetic dataset with a fast run config."""
    root = tmp_path_factory.mktemp("cli_fixture")
    config_path = make_fixture(root, n_subjects=4, frames_per_subject=3,
                               seed=1, backbone_ids=["sup_resnet50"], epochs=2)
    return root, config_path


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestDispatch:
    def test_help_lists_subcommands(self):
        result = run_cli("--help")
        assert result.exit_code == 0
        for sub in ("ingest", "summarize", "preprocess", "split", "features",
                    "train", "run", "report", "explain"):
            assert sub in result.output

    def test_unknown_subcommand(self):
        result = CliRunner().invoke(main, ["frobnicate"])
        assert result.exit_code == 2

    def test_validation_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"provenance": "x"}\nnot json\n')
        result = CliRunner().invoke(main, ["summarize", str(bad)])
        assert result.exit_code == 3


class TestSummarize:
    def test_counts(self, small_fixture):
        root, _ = small_fixture
        result = run_cli("summarize", str(root / "manifest.jsonl"))
        assert result.exit_code == 0
        summary = json.loads(result.output)
        assert summary["n_subjects"] == 4
        assert sum(summary["n_frames_by_label"].values()) == 12


class TestSplit:
    def test_split_file_written(self, small_fixture, tmp_path):
        root, _ = small_fixture
        out = tmp_path / "split.json"
        result = run_cli("split", "--manifest", str(root / "manifest.jsonl"),
                         "--n-train", "3", "--n-test", "1", "--seed", "2",
                         "--out", str(out))
        assert result.exit_code == 0
        payload = json.loads(out.read_text())
        sides = set(payload["subjects"].values())
        assert sides == {"train", "test"}
        assert payload["header"]["n_train_subjects"] == 3


class TestPreprocess:
    def test_crops_written(self, small_fixture, tmp_path):
        root, _ = small_fixture
        out = tmp_path / "crops"
        result = run_cli("preprocess", "--manifest", str(root / "manifest.jsonl"),
                         "--out", str(out))
        assert result.exit_code == 0
        assert len(list(out.glob("*.png"))) == 12

    def test_sidecar_boxes_and_drop_count(self, small_fixture, tmp_path):
        root, _ = small_fixture
        manifest_path = root / "manifest.jsonl"
        frame_ids = [json.loads(l)["frame_id"]
                     for l in manifest_path.read_text().splitlines()[1:]]
        sidecar = tmp_path / "boxes.jsonl"
        lines = [json.dumps({"frame_id": fid, "x": 40, "y": 40, "w": 140,
                             "h": 140, "confidence": 0.9})
                 for fid in frame_ids[:-2]]  # last two frames have no box
        sidecar.write_text("\n".join(lines))
        out = tmp_path / "crops"
        result = run_cli("preprocess", "--manifest", str(manifest_path),
                         "--boxes", str(sidecar), "--out", str(out))
        assert result.exit_code == 0
        assert "dropped 2" in result.output
        assert len(list(out.glob("*.png"))) == 10


class TestFeatures:
    def test_feature_file(self, small_fixture, tmp_path):
        root, _ = small_fixture
        crops = tmp_path / "crops"
        run_cli("preprocess", "--manifest", str(root / "manifest.jsonl"),
                "--out", str(crops))
        out = tmp_path / "features.npz"
        result = run_cli("features", "--backbone", "sup_resnet50",
                         "--weights", str(root / "weights" / "sup_resnet50.pt"),
                         "--crops", str(crops), "--out", str(out))
        assert result.exit_code == 0
        data = np.load(out)
        assert data["vectors"].shape == (12, 2048)
        assert len(data["frame_ids"]) == 12


class TestTrainAndExplain:
    def test_train_then_explain(self, small_fixture, tmp_path):
        root, _ = small_fixture
        manifest = str(root / "manifest.jsonl")
        split_file = tmp_path / "split.json"
        run_cli("split", "--manifest", manifest, "--n-train", "3",
                "--n-test", "1", "--seed", "0", "--out", str(split_file))

        train_cfg = tmp_path / "train.yaml"
        train_cfg.write_text(yaml.safe_dump(
            {"optimizer": {"epochs": 2, "batch_size": 4}, "augment": None}))
        ckpt = tmp_path / "probe.npz"
        result = run_cli("train", "--backbone", "sup_resnet50",
                         "--weights", str(root / "weights" / "sup_resnet50.pt"),
                         "--manifest", manifest, "--split", str(split_file),
                         "--config", str(train_cfg), "--out", str(ckpt))
        assert result.exit_code == 0
        assert ckpt.exists()

        frames_file = tmp_path / "frames.txt"
        frame_ids = [json.loads(l)["frame_id"]
                     for l in (root / "manifest.jsonl").read_text().splitlines()[1:]]
        frames_file.write_text("\n".join(frame_ids[:4]))
        out_dir = tmp_path / "saliency"
        result = run_cli("explain", "--ckpt", str(ckpt),
                         "--backbone", "sup_resnet50",
                         "--weights", str(root / "weights" / "sup_resnet50.pt"),
                         "--manifest", manifest, "--frames", str(frames_file),
                         "--out", str(out_dir))
        assert result.exit_code == 0
        assert len(list(out_dir.glob("*_saliency.png"))) == 4
        assert (out_dir / "contact_sheet.png").exists()
        sidecars = list(out_dir.glob("*_saliency.json"))
        assert len(sidecars) == 4
        grid = json.loads(sidecars[0].read_text())
        assert np.array(grid["values"]).shape == (7, 7)

    def test_explain_rejects_backbone_mismatch(self, small_fixture, tmp_path):
        root, _ = small_fixture
        # reuse a checkpoint trained for sup_resnet50 against a ViT id
        from affpipe import linear_probe as lp
        from affpipe.backbone_zoo import BACKBONE_REGISTRY
        from affpipe.experiment import save_checkpoint
        probe = lp.init_probe(2048, np.random.default_rng(0))
        ckpt = tmp_path / "probe.npz"
        save_checkpoint(ckpt, probe, lp.OptimizerConfig(), 0, "fp",
                        BACKBONE_REGISTRY["sup_resnet50"])
        result = CliRunner().invoke(main, [
            "explain", "--ckpt", str(ckpt), "--backbone", "sup_vit_s16",
            "--weights", "w.pt", "--manifest", str(root / "manifest.jsonl"),
            "--out", str(tmp_path / "out")])
        assert result.exit_code == 3


class TestIngest:
    def test_ingest_videos(self, tmp_path):
        from test_data_ingest import write_video
        videos = tmp_path / "videos"
        videos.mkdir()
        write_video(videos / "a.avi", n_frames=50, fps=25)
        write_video(videos / "b.avi", n_frames=25, fps=25)
        labels = tmp_path / "labels.csv"
        labels.write_text("video,subject_id,label\n"
                          "a.avi,dog1,positive\n"
                          "b.avi,dog2,negative\n")
        out = tmp_path / "manifest.jsonl"
        result = run_cli("ingest", "--videos", str(videos),
                         "--labels", str(labels), "--rate", "5",
                         "--out", str(out))
        assert result.exit_code == 0
        from affpipe.data_ingest import load_manifest, summarize
        m = load_manifest(out)
        assert len(m.records) == 10 + 5
        s = summarize(m)
        assert s.n_frames_by_label == {"positive": 10, "negative": 5}
