import json

import numpy as np
import pytest

from semapose import formats
from semapose.cli import run


def write_config(path, obj):
    formats.write_json(path, obj)
    return str(path)


TINY_PIPELINE = {
    "seed": 11,
    "categories": [
        {"kind": "lathe", "reference_seed": 0, "train_seeds": [1, 2],
         "eval_seeds": [50, 51], "eval_views_per_instance": 2},
    ],
    "n_views": 6,
    "lift_image": 64,
    "image": {"width": 96, "height": 96},
    "points_full": 96,
    "oracle": {"dim": 16, "noise_amp": 0.1},
    "max_tilt_deg": 45.0,
    "train": {
        "epochs": 2, "samples_per_instance": 3, "learning_rate": 1e-3,
        "points_partial": 64, "points_full": 96, "max_tilt_deg": 45.0,
    },
    "matcher": {"feature_dim": 16, "model_dim": 32, "num_blocks": 1, "num_heads": 2,
                "pe_freqs": 3, "combine": "concat"},
    "params": {"match_threshold": 0.3, "max_partial_points": 64, "max_full_points": 96},
    "iou_samples": 2000,
    "iou_steps": 90,
}


def test_unknown_flag_exits_2(tmp_path):
    assert run(["eval", "--bogus"]) == 2


def test_missing_seed_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"categories": []})
    assert run(["synth", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_unknown_command_exits_2():
    assert run(["frobnicate"]) == 2


def test_eval_with_predictions_equal_gt(tmp_path):
    # hand-build gt and identical predictions: every metric must be 1.0
    from semapose.geometry import Pose9D, rot_axis

    gt_items = []
    (tmp_path / "poses").mkdir()
    for k in range(3):
        pose = Pose9D(rot_axis([0, 0, 1], 0.3 * k), np.array([0.1 * k, 0, 1.0]), 1.0 + 0.1 * k)
        item = {
            "image_id": f"item_{k}",
            "category": "lathe",
            "pose": pose.to_json(),
            "extents": [0.2, 0.3, 0.2],
            "symmetry": {"kind": "none"},
        }
        gt_items.append(item)
        formats.write_json(tmp_path / "poses" / f"item_{k}.json", {
            "pose": pose.to_json(),
            "box": {"extents": item["extents"]},
            "diagnostics": {},
        })
    formats.write_json(tmp_path / "gt.json", {"items": gt_items})
    cfg = write_config(tmp_path / "eval.json", {
        "seed": 0,
        "predictions": str(tmp_path / "poses"),
        "ground_truth": str(tmp_path / "gt.json"),
        "iou_samples": 2000,
    })
    out = tmp_path / "eval_out"
    assert run(["eval", "--config", cfg, "--out", str(out)]) == 0
    report = formats.read_json(out / "report.json")
    assert report["n_items"] == 3
    assert all(v == 1.0 for v in report["per_threshold"].values())
    assert (out / "rotation_curve.csv").exists()
    assert (out / "config_used.json").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny synth -> train -> infer -> eval chain shared by several tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_config(root / "config.json", TINY_PIPELINE)
    synth_dir = root / "synth"
    assert run(["synth", "--config", cfg_path, "--out", str(synth_dir)]) == 0

    train_dir = root / "train"
    assert run(["train", "--config", cfg_path, "--out", str(train_dir),
                "--set", f"dataset_spec={synth_dir}/dataset_spec_lathe.json"]) == 0

    infer_dir = root / "infer"
    extents = formats.read_json(train_dir / "reference_extents.json")["extents"]
    assert run(["infer", "--config", cfg_path, "--out", str(infer_dir),
                "--set", f"weights_dir={train_dir}",
                "--set", f"reference_cloud={train_dir}/reference.gsfc",
                "--set", f"extents={json.dumps(extents)}",
                "--set", f"manifest={synth_dir}/lathe/observations/manifest.json"]) == 0

    eval_dir = root / "eval"
    assert run(["eval", "--config", cfg_path, "--out", str(eval_dir),
                "--set", f"predictions={infer_dir}/poses",
                "--set", f"ground_truth={synth_dir}/lathe/ground_truth.json"]) == 0
    return {"root": root, "cfg": cfg_path, "synth": synth_dir, "train": train_dir,
            "infer": infer_dir, "eval": eval_dir}


def test_synth_outputs(pipeline):
    synth = pipeline["synth"]
    assert (synth / "lathe/reference/model.ply").exists()
    manifest = formats.load_manifest(synth / "lathe/reference/manifest.json")
    assert len(manifest) == 6
    assert formats.validate_gsfm(manifest[0]["feature_file"])[2] == 16
    gt = formats.read_json(synth / "lathe/ground_truth.json")
    assert len(gt["items"]) == 4


def test_train_outputs(pipeline):
    train_dir = pipeline["train"]
    assert (train_dir / "weights.gsmw").exists()
    assert (train_dir / "loss_history.csv").exists()
    rows = (train_dir / "loss_history.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,step,L_P,L_Q,L_focal,total"
    assert len(rows) == 1 + 2 * 2 * 3  # epochs x instances x samples_per_instance


def test_infer_outputs(pipeline):
    infer_dir = pipeline["infer"]
    poses = sorted((infer_dir / "poses").glob("*.json"))
    assert poses
    payload = formats.read_json(poses[0])
    assert set(payload) == {"pose", "box", "diagnostics"}
    assert "timings_ms" not in payload["diagnostics"]
    assert (infer_dir / "timings.json").exists()


def test_lift_consumes_synth_reference(pipeline, tmp_path):
    synth = pipeline["synth"]
    cfg = write_config(tmp_path / "lift.json", {
        "seed": 3,
        "model": str(synth / "lathe/reference/model.ply"),
        "manifest": str(synth / "lathe/reference/manifest.json"),
        "category": "lathe",
        "symmetry": {"kind": "axis", "axis": [0, 1, 0], "reference_axis": [1, 0, 0]},
        "max_points": 96,
    })
    out = tmp_path / "lift_out"
    assert run(["lift", "--config", cfg, "--out", str(out)]) == 0
    cloud = formats.read_gsfc(out / "reference.gsfc")
    assert len(cloud) == 96 and cloud.dim == 16


def test_pipeline_deterministic(pipeline, tmp_path_factory):
    """Repeating synth->train->infer from the same config is byte-identical."""
    first = pipeline
    root = tmp_path_factory.mktemp("pipeline_again")
    cfg_path = write_config(root / "config.json", TINY_PIPELINE)
    synth_dir = root / "synth"
    assert run(["synth", "--config", cfg_path, "--out", str(synth_dir)]) == 0
    train_dir = root / "train"
    assert run(["train", "--config", cfg_path, "--out", str(train_dir),
                "--set", f"dataset_spec={synth_dir}/dataset_spec_lathe.json"]) == 0
    infer_dir = root / "infer"
    extents = formats.read_json(train_dir / "reference_extents.json")["extents"]
    assert run(["infer", "--config", cfg_path, "--out", str(infer_dir),
                "--set", f"weights_dir={train_dir}",
                "--set", f"reference_cloud={train_dir}/reference.gsfc",
                "--set", f"extents={json.dumps(extents)}",
                "--set", f"manifest={synth_dir}/lathe/observations/manifest.json"]) == 0

    w1 = (first["train"] / "weights.gsmw").read_bytes()
    w2 = (train_dir / "weights.gsmw").read_bytes()
    assert w1 == w2
    for path in sorted((first["infer"] / "poses").glob("*.json")):
        other = infer_dir / "poses" / path.name
        assert path.read_bytes() == other.read_bytes()
