"""Batch command line: synth, lift, train, infer, eval, ablate.

Every subcommand takes a JSON config (--config), an output directory
(--out) and optional --set key=value overrides with dotted paths. Configs
must carry explicit seeds; the effective config is echoed into the output
directory so any run can be reproduced from its artifacts alone.

Exit codes: 0 success, 1 pipeline failure (stage-tagged message on
stderr), 2 usage/config errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .errors import EngineError, FormatError
from .featurelift import (
    FeatureCloud,
    SymmetryDescriptor,
    farthest_point_sample,
    lift_features,
    render_point_splats,
    visibility_mask,
)
from .geometry import OrientedBox3D, Pose9D, RansacParams
from .matcher import MatcherConfig, MatcherWeights
from .metrics import accuracy_curves, evaluate, write_curves_csv
from .solver import InferenceParams, infer
from .trainer import (
    TrainConfig,
    build_category_dataset,
    generate_toy_category,
    observation_camera,
    sample_object_pose,
    train,
    _identity_extrinsics,
    _instance_normalized,
)


class UsageError(Exception):
    pass


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return out


def _load_config(args) -> dict:
    if args.config is None:
        raise UsageError("--config is required")
    config = formats.read_json(args.config)
    config = _apply_overrides(config, args.set or [])
    if "seed" not in config:
        raise UsageError("config must carry an explicit 'seed' (no wall-clock seeding)")
    return config


def _prepare_out(args, config: dict) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_json(out / "config_used.json", config)
    return out


def _symmetry_for(kind: str) -> SymmetryDescriptor:
    if kind in ("lathe", "cup_with_handle"):
        return SymmetryDescriptor.about_y()
    return SymmetryDescriptor.none()


def _matcher_config(config: dict, oracle_dim: int) -> MatcherConfig:
    overrides = dict(config.get("matcher", {}))
    overrides.setdefault("feature_dim", oracle_dim)
    return MatcherConfig(**overrides)


def _train_config(config: dict) -> TrainConfig:
    fields = dict(config.get("train", {}))
    fields.setdefault("seed", config["seed"])
    return TrainConfig(**fields)


def _dataset_from_spec(spec: dict, points_full: int, lift_image: int):
    oracle = spec.get("oracle", {})
    return build_category_dataset(
        kind=spec["category"],
        reference_seed=spec["reference_seed"],
        instance_seeds=list(spec["instance_seeds"]),
        n_views=spec.get("n_views", 40),
        oracle_dim=oracle.get("dim", 32),
        noise_amp=oracle.get("noise_amp", 0.1),
        seed=spec["seed"],
        points_full=points_full,
        lift_image=lift_image,
    )


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    """Generate toy models, reference views + feature maps, observation sets
    with ground truth, and the dataset specs consumed by `train`."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    seed = config["seed"]
    oracle_cfg = config.get("oracle", {"dim": 32, "noise_amp": 0.1})
    image = config.get("image", {"width": 128, "height": 128})
    lift_image = config.get("lift_image", 96)
    n_views = config.get("n_views", 40)
    max_tilt = config.get("max_tilt_deg", 60.0)

    for cat in config["categories"]:
        kind = cat["kind"]
        cat_dir = out / kind
        (cat_dir / "reference").mkdir(parents=True, exist_ok=True)
        (cat_dir / "observations").mkdir(exist_ok=True)

        dataset = build_category_dataset(
            kind,
            reference_seed=cat.get("reference_seed", 0),
            instance_seeds=list(cat["train_seeds"]),
            n_views=n_views,
            oracle_dim=oracle_cfg.get("dim", 32),
            noise_amp=oracle_cfg.get("noise_amp", 0.1),
            seed=seed,
            points_full=config.get("points_full", 192),
            lift_image=lift_image,
        )
        formats.write_ply(cat_dir / "reference" / "model.ply", dataset.reference)

        # reference views with rendered oracle feature maps, for `lift`
        ref_feats = dataset.oracle.features(
            _instance_normalized(dataset.reference),
            cat.get("reference_seed", 0),
            dataset.reference.symmetry,
            dataset.reference.part_mask,
        )
        from .featurelift import sample_camera_poses

        views = sample_camera_poses(dataset.reference, n_views, seed=seed,
                                    width=lift_image, height=lift_image)
        entries = []
        for k, view in enumerate(views):
            fmap, _, _ = render_point_splats(dataset.reference.points, ref_feats, view)
            cam_file = cat_dir / "reference" / f"view_{k:03d}.camera.json"
            feat_file = cat_dir / "reference" / f"view_{k:03d}.gsfm"
            formats.write_json(cam_file, view.to_json())
            formats.write_gsfm(feat_file, fmap.data)
            entries.append({
                "image_id": f"{kind}_ref_{k:03d}",
                "camera_file": f"view_{k:03d}.camera.json",
                "feature_file": f"view_{k:03d}.gsfm",
            })
        formats.write_json(cat_dir / "reference" / "manifest.json", {"entries": entries})

        # held-out observations with ground truth
        obs_view = observation_camera(image.get("width", 128), image.get("height", 128))
        formats.write_json(cat_dir / "observations" / "camera.json", obs_view.to_json())
        obs_entries = []
        gt_items = []
        for e, eval_seed in enumerate(cat.get("eval_seeds", [])):
            inst = generate_toy_category(kind, eval_seed)
            centroid = inst.points.mean(axis=0)
            radius = float(np.linalg.norm(inst.points - centroid, axis=1).max())
            align = dataset.full_radius / radius
            feats = dataset.oracle.features(
                _instance_normalized(inst), eval_seed, inst.symmetry, inst.part_mask
            )
            for v in range(cat.get("eval_views_per_instance", 5)):
                rng = np.random.default_rng([seed, 77, e, v])
                pose = sample_object_pose(rng, obs_view, inst.diameter * align,
                                          max_tilt_deg=max_tilt)
                pts_cam = pose.apply(inst.points * align)
                fmap, depth, mask = render_point_splats(pts_cam, feats,
                                                        _identity_extrinsics(obs_view))
                if not mask.any():
                    continue
                stem = f"obs_{e:03d}_{v:02d}"
                formats.write_gsfm(cat_dir / "observations" / f"{stem}.feat.gsfm", fmap.data)
                formats.write_depth_map(cat_dir / "observations" / f"{stem}.depth.gsfm", depth)
                formats.write_mask(cat_dir / "observations" / f"{stem}.mask.gsfm", mask)
                obs_entries.append({
                    "image_id": f"{kind}_{stem}",
                    "camera_file": "camera.json",
                    "feature_file": f"{stem}.feat.gsfm",
                    "depth_file": f"{stem}.depth.gsfm",
                    "mask_file": f"{stem}.mask.gsfm",
                })
                sym = inst.symmetry
                if inst.part_mask is not None and sym.kind == "axis":
                    vis = visibility_mask(pts_cam, _identity_extrinsics(obs_view))
                    if int((vis & inst.part_mask).sum()) >= 10:
                        sym = SymmetryDescriptor.none()
                gt_items.append({
                    "image_id": f"{kind}_{stem}",
                    "category": kind,
                    "pose": pose.to_json(),
                    "extents": (inst.extents * align).tolist(),
                    "symmetry": sym.to_json(),
                })
        formats.write_json(cat_dir / "observations" / "manifest.json", {"entries": obs_entries})
        formats.write_json(cat_dir / "ground_truth.json", {"items": gt_items})
        formats.write_json(out / f"dataset_spec_{kind}.json", {
            "category": kind,
            "reference_seed": cat.get("reference_seed", 0),
            "instance_seeds": list(cat["train_seeds"]),
            "n_views": n_views,
            "seed": seed,
            "oracle": {"D": oracle_cfg.get("dim", 32),
                       "noise_amp": oracle_cfg.get("noise_amp", 0.1)},
        })
        print(f"synth: {kind}: {len(entries)} reference views, {len(obs_entries)} observations")
    return 0


# ---------------------------------------------------------------------------
# lift


def cmd_lift(args) -> int:
    """Reference model + view manifest (cameras + GSFM features) -> GSFC cloud."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    model = formats.read_ply(config["model"], category=config.get("category", "unknown"),
                             symmetry=SymmetryDescriptor.from_json(config.get("symmetry", {"kind": "none"})))
    entries = formats.load_manifest(config["manifest"])
    pairs = []
    for e in entries:
        from .geometry import CameraView

        view = CameraView.from_json(formats.read_json(e["camera_file"]))
        fmap = formats.read_feature_map(e["feature_file"])
        pairs.append((view, fmap))
    cloud = lift_features(model, pairs)
    max_points = config.get("max_points")
    if max_points and len(cloud) > max_points:
        cloud = cloud.select(farthest_point_sample(cloud.points, max_points, seed=config["seed"]))
    formats.write_gsfc(out / config.get("cloud_name", "reference.gsfc"), cloud)
    formats.write_json(out / "lift_summary.json", {
        "points": len(cloud), "dim": cloud.dim, "views": len(pairs),
        "extents": model.extents.tolist(),
    })
    print(f"lift: {len(cloud)} points (D={cloud.dim}) from {len(pairs)} views")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    """Dataset spec + train config -> GSMW weights, checkpoints, loss CSV."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    spec = config["dataset_spec"]
    if isinstance(spec, str):
        spec = formats.read_json(spec)
    oracle_dim = spec.get("oracle", {}).get("D", 32)
    tcfg = _train_config(config)
    mcfg = _matcher_config(config, oracle_dim)
    spec_norm = {
        "category": spec["category"],
        "reference_seed": spec.get("reference_seed", 0),
        "instance_seeds": spec.get("instance_seeds", spec.get("instance_models", [])),
        "n_views": spec.get("n_views", 40),
        "seed": spec.get("seed", config["seed"]),
        "oracle": {"dim": oracle_dim, "noise_amp": spec.get("oracle", {}).get("noise_amp", 0.1)},
    }
    dataset = _dataset_from_spec(spec_norm, tcfg.points_full, config.get("lift_image", 96))
    weights, history = train(dataset, tcfg, mcfg, out_dir=out)
    formats.write_gsfc(out / "reference.gsfc", dataset.full_metric)
    formats.write_json(out / "reference_extents.json",
                       {"extents": dataset.reference.extents.tolist(),
                        "category": dataset.kind})
    print(f"train: {spec_norm['category']}: {len(history)} steps, "
          f"final loss {history[-1][5]:.4f}" if history else "train: no steps")
    return 0


# ---------------------------------------------------------------------------
# infer


def _inference_params(config: dict) -> InferenceParams:
    fields = dict(config.get("params", {}))
    ransac = fields.pop("ransac", {})
    if ransac:
        fields["ransac"] = RansacParams(**ransac)
    fields.setdefault("seed", config["seed"])
    return InferenceParams(**fields)


def cmd_infer(args) -> int:
    """Weights + reference cloud + observation manifest -> pose JSONs."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    weights_dir = Path(config["weights_dir"]) if "weights_dir" in config else None
    if config.get("params", {}).get("no_fusion"):
        weights, mcfg = None, None
    else:
        weights = MatcherWeights(formats.read_gsmw(weights_dir / "weights.gsmw"))
        mcfg = MatcherConfig.from_json(formats.read_json(weights_dir / "matcher_config.json"))
    reference = formats.read_gsfc(config["reference_cloud"])
    extents = np.asarray(config["extents"], dtype=np.float64)
    params = _inference_params(config)
    entries = formats.load_manifest(config["manifest"])

    from .geometry import CameraView

    def run_one(entry):
        view = CameraView.from_json(formats.read_json(entry["camera_file"]))
        depth = formats.read_depth_map(entry["depth_file"])
        mask = formats.read_mask(entry["mask_file"])
        fmap = formats.read_feature_map(entry["feature_file"])
        try:
            result = infer(view, depth, mask, fmap, reference, extents, weights, mcfg, params)
            return entry["image_id"], result, None
        except EngineError as e:
            return entry["image_id"], None, e

    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [run_one(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, entries))

    poses_dir = out / "poses"
    poses_dir.mkdir(exist_ok=True)
    failures = []
    timings = {}
    for image_id, result, err in results:
        if err is not None:
            failures.append({"image_id": image_id, "stage": err.stage, "error": str(err)})
            continue
        payload = result.to_json()
        timings[image_id] = payload["diagnostics"].pop("timings_ms")
        formats.write_json(poses_dir / f"{image_id}.json", payload)
    formats.write_json(out / "timings.json", timings)
    if failures:
        formats.write_json(out / "failures.json", failures)
    print(f"infer: {len(results) - len(failures)}/{len(results)} observations solved")
    return 0 if not failures or config.get("allow_failures", True) else 1


# ---------------------------------------------------------------------------
# eval


def _load_predictions(pred_dir: Path):
    preds = {}
    for path in sorted(Path(pred_dir).glob("*.json")):
        obj = formats.read_json(path)
        pose = Pose9D.from_json(obj["pose"])
        box = OrientedBox3D(pose, np.asarray(obj["box"]["extents"]))
        preds[path.stem] = (pose, box)
    return preds


def cmd_eval(args) -> int:
    """Pose JSONs + ground truth -> metrics report and accuracy curves."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    gt_obj = formats.read_json(config["ground_truth"])
    preds = {}
    for pred_dir in config["predictions"] if isinstance(config["predictions"], list) else [config["predictions"]]:
        preds.update(_load_predictions(Path(pred_dir)))

    predictions, ground_truths, symmetries, categories = [], [], [], []
    missing = []
    for item in gt_obj["items"]:
        image_id = item["image_id"]
        if image_id not in preds:
            missing.append(image_id)
            continue
        gt_pose = Pose9D.from_json(item["pose"])
        gt_box = OrientedBox3D(gt_pose, np.asarray(item["extents"]))
        predictions.append(preds[image_id])
        ground_truths.append((gt_pose, gt_box))
        symmetries.append(SymmetryDescriptor.from_json(item.get("symmetry", {"kind": "none"})))
        categories.append(item.get("category", "unknown"))

    thresholds = config.get("thresholds", {"iou": [0.25, 0.5],
                                           "deg_cm": [(5, 5), (10, 5), (15, 5)]})
    thresholds = {"iou": thresholds.get("iou", []),
                  "deg_cm": [tuple(t) for t in thresholds.get("deg_cm", [])]}
    report = evaluate(predictions, ground_truths, symmetries, thresholds,
                      iou_samples=config.get("iou_samples", 16384),
                      iou_steps=config.get("iou_steps", 360),
                      seed=config["seed"], categories=categories)
    report["missing_predictions"] = sorted(missing)
    formats.write_json(out / "report.json", report)
    curves = accuracy_curves(predictions, ground_truths, symmetries,
                             max_deg=config.get("max_deg", 60.0),
                             max_cm=config.get("max_cm", 10.0),
                             steps=config.get("curve_steps", 61))
    write_curves_csv(curves, out / "rotation_curve.csv", out / "translation_curve.csv")
    for key, value in sorted(report["per_threshold"].items()):
        print(f"eval: {key}: {value:.4f}")
    print(f"eval: n_items: {report['n_items']}, missing: {len(missing)}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    """Train/evaluate the full model and its ablations on one benchmark."""
    config = _load_config(args)
    out = _prepare_out(args, config)
    variants = config.get("variants", ["full", "no_inlier_head", "no_fusion", "no_symmetry"])
    rows = {}
    for variant in variants:
        vdir = out / variant
        if variant != "no_fusion":
            train_dir = vdir / "train"
            ns_train = argparse.Namespace(config=args.config, out=str(train_dir),
                                          set=(args.set or []) + [
                                              f"train.no_inlier_head={'true' if variant == 'no_inlier_head' else 'false'}",
                                              f"train.no_symmetry={'true' if variant == 'no_symmetry' else 'false'}",
                                          ], jobs=args.jobs)
            cmd_train(ns_train)
            weights_dir = str(train_dir)
        else:
            base_train = out / "full" / "train"
            if not (base_train / "reference.gsfc").exists():
                ns_train = argparse.Namespace(config=args.config, out=str(base_train),
                                              set=args.set or [], jobs=args.jobs)
                cmd_train(ns_train)
            weights_dir = str(base_train)

        infer_dir = vdir / "infer"
        ref_meta = formats.read_json(Path(weights_dir) / "reference_extents.json")
        infer_sets = (args.set or []) + [
            f"weights_dir={weights_dir}",
            f"reference_cloud={weights_dir}/reference.gsfc",
            f"extents={json.dumps(ref_meta['extents'])}",
            f"params.no_fusion={'true' if variant == 'no_fusion' else 'false'}",
            f"params.no_inlier_gate={'true' if variant == 'no_inlier_head' else 'false'}",
        ]
        ns_infer = argparse.Namespace(config=args.config, out=str(infer_dir),
                                      set=infer_sets, jobs=args.jobs)
        cmd_infer(ns_infer)

        eval_dir = vdir / "eval"
        ns_eval = argparse.Namespace(config=args.config, out=str(eval_dir),
                                     set=(args.set or []) + [
                                         f"predictions={infer_dir}/poses"], jobs=args.jobs)
        cmd_eval(ns_eval)
        rows[variant] = formats.read_json(eval_dir / "report.json")["per_threshold"]

    keys = sorted(next(iter(rows.values())).keys())
    lines = ["variant," + ",".join(keys)]
    for variant in variants:
        lines.append(variant + "," + ",".join(f"{rows[variant][k]!r}" for k in keys))
    (out / "ablation_table.csv").write_text("\n".join(lines) + "\n")
    print("ablate:")
    for line in lines:
        print("  " + line)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semapose",
        description="Category-level 9D pose estimation from 3D semantic correspondence",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("synth", cmd_synth, "generate toy models, reference views and observations"),
        ("lift", cmd_lift, "fuse 2D feature maps into a 3D reference cloud"),
        ("train", cmd_train, "train the matching network for one category"),
        ("infer", cmd_infer, "recover 9D poses for an observation manifest"),
        ("eval", cmd_eval, "score pose predictions against ground truth"),
        ("ablate", cmd_ablate, "run full/no_fusion/no_inlier_head/no_symmetry variants"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=False, help="JSON config path")
        p.add_argument("--out", required=False, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker parallelism")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path, JSON value)")
        p.set_defaults(fn=fn)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 1
    except EngineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
