"""NOCS-style pose metrics: 3D IoU mean precision and n-degree m-cm accuracy.

Both metrics are symmetry-aware: the IoU is maximized and the rotation error
minimized over discretized rotations about the symmetry axis for symmetric
items. Predictions and ground truths must be aligned 1:1 (association is the
caller's problem).
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch
from .geometry import OrientedBox3D, Pose9D, rotation_error_deg, symmetry_aware_box_iou


def _check_aligned(predictions, ground_truths, symmetries):
    if len(predictions) != len(ground_truths):
        raise LengthMismatch(
            f"{len(predictions)} predictions vs {len(ground_truths)} ground truths"
        )
    if symmetries is not None and len(symmetries) != len(predictions):
        raise LengthMismatch("symmetry list must align with predictions")


def _iou_key(threshold: float) -> str:
    return f"3d_{round(threshold * 100):d}"


def _deg_cm_key(deg: float, cm: float) -> str:
    return f"{deg:g}deg{cm:g}cm"


def pair_errors(pred_pose: Pose9D, gt_pose: Pose9D, symmetry=None, steps: int = 360):
    """(rotation error deg, translation error m) for one aligned pair."""
    rot = rotation_error_deg(pred_pose.rotation, gt_pose.rotation, symmetry, steps=steps)
    trans = float(np.linalg.norm(pred_pose.translation - gt_pose.translation))
    return rot, trans


def evaluate(predictions, ground_truths, symmetries=None, thresholds=None,
             iou_samples: int = 16384, iou_steps: int = 360, seed: int = 0,
             categories=None) -> dict:
    """Fractions of items passing each IoU and (deg, cm) threshold.

    predictions/ground_truths: aligned lists of (Pose9D, OrientedBox3D).
    thresholds: {"iou": [0.25, 0.5], "deg_cm": [(5, 5), (10, 5), (15, 5)]}
    (those are the defaults). With `categories` given, per-category
    breakdowns are reported alongside the pooled numbers.
    """
    _check_aligned(predictions, ground_truths, symmetries)
    if thresholds is None:
        thresholds = {"iou": [0.25, 0.5], "deg_cm": [(5, 5), (10, 5), (15, 5)]}
    n = len(predictions)
    if symmetries is None:
        symmetries = [None] * n

    ious = np.empty(n)
    rot_err = np.empty(n)
    trans_err = np.empty(n)
    # one shared seed keeps evaluate() exactly permutation-invariant over items
    for k, ((pp, pb), (gp, gb), sym) in enumerate(zip(predictions, ground_truths, symmetries)):
        ious[k] = symmetry_aware_box_iou(pb, gb, sym, steps=iou_steps,
                                         samples=iou_samples, seed=seed)
        rot_err[k], trans_err[k] = pair_errors(pp, gp, sym, steps=iou_steps)

    def fractions(sel) -> dict:
        out = {}
        for thr in thresholds.get("iou", []):
            out[_iou_key(thr)] = float((ious[sel] >= thr).mean())
        for deg, cm in thresholds.get("deg_cm", []):
            ok = (rot_err[sel] <= deg) & (trans_err[sel] <= cm / 100.0)
            out[_deg_cm_key(deg, cm)] = float(ok.mean())
        return out

    report = {
        "per_threshold": fractions(np.ones(n, dtype=bool)),
        "n_items": n,
    }
    if categories is not None:
        if len(categories) != n:
            raise LengthMismatch("category list must align with predictions")
        per_cat = {}
        for cat in sorted(set(categories)):
            sel = np.array([c == cat for c in categories])
            per_cat[cat] = fractions(sel)
        report["per_category"] = per_cat
    return report


def accuracy_curves(predictions, ground_truths, symmetries=None,
                    max_deg: float = 60.0, max_cm: float = 10.0, steps: int = 61,
                    sym_steps: int = 360) -> dict:
    """Cumulative accuracy-vs-threshold curves for rotation and translation.

    Returns {"rotation": [(deg, acc), ...], "translation": [(cm, acc), ...]};
    both curves are monotone nondecreasing by construction.
    """
    if steps < 2:
        raise LengthMismatch("steps must be >= 2")
    _check_aligned(predictions, ground_truths, symmetries)
    n = len(predictions)
    if symmetries is None:
        symmetries = [None] * n
    rot = np.empty(n)
    trans = np.empty(n)
    for k, ((pp, _), (gp, _), sym) in enumerate(zip(predictions, ground_truths, symmetries)):
        rot[k], trans[k] = pair_errors(pp, gp, sym, steps=sym_steps)

    rotation = [(float(t), float((rot <= t).mean())) for t in np.linspace(0, max_deg, steps)]
    translation = [(float(t), float((trans <= t / 100.0).mean()))
                   for t in np.linspace(0, max_cm, steps)]
    return {"rotation": rotation, "translation": translation}


def write_curves_csv(curves: dict, rotation_path, translation_path) -> None:
    for key, path in (("rotation", rotation_path), ("translation", translation_path)):
        with open(path, "w") as f:
            f.write("threshold,accuracy\n")
            for thr, acc in curves[key]:
                f.write(f"{thr!r},{acc!r}\n")
