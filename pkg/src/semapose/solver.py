"""Inference: run the matcher, extract confident matches, recover the pose.

The recovered Pose9D maps reference canonical points into the camera frame;
its scale is metric because the full cloud is denormalized before the
similarity fit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from scipy.spatial import cKDTree

from .errors import DegenerateInput, EngineError, NoMatches
from .featurelift import (
    CameraView,
    FeatureCloud,
    FeatureMap,
    backproject_observation,
    cloud_diameter,
    farthest_point_sample,
    normalize_cloud,
)
from .geometry import Match, OrientedBox3D, Pose9D, RansacParams, ransac_similarity, umeyama
from .matcher import AssignmentOutput, MatcherConfig, MatcherWeights, forward, gate_assignment


@dataclass(frozen=True)
class InferenceParams:
    match_threshold: float = 0.5
    mutual_nearest: bool = False
    ransac: RansacParams = field(default_factory=lambda: RansacParams(inlier_threshold=0.0))
    max_partial_points: int = 128
    max_full_points: int = 192
    seed: int = 0
    refine_iterations: int = 5  # trimmed-ICP polish after RANSAC; 0 disables
    refine_trim: float = 0.25
    no_fusion: bool = False  # ablation: cosine-match raw features, skip the network
    no_inlier_gate: bool = False  # ablation: threshold A instead of A_hat

    def __post_init__(self):
        if not (0.0 < self.match_threshold < 1.0):
            raise DegenerateInput("match_threshold must be in (0, 1)")


def extract_matches(output: AssignmentOutput, params: InferenceParams) -> list[Match]:
    """All entries of A_hat above the threshold, optionally mutual-nearest.

    Mutual filtering keeps (i, j) only when j is the argmax of row i and i
    the argmax of column j (first index wins ties). Result is sorted by
    (i, j). Raises NoMatches when nothing survives.
    """
    a = output.A_hat
    above = a >= params.match_threshold
    if params.mutual_nearest:
        rows = np.argmax(a, axis=1)
        cols = np.argmax(a, axis=0)
        mutual = np.zeros_like(above)
        i_idx = np.arange(a.shape[0])
        mutual[i_idx, rows] = cols[rows] == i_idx
        above &= mutual
    ii, jj = np.nonzero(above)
    if len(ii) == 0:
        raise NoMatches(f"no assignment entry reaches threshold {params.match_threshold}")
    order = np.lexsort((jj, ii))
    return [Match(int(i), int(j), float(a[i, j])) for i, j in zip(ii[order], jj[order])]


def estimate_pose(matches: list[Match], partial: FeatureCloud, full: FeatureCloud,
                  params: InferenceParams):
    """Similarity transform from matched full (canonical, metric) points to
    matched partial (camera) points via RANSAC + Umeyama.

    The default inlier threshold is 5% of the full cloud's diameter. Returns
    (Pose9D, inlier mask over the match list).
    """
    if len(matches) < 3:
        raise DegenerateInput(f"need >= 3 matches, got {len(matches)}")
    ordered = sorted(matches, key=lambda m: (m.partial_index, m.full_index))
    src = full.points[[m.full_index for m in ordered]]
    dst = partial.points[[m.partial_index for m in ordered]]
    rp = params.ransac
    if rp.inlier_threshold <= 0.0:
        # correct matches carry the full cloud's sample-spacing discretization
        # (~6% of diameter at N=256) plus intra-category shape deviation, so
        # the auto threshold sits at 10% of the reference diameter
        rp = replace(rp, inlier_threshold=0.10 * cloud_diameter(full.points))
    return ransac_similarity(src, dst, rp)


def refine_pose(pose: Pose9D, full: FeatureCloud, partial: FeatureCloud,
                iterations: int = 5, trim: float = 0.25) -> Pose9D:
    """Trimmed-ICP polish: re-pair observed points with their nearest posed
    full points and refit, dropping the worst `trim` fraction each round.

    Removes the residual bias of threshold-band matches; the matcher plus
    RANSAC only need to land in the right basin.
    """
    tree = cKDTree(full.points)
    obs = partial.points
    for _ in range(iterations):
        canon = pose.inverse().apply(obs)
        d, idx = tree.query(canon)
        keep = d <= np.quantile(d, 1.0 - trim)
        if keep.sum() < 5:
            break
        try:
            pose = umeyama(full.points[idx[keep]], obs[keep])
        except DegenerateInput:
            break
    return pose


def _raw_cosine_output(partial: FeatureCloud, full: FeatureCloud) -> AssignmentOutput:
    """Ablation path: rescaled cosine similarity of the input features."""
    fp = partial.features.astype(np.float64)
    fq = full.features.astype(np.float64)
    fp = fp / np.maximum(np.linalg.norm(fp, axis=1, keepdims=True), 1e-12)
    fq = fq / np.maximum(np.linalg.norm(fq, axis=1, keepdims=True), 1e-12)
    A = (fp @ fq.T + 1.0) * 0.5
    ones_p = np.ones(len(fp))
    ones_q = np.ones(len(fq))
    return AssignmentOutput(A=A, A_hat=gate_assignment(A, ones_p, ones_q),
                            sigma_p=ones_p, sigma_q=ones_q, fused_p=fp, fused_q=fq)


@dataclass(frozen=True)
class InferenceResult:
    pose: Pose9D
    box: OrientedBox3D
    diagnostics: dict

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "box": {"extents": self.box.extents.tolist()},
            "diagnostics": self.diagnostics,
        }


def infer(view: CameraView, depth_map, mask, feature_map: FeatureMap,
          reference: FeatureCloud, extents, weights: Optional[MatcherWeights],
          matcher_config: Optional[MatcherConfig], params: InferenceParams) -> InferenceResult:
    """Full pipeline: backproject -> normalize -> match -> extract -> pose.

    Errors raised by any stage carry a `stage` attribute naming it.
    Diagnostics include match/inlier counts, the mean gated score over
    inliers, and per-stage timings in milliseconds (timings are wall-clock
    and excluded from determinism guarantees).
    """
    timings: dict[str, float] = {}

    def run(stage, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except EngineError as e:
            e.stage = stage
            raise
        timings[stage] = (time.perf_counter() - t0) * 1000.0
        return out

    partial_metric = run("backproject", lambda: backproject_observation(
        view, depth_map, mask, feature_map, params.max_partial_points, seed=params.seed))

    def normalize_stage():
        full = reference
        if len(full) > params.max_full_points:
            full = full.select(farthest_point_sample(full.points, params.max_full_points,
                                                     seed=params.seed))
        partial_norm, _, _ = normalize_cloud(partial_metric)
        full_norm, _, _ = normalize_cloud(full)
        return partial_norm, full_norm, full

    partial_norm, full_norm, full_metric = run("normalize", normalize_stage)

    def match_stage():
        if params.no_fusion or weights is None:
            return _raw_cosine_output(partial_norm, full_norm)
        return forward(partial_norm, full_norm, weights, matcher_config,
                       with_inlier=not params.no_inlier_gate)

    output = run("forward", match_stage)
    matches = run("extract", lambda: extract_matches(output, params))
    pose, inlier_mask = run("estimate", lambda: estimate_pose(
        matches, partial_metric, full_metric, params))
    if params.refine_iterations > 0:
        pose = run("refine", lambda: refine_pose(
            pose, full_metric, partial_metric, params.refine_iterations, params.refine_trim))

    scores = np.array([m.score for m in sorted(matches, key=lambda m: (m.partial_index, m.full_index))])
    diagnostics = {
        "n_matches": len(matches),
        "n_inliers": int(inlier_mask.sum()),
        "mean_score": float(scores[inlier_mask].mean()),
        "timings_ms": {k: round(v, 3) for k, v in timings.items()},
    }
    box = OrientedBox3D(pose, np.asarray(extents, dtype=np.float64))
    return InferenceResult(pose=pose, box=box, diagnostics=diagnostics)
