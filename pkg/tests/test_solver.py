import numpy as np
import pytest

from semapose.errors import DegenerateInput, EmptyObservation, NoMatches
from semapose.featurelift import FeatureCloud, FeatureMap, render_point_splats
from semapose.geometry import Match, Pose9D, RansacParams, random_rotation, rot_axis
from semapose.matcher import AssignmentOutput, gate_assignment
from semapose.solver import (
    InferenceParams,
    estimate_pose,
    extract_matches,
    infer,
    refine_pose,
)
from semapose.trainer import observation_camera


def output_from_matrix(a_hat):
    a_hat = np.asarray(a_hat, dtype=np.float64)
    ones_p = np.ones(a_hat.shape[0])
    ones_q = np.ones(a_hat.shape[1])
    return AssignmentOutput(A=a_hat, A_hat=gate_assignment(a_hat, ones_p, ones_q),
                            sigma_p=ones_p, sigma_q=ones_q,
                            fused_p=np.zeros((a_hat.shape[0], 2)),
                            fused_q=np.zeros((a_hat.shape[1], 2)))


def make_cloud(points):
    pts = np.asarray(points, dtype=np.float64)
    return FeatureCloud(pts, np.zeros((len(pts), 2), dtype=np.float32),
                        np.ones(len(pts), dtype=np.int32))


class TestExtractMatches:
    def test_single_entry(self):
        a = np.zeros((3, 4))
        a[1, 2] = 0.9
        m = extract_matches(output_from_matrix(a), InferenceParams(match_threshold=0.5))
        assert m == [Match(1, 2, 0.9)]

    def test_mutual_nearest_filters_row_runner_up(self):
        a = np.zeros((2, 3))
        a[0, 0], a[0, 1] = 0.8, 0.7  # row 0: two above threshold
        a[1, 2] = 0.9
        m = extract_matches(
            output_from_matrix(a),
            InferenceParams(match_threshold=0.5, mutual_nearest=True),
        )
        assert Match(0, 0, 0.8) in m and Match(1, 2, 0.9) in m
        assert all(not (mm.partial_index == 0 and mm.full_index == 1) for mm in m)

    def test_mutual_nearest_is_partial_injection(self):
        rng = np.random.default_rng(0)
        a = rng.random((20, 25))
        m = extract_matches(
            output_from_matrix(a), InferenceParams(match_threshold=0.1, mutual_nearest=True)
        )
        assert len({mm.partial_index for mm in m}) == len(m)
        assert len({mm.full_index for mm in m}) == len(m)

    def test_no_matches(self):
        with pytest.raises(NoMatches):
            extract_matches(output_from_matrix(np.full((3, 3), 0.1)),
                            InferenceParams(match_threshold=0.5))

    def test_scores_at_least_threshold(self):
        rng = np.random.default_rng(1)
        a = rng.random((10, 10))
        m = extract_matches(output_from_matrix(a), InferenceParams(match_threshold=0.6))
        assert all(mm.score >= 0.6 for mm in m)

    def test_sorted_by_pair(self):
        a = np.full((4, 4), 0.9)
        m = extract_matches(output_from_matrix(a), InferenceParams(match_threshold=0.5))
        assert m == sorted(m, key=lambda mm: (mm.partial_index, mm.full_index))


class TestEstimatePose:
    def planted(self, seed=0, n=60):
        rng = np.random.default_rng(seed)
        full = make_cloud(rng.normal(size=(n, 3)) * 0.2)
        pose = Pose9D(random_rotation(rng), rng.uniform(-0.5, 0.5, 3) + [0, 0, 2.0],
                      float(rng.uniform(0.8, 1.2)))
        partial = make_cloud(pose.apply(full.points))
        matches = [Match(i, i, 1.0) for i in range(n)]
        return pose, partial, full, matches

    def test_perfect_matches(self):
        pose, partial, full, matches = self.planted()
        est, mask = estimate_pose(matches, partial, full, InferenceParams())
        assert np.abs(est.rotation - pose.rotation).max() < 1e-6
        assert np.abs(est.translation - pose.translation).max() < 1e-6
        assert abs(est.scale - pose.scale) / pose.scale < 1e-9
        assert mask.all()

    def test_thirty_percent_wrong_matches(self):
        pose, partial, full, matches = self.planted(seed=3, n=100)
        rng = np.random.default_rng(4)
        bad = rng.choice(100, size=30, replace=False)
        matches = [Match(i, int(rng.integers(100)) if i in bad else i, 1.0) for i in range(100)]
        params = InferenceParams(ransac=RansacParams(inlier_threshold=1e-3), refine_iterations=0)
        est, _ = estimate_pose(matches, partial, full, params)
        from semapose.geometry import geodesic_rotation_deg
        assert geodesic_rotation_deg(est.rotation, pose.rotation) < 1.0
        assert abs(est.scale - pose.scale) / pose.scale < 0.01

    def test_too_few_matches(self):
        pose, partial, full, _ = self.planted()
        with pytest.raises(DegenerateInput):
            estimate_pose([Match(0, 0, 1.0), Match(1, 1, 1.0)], partial, full, InferenceParams())

    def test_match_order_invariance(self):
        pose, partial, full, matches = self.planted(seed=5)
        est1, m1 = estimate_pose(matches, partial, full, InferenceParams())
        est2, m2 = estimate_pose(matches[::-1], partial, full, InferenceParams())
        assert est1.rotation.tobytes() == est2.rotation.tobytes()
        assert np.array_equal(m1, m2)


class TestRefinePose:
    def test_exact_alignment_is_fixed_point(self):
        rng = np.random.default_rng(6)
        full = make_cloud(rng.normal(size=(80, 3)) * 0.2)
        pose = Pose9D(random_rotation(rng), np.array([0.1, -0.2, 1.5]), 1.1)
        partial = make_cloud(pose.apply(full.points[:40]))
        refined = refine_pose(pose, full, partial)
        assert np.abs(refined.rotation - pose.rotation).max() < 1e-9
        assert np.abs(refined.translation - pose.translation).max() < 1e-9

    def test_polishes_perturbed_pose(self):
        rng = np.random.default_rng(7)
        full = make_cloud(rng.normal(size=(200, 3)) * 0.2)
        pose = Pose9D(random_rotation(rng), np.array([0.0, 0.0, 1.5]), 1.0)
        partial = make_cloud(pose.apply(full.points[:120]))
        rough = Pose9D(pose.rotation @ rot_axis([1, 0, 0], 0.05),
                       pose.translation + [0.01, 0, 0.01], pose.scale * 1.04)
        refined = refine_pose(rough, full, partial, iterations=8)
        from semapose.geometry import geodesic_rotation_deg
        assert geodesic_rotation_deg(refined.rotation, pose.rotation) < \
            geodesic_rotation_deg(rough.rotation, pose.rotation)
        assert abs(refined.scale - pose.scale) < abs(rough.scale - pose.scale)


class TestInfer:
    def synthetic_observation(self, seed=0):
        # identical reference and instance: raw-feature matching suffices
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(500, 3)) * np.array([0.05, 0.08, 0.05])
        feats = np.sin(pts @ rng.normal(scale=40.0, size=(3, 16)))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        full = FeatureCloud(pts, feats.astype(np.float32), np.ones(len(pts), dtype=np.int32))
        pose = Pose9D(rot_axis([1, 1, 0], 0.4), np.array([0.02, -0.01, 0.45]), 1.0)
        view = observation_camera()
        fmap, depth, mask = render_point_splats(pose.apply(pts), feats.astype(np.float32), view)
        extents = pts.max(axis=0) - pts.min(axis=0)
        return view, depth, mask, fmap, full, extents, pose

    def test_no_fusion_path_recovers_identical_instance(self):
        view, depth, mask, fmap, full, extents, pose = self.synthetic_observation()
        res = infer(view, depth, mask, fmap, full, extents, None, None,
                    InferenceParams(no_fusion=True, match_threshold=0.9))
        from semapose.geometry import geodesic_rotation_deg
        assert geodesic_rotation_deg(res.pose.rotation, pose.rotation) < 5.0
        assert np.linalg.norm(res.pose.translation - pose.translation) < 0.05
        assert set(res.diagnostics["timings_ms"]) == {
            "backproject", "normalize", "forward", "extract", "estimate", "refine"}

    def test_empty_mask_tagged_backproject(self):
        view, depth, mask, fmap, full, extents, _ = self.synthetic_observation()
        with pytest.raises(EmptyObservation) as err:
            infer(view, depth, np.zeros_like(mask), fmap, full, extents, None, None,
                  InferenceParams(no_fusion=True))
        assert err.value.stage == "backproject"

    def test_deterministic(self):
        view, depth, mask, fmap, full, extents, _ = self.synthetic_observation(seed=2)
        params = InferenceParams(no_fusion=True, match_threshold=0.9)
        r1 = infer(view, depth, mask, fmap, full, extents, None, None, params)
        r2 = infer(view, depth, mask, fmap, full, extents, None, None, params)
        assert r1.pose.rotation.tobytes() == r2.pose.rotation.tobytes()
        assert r1.pose.translation.tobytes() == r2.pose.translation.tobytes()
        assert r1.pose.scale == r2.pose.scale
        assert r1.diagnostics["n_matches"] == r2.diagnostics["n_matches"]
