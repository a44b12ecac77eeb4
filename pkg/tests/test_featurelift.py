import numpy as np
import pytest

from semapose.errors import (
    BehindCamera,
    DegenerateInput,
    DimensionMismatch,
    EmptyObservation,
    OutOfBounds,
    ZeroExtent,
)
from semapose.featurelift import (
    CameraView,
    FeatureCloud,
    FeatureMap,
    ReferenceModel,
    backproject_observation,
    cloud_diameter,
    farthest_point_sample,
    lift_features,
    normalize_cloud,
    project_point,
    render_point_splats,
    sample_camera_poses,
    sample_feature_bilinear,
    visibility_bruteforce,
    visibility_mask,
)


def sphere_model(n=500, radius=0.1, seed=0):
    # Fibonacci sphere: convex, evenly covered
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = np.pi * (3 - np.sqrt(5)) * np.arange(n)
    pts = radius * np.stack(
        [np.sin(polar) * np.cos(azim), np.cos(polar), np.sin(polar) * np.sin(azim)], axis=1
    )
    return ReferenceModel(points=pts, category="sphere")


def default_view(width=64, height=64, fx=100.0):
    return CameraView(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                      width=width, height=height)


class TestSampleCameraPoses:
    def test_forty_views_look_at_centroid(self):
        model = sphere_model()
        views = sample_camera_poses(model, 40, seed=1)
        assert len(views) == 40
        for view in views:
            u, v, z = project_point(view, model.centroid)
            assert abs(u - view.cx) < 1.0
            assert abs(v - view.cy) < 1.0
            assert z > 0

    def test_single_view_distance(self):
        model = sphere_model()
        views = sample_camera_poses(model, 1, distance_factor=2.5)
        d = np.linalg.norm(views[0].camera_center() - model.centroid)
        assert abs(d - 2.5 * model.diameter) < 1e-9

    def test_sphere_fully_covered(self):
        model = sphere_model(400)
        views = sample_camera_poses(model, 40, seed=2)
        seen = np.zeros(len(model.points), dtype=bool)
        for view in views:
            seen |= visibility_mask(model.points, view)
        assert seen.all()

    def test_seed_only_changes_roll(self):
        model = sphere_model()
        a = sample_camera_poses(model, 8, seed=1)
        b = sample_camera_poses(model, 8, seed=2)
        for va, vb in zip(a, b):
            assert np.allclose(va.camera_center(), vb.camera_center())
        assert any(
            not np.array_equal(va.world_to_camera, vb.world_to_camera) for va, vb in zip(a, b)
        )


class TestProjectPoint:
    def test_principal_point(self):
        view = default_view()
        u, v, z = project_point(view, [0.0, 0.0, 3.0])
        assert (u, v, z) == (view.cx, view.cy, 3.0)

    def test_pinhole_formula(self):
        view = CameraView(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)
        u, v, z = project_point(view, [1.0, 0.0, 1.0])
        assert abs(u - 150.0) < 1e-12
        assert abs(v - 50.0) < 1e-12

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_point(default_view(), [0.0, 0.0, -1.0])


class TestVisibility:
    def test_single_point_visible(self):
        vis = visibility_mask(np.array([[0.0, 0, 1.0]]), default_view())
        assert vis.tolist() == [True]

    def test_near_occludes_far(self):
        pts = np.array([[0.0, 0, 1.0], [0.0, 0, 2.0], [0.05, 0.0, 1.5]])
        view = default_view()
        vis = visibility_mask(pts, view)
        oracle = visibility_bruteforce(pts, view)
        assert vis[0] and not vis[1]
        assert np.array_equal(vis, oracle)

    def test_out_of_image_hidden(self):
        vis = visibility_mask(np.array([[10.0, 0, 1.0], [0.0, 0, 1.0]]), default_view())
        assert vis.tolist() == [False, True]

    def test_agrees_with_bruteforce_on_random_clouds(self):
        rng = np.random.default_rng(3)
        view = default_view(width=96, height=96, fx=150.0)
        for _ in range(10):
            n = int(rng.integers(50, 800))
            pts = rng.normal(scale=0.08, size=(n, 3)) + [0, 0, 1.0]
            fast = visibility_mask(pts, view)
            slow = visibility_bruteforce(pts, view)
            assert (fast == slow).mean() >= 0.995


class TestBilinear:
    def make_map(self):
        data = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
        return FeatureMap(data)

    def test_integer_coordinates_exact(self):
        fmap = self.make_map()
        assert np.array_equal(sample_feature_bilinear(fmap, 1, 1), fmap.data[1, 1])

    def test_row_midpoint_average(self):
        fmap = self.make_map()
        got = sample_feature_bilinear(fmap, 0.5, 0.0)
        assert np.allclose(got, (fmap.data[0, 0] + fmap.data[0, 1]) / 2.0)

    def test_fractional_weights(self):
        fmap = self.make_map()
        u, v = 0.25, 0.75
        d = fmap.data.astype(np.float64)
        expected = (
            0.75 * 0.25 * d[0, 0]
            + 0.25 * 0.25 * d[0, 1]
            + 0.75 * 0.75 * d[1, 0]
            + 0.25 * 0.75 * d[1, 1]
        )
        assert np.allclose(sample_feature_bilinear(fmap, u, v), expected)

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            sample_feature_bilinear(self.make_map(), -0.5, 0.0)
        with pytest.raises(OutOfBounds):
            sample_feature_bilinear(self.make_map(), 0.0, 2.0)


class TestLiftFeatures:
    def test_two_view_average(self):
        model = sphere_model(200)
        views = sample_camera_poses(model, 2, seed=0)
        maps = [
            FeatureMap(np.full((224, 224, 2), [1.0, 0.0], dtype=np.float32)),
            FeatureMap(np.full((224, 224, 2), [0.0, 1.0], dtype=np.float32)),
        ]
        cloud = lift_features(model, list(zip(views, maps)))
        both = cloud.view_counts == 2
        assert both.any()
        assert np.allclose(cloud.features[both], [0.5, 0.5])
        single = cloud.view_counts == 1
        assert np.all(np.isin(cloud.features[single], [0.0, 1.0]))

    def test_invisible_points_dropped(self):
        # second point far behind the camera plane of every view
        pts = np.concatenate([sphere_model(100).points, [[0, 0, 100.0]]])
        model = ReferenceModel(points=pts)
        views = sample_camera_poses(sphere_model(100), 4, seed=0)
        maps = [FeatureMap(np.ones((224, 224, 1), dtype=np.float32)) for _ in views]
        cloud = lift_features(model, list(zip(views, maps)))
        assert len(cloud) < len(pts)

    def test_view_permutation_bitwise_identical(self):
        model = sphere_model(150)
        views = sample_camera_poses(model, 6, seed=4)
        rng = np.random.default_rng(5)
        maps = [FeatureMap(rng.random((224, 224, 3)).astype(np.float32)) for _ in views]
        pairs = list(zip(views, maps))
        a = lift_features(model, pairs)
        b = lift_features(model, pairs[::-1])
        assert a.points.tobytes() == b.points.tobytes()
        assert a.features.tobytes() == b.features.tobytes()
        assert a.view_counts.tobytes() == b.view_counts.tobytes()

    def test_dimension_mismatch(self):
        model = sphere_model(50)
        views = sample_camera_poses(model, 2, seed=0)
        maps = [
            FeatureMap(np.ones((224, 224, 2), dtype=np.float32)),
            FeatureMap(np.ones((224, 224, 3), dtype=np.float32)),
        ]
        with pytest.raises(DimensionMismatch):
            lift_features(model, list(zip(views, maps)))


class TestBackprojection:
    def test_principal_pixel(self):
        view = CameraView(fx=100.0, fy=100.0, cx=8.0, cy=8.0, width=17, height=17)
        depth = np.zeros((17, 17))
        mask = np.zeros((17, 17), dtype=bool)
        depth[8, 8] = 2.0
        mask[8, 8] = True
        depth[0, 0] = depth[1, 1] = 1.0
        mask[0, 0] = mask[1, 1] = True
        fmap = FeatureMap(np.ones((17, 17, 1), dtype=np.float32))
        cloud = backproject_observation(view, depth, mask, fmap, max_points=10)
        assert any(np.allclose(p, [0, 0, 2.0]) for p in cloud.points)

    def test_inverse_pinhole(self):
        view = CameraView(fx=4.0, fy=4.0, cx=4.0, cy=4.0, width=9, height=9)
        depth = np.zeros((9, 9))
        mask = np.zeros((9, 9), dtype=bool)
        for r, c in [(4, 8), (4, 4), (0, 0)]:
            depth[r, c] = 1.0
            mask[r, c] = True
        fmap = FeatureMap(np.zeros((9, 9, 1), dtype=np.float32))
        cloud = backproject_observation(view, depth, mask, fmap, max_points=10)
        assert any(np.allclose(p, [1.0, 0.0, 1.0]) for p in cloud.points)  # (cx+fx, cy)

    def test_empty_mask(self):
        view = default_view(16, 16)
        with pytest.raises(EmptyObservation):
            backproject_observation(
                view,
                np.ones((16, 16)),
                np.zeros((16, 16), dtype=bool),
                FeatureMap(np.zeros((16, 16, 1), dtype=np.float32)),
            )

    def test_project_backproject_round_trip(self):
        # render a cloud, backproject, and reproject: pixels land where they started
        rng = np.random.default_rng(6)
        pts = rng.normal(scale=0.05, size=(300, 3)) + [0, 0, 0.8]
        feats = rng.random((300, 4)).astype(np.float32)
        view = default_view(64, 64, fx=120.0)
        fmap, depth, mask = render_point_splats(pts, feats, view, splat_radius_px=1.0)
        cloud = backproject_observation(view, depth, mask, fmap, max_points=4000)
        for p in cloud.points[:50]:
            u, v, z = project_point(view, p)
            assert abs(u - round(u)) < 1e-6 and abs(v - round(v)) < 1e-6
            assert abs(z - depth[int(round(v)), int(round(u))]) < 1e-6

    def test_max_points_subsampling_deterministic(self):
        view = default_view(32, 32)
        depth = np.ones((32, 32))
        mask = np.ones((32, 32), dtype=bool)
        fmap = FeatureMap(np.zeros((32, 32, 2), dtype=np.float32))
        a = backproject_observation(view, depth, mask, fmap, max_points=50, seed=3)
        b = backproject_observation(view, depth, mask, fmap, max_points=50, seed=3)
        assert len(a) == 50
        assert a.points.tobytes() == b.points.tobytes()


class TestNormalize:
    def test_already_normalized(self):
        pts = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]])
        cloud = FeatureCloud(pts, np.zeros((4, 1), dtype=np.float32), np.ones(4, dtype=np.int32))
        out, centroid, radius = normalize_cloud(cloud)
        assert np.allclose(out.points, pts)
        assert np.allclose(centroid, 0) and radius == 1.0

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(30, 3))
        cloud = FeatureCloud(pts, np.zeros((30, 2), dtype=np.float32), np.ones(30, dtype=np.int32))
        big = FeatureCloud(5 * pts, cloud.features, cloud.view_counts)
        a, ca, ra = normalize_cloud(cloud)
        b, cb, rb = normalize_cloud(big)
        assert np.allclose(a.points, b.points)
        assert np.allclose(cb, 5 * ca) and abs(rb - 5 * ra) < 1e-12

    def test_two_point_cloud(self):
        pts = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        cloud = FeatureCloud(pts, np.zeros((2, 1), dtype=np.float32), np.ones(2, dtype=np.int32))
        out, centroid, radius = normalize_cloud(cloud)
        assert np.allclose(centroid, [1, 0, 0]) and radius == 1.0
        assert np.allclose(out.points, [[-1, 0, 0], [1, 0, 0]])

    def test_zero_extent(self):
        pts = np.zeros((3, 3))
        cloud = FeatureCloud(pts, np.zeros((3, 1), dtype=np.float32), np.ones(3, dtype=np.int32))
        with pytest.raises(ZeroExtent):
            normalize_cloud(cloud)


def test_farthest_point_sample_spreads():
    pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    idx = farthest_point_sample(pts, 4, seed=0)
    assert len(np.unique(idx)) == 4
    # the two near-duplicates are never both selected
    assert not ({0, 1} <= set(idx.tolist()))


def test_cloud_diameter_is_bbox_diagonal():
    pts = np.array([[0.0, 0, 0], [1.0, 2.0, 2.0]])
    assert cloud_diameter(pts) == 3.0
