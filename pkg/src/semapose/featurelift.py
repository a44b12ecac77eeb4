"""Lifting dense 2D feature maps onto 3D reference models.

The forward direction samples cameras around a model, computes per-view
point visibility with a splat z-buffer, projects visible points into the
feature images and averages their features. The inverse direction turns a
single observation (depth + mask + feature map) into a partial feature
cloud in the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from .errors import (
    BehindCamera,
    DegenerateInput,
    DimensionMismatch,
    EmptyObservation,
    OutOfBounds,
    ZeroExtent,
)
from .geometry import CameraView, _freeze


@dataclass(frozen=True)
class SymmetryDescriptor:
    """Rotational symmetry of an object about a fixed object-frame axis.

    `axis` is the symmetry axis, `reference_axis` an orthogonal direction
    used to pin a canonical roll when disambiguating poses.
    """

    kind: str = "none"  # "none" | "axis"
    axis: Optional[np.ndarray] = None
    reference_axis: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("none", "axis"):
            raise DegenerateInput(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "axis":
            a = np.asarray(self.axis, dtype=np.float64).reshape(3)
            r = np.asarray(self.reference_axis, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(a) - 1.0) > 1e-6 or abs(np.linalg.norm(r) - 1.0) > 1e-6:
                raise DegenerateInput("symmetry axes must be unit vectors")
            if abs(float(a @ r)) > 1e-6:
                raise DegenerateInput("reference axis must be orthogonal to the symmetry axis")
            object.__setattr__(self, "axis", _freeze(a))
            object.__setattr__(self, "reference_axis", _freeze(r))

    @staticmethod
    def none() -> "SymmetryDescriptor":
        return SymmetryDescriptor("none")

    @staticmethod
    def about_y() -> "SymmetryDescriptor":
        return SymmetryDescriptor("axis", np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def to_json(self) -> dict:
        if self.kind == "none":
            return {"kind": "none"}
        return {
            "kind": "axis",
            "axis": self.axis.tolist(),
            "reference_axis": self.reference_axis.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "SymmetryDescriptor":
        if obj.get("kind", "none") == "none":
            return SymmetryDescriptor.none()
        return SymmetryDescriptor(
            "axis",
            np.asarray(obj["axis"], dtype=np.float64),
            np.asarray(obj["reference_axis"], dtype=np.float64),
        )


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x D feature image, row-major (v, u, channel)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] < 1:
            raise DimensionMismatch(f"feature map must be HxWxD, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise DimensionMismatch("feature map contains non-finite values")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ReferenceModel:
    """Canonical-frame point model of a category reference object (y-up)."""

    points: np.ndarray
    category: str = "unknown"
    triangles: Optional[np.ndarray] = None
    part_mask: Optional[np.ndarray] = None
    symmetry: SymmetryDescriptor = SymmetryDescriptor.none()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise DegenerateInput(f"model needs >= 4 points, got shape {pts.shape}")
        object.__setattr__(self, "points", _freeze(pts))
        if self.triangles is not None:
            object.__setattr__(self, "triangles", _freeze(np.asarray(self.triangles, dtype=np.int64)))
        if self.part_mask is not None:
            pm = np.asarray(self.part_mask, dtype=bool)
            if pm.shape != (pts.shape[0],):
                raise DimensionMismatch("part mask length must match point count")
            object.__setattr__(self, "part_mask", _freeze(pm))

    @property
    def extents(self) -> np.ndarray:
        """Tight axis-aligned bounding-box side lengths."""
        return self.points.max(axis=0) - self.points.min(axis=0)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.extents))


@dataclass(frozen=True)
class FeatureCloud:
    """N points with D-dim features and per-point contributing view counts."""

    points: np.ndarray
    features: np.ndarray
    view_counts: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float32)
        counts = np.asarray(self.view_counts, dtype=np.int32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionMismatch(f"points must be Nx3, got {pts.shape}")
        if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
            raise DimensionMismatch("feature rows must align with points")
        if counts.shape != (pts.shape[0],) or np.any(counts < 1):
            raise DimensionMismatch("every retained point needs view_count >= 1")
        if not np.all(np.isfinite(feats)):
            raise DimensionMismatch("features contain non-finite values")
        object.__setattr__(self, "points", _freeze(pts))
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "view_counts", _freeze(counts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def select(self, indices) -> "FeatureCloud":
        return FeatureCloud(self.points[indices], self.features[indices], self.view_counts[indices])


def cloud_diameter(points) -> float:
    """Bounding-box diagonal, the 'diameter' used for relative tolerances."""
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def sample_camera_poses(
    model: ReferenceModel,
    n_views: int,
    distance_factor: float = 2.5,
    seed: int = 0,
    width: int = 224,
    height: int = 224,
    fill_fraction: float = 0.8,
) -> list[CameraView]:
    """Cameras on a Fibonacci sphere around the model, all looking at its centroid.

    Radius is distance_factor x model diameter; focal length is chosen so the
    model fills `fill_fraction` of the half image. The seed only perturbs the
    roll about each optical axis, not the camera positions.
    """
    if n_views < 1:
        raise DegenerateInput("n_views must be >= 1")
    if distance_factor <= 0:
        raise DegenerateInput("distance_factor must be positive")
    centroid = model.centroid
    diameter = model.diameter
    dist = distance_factor * diameter
    radius = diameter / 2.0
    focal = 0.5 * fill_fraction * min(width, height) * dist / radius
    rng = np.random.default_rng(seed)

    i = np.arange(n_views) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n_views)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    azim = golden * np.arange(n_views)
    dirs = np.stack(
        [np.sin(polar) * np.cos(azim), np.cos(polar), np.sin(polar) * np.sin(azim)], axis=1
    )

    views = []
    for k in range(n_views):
        center = centroid + dirs[k] * dist
        f = centroid - center
        f = f / np.linalg.norm(f)
        up = np.array([0.0, 1.0, 0.0])
        if abs(float(f @ up)) > 0.999:
            up = np.array([1.0, 0.0, 0.0])
        down = -(up - (up @ f) * f)
        down /= np.linalg.norm(down)
        x_cam = np.cross(down, f)
        roll = rng.uniform(0.0, 2.0 * np.pi)
        cr, sr = np.cos(roll), np.sin(roll)
        x_r = cr * x_cam + sr * down
        y_r = -sr * x_cam + cr * down
        R_c2w = np.stack([x_r, y_r, f], axis=1)
        R_w2c = R_c2w.T
        M = np.eye(4)
        M[:3, :3] = R_w2c
        M[:3, 3] = -R_w2c @ center
        views.append(
            CameraView(
                fx=focal,
                fy=focal,
                cx=(width - 1) / 2.0,
                cy=(height - 1) / 2.0,
                width=width,
                height=height,
                world_to_camera=M,
            )
        )
    return views


def project_point(view: CameraView, point):
    """Pinhole projection of a single world point; raises BehindCamera at z <= 0."""
    p = view.transform_to_camera(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    if p[2] <= 0.0:
        raise BehindCamera(f"point has camera-frame depth {p[2]:.6g}")
    u = view.fx * p[0] / p[2] + view.cx
    v = view.fy * p[1] / p[2] + view.cy
    return float(u), float(v), float(p[2])


def _project_points(view: CameraView, points):
    """Batch projection. Returns (u, v, z); u/v are NaN behind the camera."""
    p = view.transform_to_camera(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, view.fx * p[:, 0] / z + view.cx, np.nan)
        v = np.where(z > 0, view.fy * p[:, 1] / z + view.cy, np.nan)
    return u, v, z


def _splat_offsets(splat_radius_px: float):
    c = int(np.ceil(splat_radius_px))
    dy, dx = np.mgrid[-c : c + 1, -c : c + 1]
    return dy.ravel(), dx.ravel()


def visibility_mask(points, view: CameraView, splat_radius_px: float = 2.0) -> np.ndarray:
    """Splat z-buffer visibility for a point set.

    Each in-frustum point is splatted over a disc of splat_radius_px pixels;
    a point is visible iff its depth is within 1% of the cloud diameter of the
    buffer minimum at its pixel.
    """
    if splat_radius_px < 0.5:
        raise DegenerateInput("splat_radius_px must be >= 0.5")
    pts = np.asarray(points, dtype=np.float64)
    u, v, z = _project_points(view, pts)
    W, H = view.width, view.height
    pu = np.round(u)
    pv = np.round(v)
    valid = (z > 0) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    if not valid.any():
        return np.zeros(len(pts), dtype=bool)

    tol = 0.01 * cloud_diameter(pts)
    buf = np.full((H, W), np.inf)
    dy, dx = _splat_offsets(splat_radius_px)
    uu, vv, zz = u[valid], v[valid], z[valid]
    px = np.round(uu)[:, None] + dx[None, :]
    py = np.round(vv)[:, None] + dy[None, :]
    cover = (px - uu[:, None]) ** 2 + (py - vv[:, None]) ** 2 <= splat_radius_px**2
    cover &= (px >= 0) & (px < W) & (py >= 0) & (py < H)
    flat = (py * W + px)[cover].astype(np.int64)
    np.minimum.at(buf.ravel(), flat, np.broadcast_to(zz[:, None], cover.shape)[cover])

    vis = np.zeros(len(pts), dtype=bool)
    vi = np.where(valid)[0]
    depth_at = buf[pv[vi].astype(np.int64), pu[vi].astype(np.int64)]
    vis[vi] = z[vi] <= depth_at + tol
    return vis


def visibility_bruteforce(points, view: CameraView, splat_radius_px: float = 2.0) -> np.ndarray:
    """O(V^2) reference evaluation of the splat-visibility definition.

    Recomputes, for every point, the minimum depth among all points whose
    splat disc covers its pixel, without building a buffer image. Used as the
    independent oracle for visibility_mask.
    """
    pts = np.asarray(points, dtype=np.float64)
    u, v, z = _project_points(view, pts)
    W, H = view.width, view.height
    valid = (z > 0) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    tol = 0.01 * cloud_diameter(pts)
    vis = np.zeros(len(pts), dtype=bool)
    pu, pv = np.round(u), np.round(v)
    for i in np.where(valid)[0]:
        d2 = (pu[i] - u[valid]) ** 2 + (pv[i] - v[valid]) ** 2
        covering = d2 <= splat_radius_px**2
        nearest = z[valid][covering].min() if covering.any() else np.inf
        vis[i] = z[i] <= nearest + tol
    return vis


def sample_feature_bilinear(fmap: FeatureMap, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation of the four neighboring feature pixels."""
    if not (0 <= u < fmap.width and 0 <= v < fmap.height):
        raise OutOfBounds(f"sample ({u}, {v}) outside {fmap.width}x{fmap.height} map")
    return _bilinear_many(fmap, np.array([[u, v]]))[0]


def _bilinear_many(fmap: FeatureMap, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    W, H = fmap.width, fmap.height
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    au = uv[:, 0] - u0
    av = uv[:, 1] - v0
    u0c = np.clip(u0, 0, W - 1)
    v0c = np.clip(v0, 0, H - 1)
    u1 = np.clip(u0 + 1, 0, W - 1)
    v1 = np.clip(v0 + 1, 0, H - 1)
    d = fmap.data.astype(np.float64)
    f00 = d[v0c, u0c]
    f01 = d[v0c, u1]
    f10 = d[v1, u0c]
    f11 = d[v1, u1]
    w00 = ((1 - au) * (1 - av))[:, None]
    w01 = (au * (1 - av))[:, None]
    w10 = ((1 - au) * av)[:, None]
    w11 = (au * av)[:, None]
    return w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11


def _view_sort_key(view: CameraView, fmap: FeatureMap):
    return view.world_to_camera.tobytes() + np.float64(
        [view.fx, view.fy, view.cx, view.cy]
    ).tobytes()


def lift_features(model: ReferenceModel, views: Sequence[tuple[CameraView, FeatureMap]]) -> FeatureCloud:
    """Average bilinearly sampled features over all views where a point is visible.

    Contributions are accumulated in a content-sorted view order, so the
    output is invariant to permutations of the input list. Points visible in
    no view are dropped.
    """
    if len(views) == 0:
        raise DegenerateInput("need at least one view")
    dims = {fm.dim for _, fm in views}
    if len(dims) != 1:
        raise DimensionMismatch(f"feature maps disagree on D: {sorted(dims)}")
    order = sorted(range(len(views)), key=lambda k: _view_sort_key(*views[k]))

    V = model.points.shape[0]
    D = views[0][1].dim
    acc = np.zeros((V, D), dtype=np.float64)
    counts = np.zeros(V, dtype=np.int64)
    for k in order:
        view, fmap = views[k]
        vis = visibility_mask(model.points, view)
        if not vis.any():
            continue
        u, v, _ = _project_points(view, model.points[vis])
        acc[vis] += _bilinear_many(fmap, np.stack([u, v], axis=1))
        counts[vis] += 1

    keep = counts >= 1
    if not keep.any():
        raise EmptyObservation("no model point is visible in any view")
    feats = (acc[keep] / counts[keep, None]).astype(np.float32)
    return FeatureCloud(model.points[keep], feats, counts[keep])


def farthest_point_sample(points, k: int, seed: int = 0) -> np.ndarray:
    """Indices of k farthest-point samples; seeded start, deterministic ties."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))  # first max = lowest index on ties
        chosen[i] = nxt
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.sort(chosen)


def backproject_observation(
    view: CameraView,
    depth_map,
    mask,
    fmap: FeatureMap,
    max_points: int = 1024,
    seed: int = 0,
    edge_erosion_px: int = 0,
) -> FeatureCloud:
    """Masked depth pixels -> camera-frame points with per-pixel features.

    The mask is eroded by edge_erosion_px first: depth values at silhouette
    pixels are unreliable (grazing angles, sensor edge bleed) and bias the
    cloud extent. Subsamples to max_points by seeded farthest-point sampling
    when the mask is large. Raises EmptyObservation below 3 valid pixels.
    """
    depth = np.asarray(depth_map, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if depth.shape != m.shape or depth.shape != (fmap.height, fmap.width):
        raise DimensionMismatch(
            f"depth {depth.shape}, mask {m.shape} and map {(fmap.height, fmap.width)} disagree"
        )
    if max_points < 3:
        raise DegenerateInput("max_points must be >= 3")
    if edge_erosion_px > 0:
        eroded = binary_erosion(m, iterations=edge_erosion_px)
        if eroded.sum() >= 3:  # tiny masks keep their rim rather than vanish
            m = eroded
    valid = m & np.isfinite(depth) & (depth > 0)
    vs, us = np.nonzero(valid)
    if len(vs) < 3:
        raise EmptyObservation(f"only {len(vs)} valid masked pixels")
    z = depth[vs, us]
    x = (us - view.cx) * z / view.fx
    y = (vs - view.cy) * z / view.fy
    pts = np.stack([x, y, z], axis=1)
    feats = fmap.data[vs, us]
    if len(pts) > max_points:
        idx = farthest_point_sample(pts, max_points, seed=seed)
        pts, feats = pts[idx], feats[idx]
    return FeatureCloud(pts, feats, np.ones(len(pts), dtype=np.int32))


def render_point_splats(points, features, view: CameraView, splat_radius_px: float = 2.0):
    """Render per-point features into an image by nearest-depth disc splatting.

    Stand-in for an RGB renderer plus 2D feature extractor at desk scale:
    each pixel takes the feature of the nearest covering point. Returns
    (FeatureMap, depth HxW float64, mask HxW bool); empty pixels carry zero
    features, zero depth and mask False.
    """
    pts = np.asarray(points, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float32)
    if feats.shape[0] != pts.shape[0]:
        raise DimensionMismatch("features must align with points")
    u, v, z = _project_points(view, pts)
    W, H = view.width, view.height
    valid = (z > 0) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)

    owner = np.full(H * W, -1, dtype=np.int64)
    depth = np.zeros(H * W, dtype=np.float64)
    if valid.any():
        dy, dx = _splat_offsets(splat_radius_px)
        uu, vv, zz = u[valid], v[valid], z[valid]
        src = np.where(valid)[0]
        px = np.round(uu)[:, None] + dx[None, :]
        py = np.round(vv)[:, None] + dy[None, :]
        cover = (px - uu[:, None]) ** 2 + (py - vv[:, None]) ** 2 <= splat_radius_px**2
        cover &= (px >= 0) & (px < W) & (py >= 0) & (py < H)
        flat = (py * W + px)[cover].astype(np.int64)
        zrep = np.broadcast_to(zz[:, None], cover.shape)[cover]
        irep = np.broadcast_to(src[:, None], cover.shape)[cover]
        # paint far-to-near so the last (= nearest) write wins per pixel
        order = np.argsort(-zrep, kind="stable")
        owner[flat[order]] = irep[order]
        depth[flat[order]] = zrep[order]

    mask = owner >= 0
    fmap = np.zeros((H * W, feats.shape[1]), dtype=np.float32)
    fmap[mask] = feats[owner[mask]]
    depth[~mask] = 0.0
    return (
        FeatureMap(fmap.reshape(H, W, -1)),
        depth.reshape(H, W),
        mask.reshape(H, W),
    )


def normalize_cloud(cloud: FeatureCloud):
    """Center at the centroid and scale by the max distance to it.

    Returns (normalized cloud, centroid, radius) so poses estimated in the
    normalized frame can be mapped back.
    """
    if len(cloud) == 0:
        raise DegenerateInput("cannot normalize an empty cloud")
    centroid = cloud.points.mean(axis=0)
    d = np.linalg.norm(cloud.points - centroid, axis=1)
    radius = float(d.max())
    if radius <= 1e-12:
        raise ZeroExtent("all points coincide")
    out = FeatureCloud((cloud.points - centroid) / radius, cloud.features, cloud.view_counts)
    return out, centroid, radius
