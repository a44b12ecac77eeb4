"""Core 3D types, similarity-transform estimation and box metrics.

Conventions used everywhere in this package:
  * rotations are 3x3 row-major matrices acting on column vectors,
  * a pose maps object/canonical points into the camera frame as
    ``p_cam = scale * R @ p + t``,
  * camera frame is +x right, +y down, +z forward; a point is in front of
    the camera iff its camera-frame z > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, NoConsensus

_ORTHO_TOL = 1e-6


def _as_points(arr, name="points"):
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateInput(f"{name} must be Nx3, got {pts.shape}")
    return pts


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def rot_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise DegenerateInput("rotation axis is zero")
    a = a / n
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose9D:
    """Similarity transform: rotation (3x3), translation (3,), uniform scale."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)) or not np.isfinite(s):
            raise DegenerateInput("pose has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise DegenerateInput("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DegenerateInput("rotation determinant is not +1")
        if s <= 0.0:
            raise DegenerateInput("scale must be positive")
        object.__setattr__(self, "rotation", _freeze(R))
        object.__setattr__(self, "translation", _freeze(t))
        object.__setattr__(self, "scale", s)

    @staticmethod
    def identity() -> "Pose9D":
        return Pose9D(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points) -> np.ndarray:
        pts = _as_points(points)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose9D":
        Rinv = self.rotation.T
        sinv = 1.0 / self.scale
        return Pose9D(Rinv, -sinv * Rinv @ self.translation, sinv)

    def compose(self, other: "Pose9D") -> "Pose9D":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose9D(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @staticmethod
    def from_json(obj: dict) -> "Pose9D":
        return Pose9D(
            np.asarray(obj["rotation"], dtype=np.float64),
            np.asarray(obj["translation"], dtype=np.float64),
            float(obj["scale"]),
        )


def apply_pose(pose: Pose9D, points) -> np.ndarray:
    """p_i -> scale * R @ p_i + t for each row of `points`."""
    return pose.apply(points)


@dataclass(frozen=True)
class OrientedBox3D:
    """Oriented box: canonical corners (+-extents/2) mapped through `pose`.

    `extents` are the full side lengths of the canonical axis-aligned box;
    the world-space size is pose.scale * extents.
    """

    pose: Pose9D
    extents: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(e > 0.0):
            raise DegenerateInput("box extents must be positive")
        object.__setattr__(self, "extents", _freeze(e))

    def corners(self) -> np.ndarray:
        half = self.extents / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.pose.apply(signs * half)

    def volume(self) -> float:
        return float(np.prod(self.extents) * self.pose.scale**3)

    def contains(self, points) -> np.ndarray:
        """Boundary-inclusive membership test for world-space points."""
        pts = _as_points(points)
        local = (pts - self.pose.translation) @ self.pose.rotation / self.pose.scale
        return np.all(np.abs(local) <= self.extents / 2.0, axis=1)


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: intrinsics plus a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DegenerateInput("focal lengths must be positive")
        M = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if np.abs(M[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > _ORTHO_TOL:
            raise DegenerateInput("world_to_camera bottom row must be (0,0,0,1)")
        R = M[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise DegenerateInput("world_to_camera rotation block is not orthonormal")
        object.__setattr__(self, "world_to_camera", _freeze(M))

    def transform_to_camera(self, points) -> np.ndarray:
        pts = _as_points(points)
        M = self.world_to_camera
        return pts @ M[:3, :3].T + M[:3, 3]

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the world frame."""
        M = self.world_to_camera
        return -M[:3, :3].T @ M[:3, 3]

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": self.world_to_camera.reshape(-1).tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraView":
        return CameraView(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            world_to_camera=np.asarray(obj["world_to_camera"], dtype=np.float64).reshape(4, 4),
        )


class Match(NamedTuple):
    """A thresholded correspondence between partial point i and full point j."""

    partial_index: int
    full_index: int
    score: float


def umeyama(src, dst) -> Pose9D:
    """Least-squares similarity transform: min sum ||s*R*src_i + t - dst_i||^2.

    Closed-form SVD solution with the sign-correction diagonal so that
    det(R) = +1 even for reflective covariance.

    Raises DegenerateInput when N < 3 or the src points are collinear
    (covariance rank < 2).
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if src.shape != dst.shape:
        raise DegenerateInput(f"src/dst shapes differ: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d

    sing = np.linalg.svd(sc, compute_uv=False)
    if sing[0] <= 0.0 or sing[1] <= 1e-8 * sing[0]:
        raise DegenerateInput("src points are collinear or coincident")

    cov = dc.T @ sc / n
    U, D, Vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    S = np.array([1.0, 1.0, sign if sign != 0 else 1.0])
    R = (U * S) @ Vt
    var_s = (sc**2).sum() / n
    s = float((D * S).sum() / var_s)
    if s <= 0.0:
        raise DegenerateInput("estimated scale is non-positive")
    t = mu_d - s * R @ mu_s
    return Pose9D(R, t, s)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 2048
    inlier_threshold: float = 0.01
    min_inliers: int = 5
    seed: int = 0


def _batched_umeyama_3pt(src_tri, dst_tri):
    """Vectorized 3-point similarity fits. Returns (R, t, s, valid) batches."""
    mu_s = src_tri.mean(axis=1, keepdims=True)
    mu_d = dst_tri.mean(axis=1, keepdims=True)
    sc = src_tri - mu_s
    dc = dst_tri - mu_d
    cov = np.einsum("kni,knj->kij", dc, sc) / 3.0
    U, D, Vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    sign[sign == 0] = 1.0
    S = np.ones_like(D)
    S[:, 2] = sign
    R = np.einsum("kij,kj,kjl->kil", U, S, Vt)
    var_s = (sc**2).sum(axis=(1, 2)) / 3.0
    trace = (D * S).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(var_s > 0, trace / np.maximum(var_s, 1e-300), 0.0)
    # degenerate triplet: coincident/collinear sample or non-positive scale
    sing = np.linalg.svd(sc, compute_uv=False)
    valid = (sing[:, 0] > 0) & (sing[:, 1] > 1e-8 * sing[:, 0]) & (s > 0)
    t = mu_d[:, 0, :] - s[:, None] * np.einsum("kij,kj->ki", R, mu_s[:, 0, :])
    return R, t, s, valid


def ransac_similarity(src, dst, params: RansacParams):
    """RANSAC over 3-point Umeyama fits, refit on the best consensus set.

    Deterministic given `params.seed`; ties between equal inlier counts are
    broken by the lowest iteration index. Returns (Pose9D, inlier_mask).
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if src.shape != dst.shape:
        raise DegenerateInput(f"src/dst shapes differ: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {n}")

    rng = np.random.default_rng(params.seed)
    tri = np.empty((params.iterations, 3), dtype=np.int64)
    for k in range(params.iterations):
        tri[k] = rng.choice(n, size=3, replace=False)

    best_count = -1
    best_mask = None
    chunk = 256
    for start in range(0, params.iterations, chunk):
        idx = tri[start : start + chunk]
        R, t, s, valid = _batched_umeyama_3pt(src[idx], dst[idx])
        # (k, n, 3) residuals against every correspondence
        pred = s[:, None, None] * np.einsum("kij,nj->kni", R, src) + t[:, None, :]
        dist = np.linalg.norm(pred - dst[None, :, :], axis=2)
        masks = dist < params.inlier_threshold
        counts = np.where(valid, masks.sum(axis=1), -1)
        k_best = int(np.argmax(counts))
        if counts[k_best] > best_count:
            best_count = int(counts[k_best])
            best_mask = masks[k_best].copy()

    if best_count < max(params.min_inliers, 3):
        raise NoConsensus(
            f"best consensus has {max(best_count, 0)} inliers; "
            f"needed {max(params.min_inliers, 3)}"
        )

    pose = umeyama(src[best_mask], dst[best_mask])
    final = np.linalg.norm(pose.apply(src) - dst, axis=1) < params.inlier_threshold
    if final.sum() < max(params.min_inliers, 3):
        # refit drifted off the consensus; fall back to the search-time set
        final = best_mask
        pose = umeyama(src[best_mask], dst[best_mask])
    return pose, final


def geodesic_rotation_deg(R1, R2) -> float:
    """Geodesic angle arccos((trace(R1^T R2) - 1) / 2), in degrees.

    Small angles are evaluated through ||R1 - R2||_F = 2*sqrt(2)*sin(theta/2),
    which is the same quantity but keeps precision near zero where the
    arccos form bottoms out around 1e-6 degrees.
    """
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    s = np.linalg.norm(R1 - R2) / (2.0 * np.sqrt(2.0))
    if s < 0.5:  # theta < 60 deg: arcsin branch is the well-conditioned one
        return float(np.degrees(2.0 * np.arcsin(min(s, 1.0))))
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _axis_rotation_stack(axis, steps: int) -> np.ndarray:
    angles = np.linspace(0.0, 2.0 * np.pi, steps, endpoint=False)
    return np.stack([rot_axis(axis, a) for a in angles])


def rotation_error_deg(R1, R2, symmetry=None, steps: int = 360) -> float:
    """Rotation error in degrees, minimized over the symmetry orbit.

    For an axis-symmetric object the error is the minimum geodesic distance
    over `steps` discretized rotations of R2 about the object-frame axis.
    `symmetry` is a featurelift.SymmetryDescriptor or None.
    """
    if symmetry is None or getattr(symmetry, "kind", "none") == "none":
        return geodesic_rotation_deg(R1, R2)
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    rots = _axis_rotation_stack(symmetry.axis, steps)
    variants = R2 @ rots  # object-frame symmetry acts on the right
    traces = np.einsum("ij,kij->k", R1, variants)
    best = int(np.argmax(traces))
    return geodesic_rotation_deg(R1, variants[best])


def _sample_in_box(box: OrientedBox3D, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    local = (rng.random((samples, 3)) - 0.5) * box.extents
    return box.pose.apply(local)


def oriented_box_iou(a: OrientedBox3D, b: OrientedBox3D, samples: int = 100000, seed: int = 0) -> float:
    """Monte-Carlo IoU: sample in box a, measure the fraction falling in b.

    Volumes are analytic, only the intersection is estimated, so identical
    boxes give exactly 1.0 and disjoint boxes exactly 0.0. Deterministic for
    a fixed seed.
    """
    if samples < 1:
        raise DegenerateInput("samples must be >= 1")
    pts = _sample_in_box(a, samples, seed)
    frac = float(b.contains(pts).mean())
    return _iou_from_fraction(frac, a.volume(), b.volume())


def _iou_from_fraction(frac: float, vol_a: float, vol_b: float) -> float:
    inter = frac * vol_a
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def symmetry_aware_box_iou(
    pred: OrientedBox3D,
    gt: OrientedBox3D,
    symmetry=None,
    steps: int = 360,
    samples: int = 100000,
    seed: int = 0,
) -> float:
    """IoU maximized over `steps` rotations of gt about its symmetry axis.

    The theta=0 term uses the identical estimator as oriented_box_iou, so the
    result is >= the plain IoU by construction.
    """
    if symmetry is None or getattr(symmetry, "kind", "none") == "none":
        return oriented_box_iou(pred, gt, samples=samples, seed=seed)
    pts = _sample_in_box(pred, samples, seed)
    # local coords in gt's canonical frame; a symmetry rotation of the gt box
    # is an inverse rotation of the local test points
    local = (pts - gt.pose.translation) @ gt.pose.rotation / gt.pose.scale
    rots = _axis_rotation_stack(symmetry.axis, steps)
    half = gt.extents / 2.0
    best = 0.0
    chunk = 16  # bounds the (chunk, samples, 3) scratch array
    for start in range(0, steps, chunk):
        rotated = np.einsum("kji,nj->kni", rots[start : start + chunk], local)
        inside = np.all(np.abs(rotated) <= half, axis=2)
        best = max(best, float(inside.mean(axis=1).max()))
    return _iou_from_fraction(best, pred.volume(), gt.volume())
