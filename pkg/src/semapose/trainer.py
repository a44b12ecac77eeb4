"""Synthetic training: toy categories, feature oracle, labels, optimization.

Desk-scale stand-ins for the real pipeline: parametric point-cloud models
per category, a deterministic feature oracle playing the role of a 2D
foundation model lifted to 3D, ground-truth correspondence labeling with a
positive/ignore/negative distance band, symmetry disambiguation of
ground-truth poses, and an Adam loop over per-sample gradients.
"""

from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DegenerateInput,
    DegenerateViewpoint,
    EmptyObservation,
    NonFiniteGradient,
    NonFiniteLoss,
    NoPartMask,
)
from .featurelift import (
    CameraView,
    FeatureCloud,
    ReferenceModel,
    SymmetryDescriptor,
    farthest_point_sample,
    lift_features,
    normalize_cloud,
    render_point_splats,
    sample_camera_poses,
    visibility_mask,
)
from .formats import write_gsmw, write_json
from .geometry import Pose9D, random_rotation, rot_axis
from .matcher import CorrespondenceGT, MatcherConfig, MatcherWeights, loss_and_gradients


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    seed: int = 0
    corr_threshold: float = 0.08  # positives: fraction of normalized diameter
    neg_threshold: float = 0.16  # negatives start here; in between is ignored
    points_partial: int = 192
    points_full: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    samples_per_instance: int = 8
    resample_per_epoch: bool = True
    max_tilt_deg: float = 180.0
    no_fusion: bool = False
    no_inlier_head: bool = False
    no_symmetry: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DegenerateInput("learning_rate must be positive")
        if not (0 < self.corr_threshold < self.neg_threshold):
            raise DegenerateInput("need 0 < corr_threshold < neg_threshold")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "corr_threshold": self.corr_threshold,
            "neg_threshold": self.neg_threshold,
            "points_partial": self.points_partial,
            "points_full": self.points_full,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_opt": self.eps_opt,
            "samples_per_instance": self.samples_per_instance,
            "resample_per_epoch": self.resample_per_epoch,
            "max_tilt_deg": self.max_tilt_deg,
            "no_fusion": self.no_fusion,
            "no_inlier_head": self.no_inlier_head,
            "no_symmetry": self.no_symmetry,
        }

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        return TrainConfig(**obj)


@dataclass(frozen=True)
class TrainingSample:
    partial: FeatureCloud  # camera frame, normalized
    full: FeatureCloud  # canonical frame, normalized
    gt_pose: Pose9D  # canonical -> camera, symmetry-disambiguated
    gt: CorrespondenceGT


# ---------------------------------------------------------------------------
# toy categories


def _lathe_points(rng, profile, n_theta=96, n_y=44, cap_rings=7):
    """Surface of revolution about y plus cap rings; theta grid keeps exact
    90-degree symmetry."""
    r0 = profile["r0"]
    h = profile["h"]
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    u = np.linspace(0.0, 1.0, n_y)
    radii = profile["radius_fn"](u)
    ys = (u - 0.5) * h
    ring_y, ring_r = [], []
    for cap_u, cap_y in ((radii[0], ys[0]), (radii[-1], ys[-1])):
        for k in range(1, cap_rings + 1):
            ring_y.append(cap_y)
            ring_r.append(cap_u * k / (cap_rings + 1))
    all_y = np.concatenate([np.repeat(ys, n_theta), np.repeat(ring_y, n_theta)])
    all_r = np.concatenate([np.repeat(radii, n_theta), np.repeat(ring_r, n_theta)])
    all_t = np.tile(theta, n_y + len(ring_y))
    pts = np.stack([all_r * np.cos(all_t), all_y, all_r * np.sin(all_t)], axis=1)
    return pts


def _seeded_profile(rng, base_fn, r_range, h_range, wobble):
    r0 = float(rng.uniform(*r_range))
    h = float(rng.uniform(*h_range))
    a = rng.uniform(-wobble, wobble, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)

    def radius_fn(u):
        mod = 1.0 + a[0] * np.sin(np.pi * u + ph[0]) + a[1] * np.sin(2 * np.pi * u + ph[1])
        return r0 * base_fn(u) * np.clip(mod, 0.5, 1.5)

    return {"r0": r0, "h": h, "radius_fn": radius_fn}


def _center_bbox(pts):
    return pts - (pts.max(axis=0) + pts.min(axis=0)) / 2.0


def _sample_cuboid_surface(rng, size, n):
    """Uniform samples over the 6 faces of an axis-aligned cuboid at origin."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * size[axis] / 2.0
        pts[m, others[0]] = uv[m, 0] * size[others[0]]
        pts[m, others[1]] = uv[m, 1] * size[others[1]]
    return pts


def generate_toy_category(kind: str, seed: int = 0) -> ReferenceModel:
    """Parametric point-cloud model for one of the toy categories.

    lathe: axis-symmetric surface of revolution (bottle/can/bowl analog);
    box_hinge: two cuboid slabs joined at an edge (laptop analog);
    cup_with_handle: near-cylindrical body plus a torus-arc handle whose
    points carry the part mask (mug analog).
    """
    rng = np.random.default_rng([zlib.crc32(kind.encode()), seed])
    if kind == "lathe":
        base = lambda u: 0.72 + 0.28 * np.sin(np.pi * np.clip(u, 0, 1)) ** 1.5
        profile = _seeded_profile(rng, base, (0.038, 0.05), (0.14, 0.17), wobble=0.08)
        pts = _center_bbox(_lathe_points(rng, profile))
        return ReferenceModel(points=pts, category="lathe", symmetry=SymmetryDescriptor.about_y())

    if kind == "cup_with_handle":
        base = lambda u: 0.85 + 0.15 * np.clip(u, 0, 1)
        profile = _seeded_profile(rng, base, (0.036, 0.042), (0.115, 0.135), wobble=0.04)
        body = _lathe_points(rng, profile, n_theta=84, n_y=40, cap_rings=7)
        h = profile["h"]
        r_mid = float(profile["radius_fn"](np.array([0.5]))[0])
        loop_r = 0.38 * h * rng.uniform(0.95, 1.05)
        tube_r = 0.28 * loop_r
        cx = r_mid + 0.25 * loop_r
        n_handle = 800
        arc = rng.uniform(-np.radians(75), np.radians(75), size=n_handle)
        tube = rng.uniform(0, 2 * np.pi, size=n_handle)
        ring_x = cx + (loop_r + tube_r * np.cos(tube)) * np.cos(arc)
        ring_y = (loop_r + tube_r * np.cos(tube)) * np.sin(arc)
        ring_z = tube_r * np.sin(tube)
        handle = np.stack([ring_x, ring_y, ring_z], axis=1)
        pts = np.concatenate([body, handle])
        mask = np.zeros(len(pts), dtype=bool)
        mask[len(body):] = True
        # keep the body axis exactly on the canonical y-axis (symmetry anchor);
        # only the height is re-centered, so the bbox is x-asymmetric
        pts[:, 1] -= (pts[:, 1].max() + pts[:, 1].min()) / 2.0
        return ReferenceModel(
            points=pts,
            category="cup_with_handle",
            part_mask=mask,
            symmetry=SymmetryDescriptor.about_y(),
        )

    if kind == "box_hinge":
        w = rng.uniform(0.28, 0.34)
        depth = rng.uniform(0.20, 0.24)
        t = rng.uniform(0.012, 0.02)
        alpha = np.radians(rng.uniform(95, 115))
        lid_d = depth * rng.uniform(0.95, 1.05)
        base_pts = _sample_cuboid_surface(rng, np.array([w, t, depth]), 2600)
        base_pts[:, 2] += depth / 2.0  # hinge edge at z = 0
        lid_local = _sample_cuboid_surface(rng, np.array([w, t, lid_d]), 2600)
        lid_local[:, 2] += lid_d / 2.0
        ca, sa = np.cos(alpha), np.sin(alpha)
        lid = np.stack(
            [
                lid_local[:, 0],
                sa * lid_local[:, 2] + ca * lid_local[:, 1],
                -ca * lid_local[:, 2] + sa * lid_local[:, 1],
            ],
            axis=1,
        )
        pts = _center_bbox(np.concatenate([base_pts, lid]))
        return ReferenceModel(points=pts, category="box_hinge")

    raise DegenerateInput(f"unknown toy category {kind!r}")


# ---------------------------------------------------------------------------
# feature oracle


class FeatureOracle:
    """Deterministic per-point features shared across a category.

    feature_k(p) = sin(omega_k . p + phi_k) + noise_amp * sin(nu_k . p + psi_k)
    with (omega, phi) from the category seed and (nu, psi) from the instance
    seed; rows are L2-normalized. For axis-symmetric surfaces the features
    are evaluated in symmetry-invariant cylindrical coordinates (radial
    distance, height) so that rotations about the axis cannot be told apart,
    matching what an image-feature backbone sees on such objects. Part-masked
    points (e.g. a mug handle) keep full 3D coordinates.
    """

    def __init__(self, category_seed: int = 0, dim: int = 32, noise_amp: float = 0.1):
        if dim < 1:
            raise DegenerateInput("oracle dim must be >= 1")
        self.dim = dim
        self.noise_amp = noise_amp
        self.category_seed = category_seed
        rng = np.random.default_rng([916191, category_seed])
        self.omega = rng.normal(scale=2.0, size=(dim, 3))
        self.phi = rng.uniform(0, 2 * np.pi, size=dim)

    def _coords(self, points, symmetry: Optional[SymmetryDescriptor], part_mask):
        pts = np.asarray(points, dtype=np.float64)
        if symmetry is None or symmetry.kind != "axis":
            return pts
        a = symmetry.axis
        height = pts @ a
        radial = np.linalg.norm(pts - height[:, None] * a[None, :], axis=1)
        sym_coords = np.stack([radial, height, np.zeros(len(pts))], axis=1)
        if part_mask is None:
            return sym_coords
        out = sym_coords.copy()
        out[np.asarray(part_mask, dtype=bool)] = pts[np.asarray(part_mask, dtype=bool)]
        return out

    def features(self, points, instance_seed: int, symmetry=None, part_mask=None) -> np.ndarray:
        pts = self._coords(points, symmetry, part_mask)
        base = np.sin(pts @ self.omega.T + self.phi)
        if self.noise_amp != 0.0:
            rng = np.random.default_rng([737373, self.category_seed, instance_seed])
            nu = rng.normal(scale=2.0, size=(self.dim, 3))
            psi = rng.uniform(0, 2 * np.pi, size=self.dim)
            base = base + self.noise_amp * np.sin(pts @ nu.T + psi)
        norms = np.linalg.norm(base, axis=1, keepdims=True)
        return (base / np.maximum(norms, 1e-12)).astype(np.float32)


def synthetic_feature_oracle(points, instance_seed: int, dim: int = 32,
                             noise_amp: float = 0.1, category_seed: int = 0,
                             symmetry=None, part_mask=None) -> np.ndarray:
    """Functional form of FeatureOracle for one-off use."""
    oracle = FeatureOracle(category_seed, dim, noise_amp)
    return oracle.features(points, instance_seed, symmetry, part_mask)


# ---------------------------------------------------------------------------
# ground-truth labeling and symmetry handling


def gt_correspondences(partial_canonical, full_canonical, corr_threshold: float = 0.05,
                       neg_threshold: float = 0.10) -> CorrespondenceGT:
    """Label pairs by distance in the shared normalized canonical frame.

    (i, j) is positive iff j is i's nearest full point within
    corr_threshold * diameter; negative iff farther than
    neg_threshold * diameter; in between is ignored. The normalized cloud has
    radius 1, so diameter = 2.
    """
    p = np.asarray(partial_canonical, dtype=np.float64)
    q = np.asarray(full_canonical, dtype=np.float64)
    thr_pos = corr_threshold * 2.0
    thr_neg = neg_threshold * 2.0

    diff = p[:, None, :] - q[None, :, :]
    all_dist = np.linalg.norm(diff, axis=2)
    near_row = all_dist.min(axis=1)
    near_col = all_dist.min(axis=0)
    # positives: within the radius AND among the nearest candidates of the
    # partial point or of the full point (bidirectional nearest labeling, so
    # every full point touching the observed surface gets supervision)
    pos_mask = (all_dist < thr_pos) & (
        (all_dist <= 1.5 * near_row[:, None]) | (all_dist <= 1.5 * near_col[None, :])
    )
    pos_i, pos_j = np.where(pos_mask)
    a_pos = np.stack([pos_i, pos_j], axis=1)
    neg_i, neg_j = np.where(all_dist > thr_neg)
    a_neg = np.stack([neg_i, neg_j], axis=1)
    return CorrespondenceGT.from_pairs(a_pos, a_neg, len(p), len(q))


def disambiguate_symmetry(gt_pose: Pose9D, sym: SymmetryDescriptor) -> Pose9D:
    """Canonicalize a pose of an axis-symmetric object.

    Replaces the rotation with the unique member of its symmetry orbit whose
    rotated reference axis points at the camera origin: R' maps the symmetry
    axis to R a and the reference axis to the unit component of (-t)
    orthogonal to R a. Translation and scale are untouched. Idempotent; poses
    differing only by rotation about the axis map to the same output.
    """
    if sym is None or sym.kind != "axis":
        return gt_pose
    a = sym.axis
    r = sym.reference_axis
    t = gt_pose.translation
    a_rot = gt_pose.rotation @ a
    v = -t
    w = v - (v @ a_rot) * a_rot
    norm_w = np.linalg.norm(w)
    if norm_w < 1e-9:
        raise DegenerateViewpoint("camera sits on the symmetry axis")
    w_hat = w / norm_w
    b_hat = np.cross(a_rot, w_hat)
    B = np.stack([a_rot, w_hat, b_hat], axis=1)
    A = np.stack([a, r, np.cross(a, r)], axis=1)
    return Pose9D(B @ A.T, t, gt_pose.scale)


def handle_visible(model: ReferenceModel, view: CameraView, min_points: int = 10) -> bool:
    """True iff at least min_points part-masked points pass the z-buffer test."""
    if model.part_mask is None:
        raise NoPartMask(f"model {model.category!r} has no part mask")
    vis = visibility_mask(model.points, view)
    return int((vis & model.part_mask).sum()) >= min_points


# ---------------------------------------------------------------------------
# sample simulation


def _identity_extrinsics(view: CameraView) -> CameraView:
    return CameraView(fx=view.fx, fy=view.fy, cx=view.cx, cy=view.cy,
                      width=view.width, height=view.height, world_to_camera=np.eye(4))


def observation_camera(width: int = 128, height: int = 128, fov_scale: float = 1.0) -> CameraView:
    """Default synthetic observation camera: identity extrinsics, ~53 deg FOV."""
    f = width * fov_scale
    return CameraView(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


def sample_object_pose(rng: np.random.Generator, view: CameraView, diameter: float,
                       scale_range=(0.7, 1.3), max_tilt_deg: float = 180.0) -> Pose9D:
    """Random pose fully inside the view frustum: log-uniform scale, depth and
    lateral offset leaving a pixel margin.

    max_tilt_deg >= 180 draws rotations uniformly over SO(3); smaller values
    draw tabletop-style poses: full azimuth about the object's up axis, then a
    bounded tilt about a random horizontal axis (matching the upright-dominated
    pose distribution of real tabletop scenes).
    """
    if max_tilt_deg >= 180.0:
        R = random_rotation(rng)
    else:
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        tilt_axis_angle = rng.uniform(0.0, 2.0 * np.pi)
        tilt = np.radians(rng.uniform(0.0, max_tilt_deg))
        axis = np.array([np.cos(tilt_axis_angle), 0.0, np.sin(tilt_axis_angle)])
        R = rot_axis(axis, tilt) @ rot_axis([0.0, 1.0, 0.0], azimuth)
    s = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
    half = s * diameter / 2.0
    z = float(rng.uniform(1.6, 2.6)) * s * diameter
    margin = 4.0
    max_dx = (view.width / 2.0 - margin) * z / view.fx - half
    max_dy = (view.height / 2.0 - margin) * z / view.fy - half
    dx = float(rng.uniform(-1, 1)) * max(max_dx, 0.0)
    dy = float(rng.uniform(-1, 1)) * max(max_dy, 0.0)
    return Pose9D(R, np.array([dx, dy, z]), s)


@dataclass(frozen=True)
class CategoryDataset:
    """Built once per category: reference cloud plus instance models."""

    kind: str
    reference: ReferenceModel
    full_metric: FeatureCloud  # lifted reference cloud, metric canonical frame
    full_norm: FeatureCloud  # the same cloud, normalized
    full_centroid: np.ndarray
    full_radius: float
    instances: list[ReferenceModel]
    instance_seeds: list[int]
    oracle: FeatureOracle


def _instance_normalized(instance: ReferenceModel):
    """Scale-only normalization for oracle feature evaluation.

    The canonical origin is preserved: the symmetry axis passes through it,
    and the oracle's rotation-invariant cylindrical coordinates are measured
    about that axis. Centering by the centroid would shift the axis for
    part-asymmetric models (a mug handle pulls the centroid off the body
    axis) and silently break the invariance.
    """
    c = instance.points.mean(axis=0)
    r = float(np.linalg.norm(instance.points - c, axis=1).max())
    return instance.points / r


def build_category_dataset(kind: str, reference_seed: int, instance_seeds: list[int],
                           n_views: int = 40, oracle_dim: int = 32, noise_amp: float = 0.1,
                           seed: int = 0, points_full: int = 256,
                           lift_image: int = 96) -> CategoryDataset:
    """Generate models, lift the reference through rendered oracle features."""
    reference = generate_toy_category(kind, reference_seed)
    oracle = FeatureOracle(category_seed=seed, dim=oracle_dim, noise_amp=noise_amp)
    ref_feats = oracle.features(
        _instance_normalized(reference), reference_seed, reference.symmetry, reference.part_mask
    )
    views = sample_camera_poses(reference, n_views, seed=seed, width=lift_image, height=lift_image)
    pairs = []
    for view in views:
        fmap, _, _ = render_point_splats(reference.points, ref_feats, view)
        pairs.append((view, fmap))
    lifted = lift_features(reference, pairs)
    idx = farthest_point_sample(lifted.points, points_full, seed=seed)
    full_metric = lifted.select(idx)
    full_norm, centroid, radius = normalize_cloud(full_metric)
    instances = [generate_toy_category(kind, s) for s in instance_seeds]
    return CategoryDataset(
        kind=kind,
        reference=reference,
        full_metric=full_metric,
        full_norm=full_norm,
        full_centroid=centroid,
        full_radius=radius,
        instances=instances,
        instance_seeds=list(instance_seeds),
        oracle=oracle,
    )


def make_training_sample(dataset: CategoryDataset, instance_index: int, view: CameraView,
                         config: TrainConfig, sample_seed: int) -> TrainingSample:
    """Simulate one observation of a posed instance and label it.

    The instance is placed with a random similarity transform in the camera
    frame, visibility is computed with the splat z-buffer, oracle features are
    attached at the visible canonical points, the ground-truth pose is
    symmetry-disambiguated (mug rule: only when the handle is hidden), and
    correspondences are derived in the reference's normalized canonical frame.
    """
    instance = dataset.instances[instance_index]
    inst_seed = dataset.instance_seeds[instance_index]
    rng = np.random.default_rng([424242, config.seed, sample_seed])

    # canonical space is size-normalized (NOCS convention): align the instance
    # to the reference's canonical radius so the pose scale carries real size
    inst_centroid = instance.points.mean(axis=0)
    inst_radius = float(np.linalg.norm(instance.points - inst_centroid, axis=1).max())
    align = dataset.full_radius / inst_radius
    inst_pts = instance.points * align
    diameter = instance.diameter * align
    pose = sample_object_pose(rng, view, diameter, max_tilt_deg=config.max_tilt_deg)

    cam = _identity_extrinsics(view)
    pts_cam = pose.apply(inst_pts)
    vis = visibility_mask(pts_cam, cam)
    if int(vis.sum()) < 3:
        raise EmptyObservation(f"only {int(vis.sum())} instance points visible")

    sym_eff = instance.symmetry
    if instance.part_mask is not None and sym_eff.kind == "axis":
        if int((vis & instance.part_mask).sum()) >= 10:  # handle visible: not symmetric
            sym_eff = SymmetryDescriptor.none()

    gt_pose = pose
    if not config.no_symmetry and sym_eff.kind == "axis":
        gt_pose = disambiguate_symmetry(pose, sym_eff)

    feats_all = dataset.oracle.features(
        _instance_normalized(instance), inst_seed, instance.symmetry, instance.part_mask
    )
    vis_idx = np.where(vis)[0]
    sub = farthest_point_sample(pts_cam[vis_idx], config.points_partial,
                                seed=int(rng.integers(2**31)))
    keep = vis_idx[sub]
    partial_metric = FeatureCloud(
        pts_cam[keep], feats_all[keep], np.ones(len(keep), dtype=np.int32)
    )
    partial_norm, _, _ = normalize_cloud(partial_metric)

    canonical = gt_pose.inverse().apply(partial_metric.points)
    canonical_norm = (canonical - dataset.full_centroid) / dataset.full_radius
    gt = gt_correspondences(
        canonical_norm, dataset.full_norm.points, config.corr_threshold, config.neg_threshold
    )
    return TrainingSample(partial=partial_norm, full=dataset.full_norm, gt_pose=gt_pose, gt=gt)


def _training_samples_for_epoch(dataset: CategoryDataset, view: CameraView,
                                config: TrainConfig, epoch: int,
                                min_positives: int = 8):
    """Deterministic sample schedule; retries degenerate draws with offset seeds.

    Draws with almost no positive labels (extreme viewpoints) are re-rolled
    the same way as degenerate ones.
    """
    sample_epoch = epoch if config.resample_per_epoch else 0
    for inst in range(len(dataset.instances)):
        for k in range(config.samples_per_instance):
            base = ((sample_epoch * 1000 + inst) * 1000 + k) * 16
            for attempt in range(16):
                try:
                    sample = make_training_sample(dataset, inst, view, config, base + attempt)
                except (DegenerateViewpoint, EmptyObservation):
                    continue
                if len(sample.gt.a_pos) >= min_positives:
                    yield sample
                    break
            else:
                raise DegenerateInput("could not draw a usable training sample in 16 tries")


# ---------------------------------------------------------------------------
# optimizer and training loop


class Adam:
    """First/second-moment optimizer; deterministic update order by name."""

    def __init__(self, weights: MatcherWeights, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.tensors.items()}

    def step(self, weights: MatcherWeights, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name in sorted(weights.tensors):
            g = grads[name].astype(weights.tensors[name].dtype)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            weights.tensors[name] = weights.tensors[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(dataset: CategoryDataset, config: TrainConfig,
          matcher_config: Optional[MatcherConfig] = None,
          out_dir: Optional[str] = None,
          view: Optional[CameraView] = None):
    """Optimize matcher weights on simulated observations of one category.

    One Adam update per sample, epochs x (instances x samples_per_instance)
    steps, fully seeded. Per-epoch checkpoints and a loss CSV are written to
    out_dir when given. Returns (weights, history) where history rows are
    (epoch, step, L_P, L_Q, L_focal, total). A non-finite loss aborts with the
    last finished epoch's weights.
    """
    if matcher_config is None:
        matcher_config = MatcherConfig(feature_dim=dataset.oracle.dim)
    if view is None:
        view = observation_camera()
    weights = MatcherWeights.initialize(matcher_config, seed=config.seed)
    opt = Adam(weights, lr=config.learning_rate, beta1=config.beta1,
               beta2=config.beta2, eps=config.eps_opt)
    with_inlier = not config.no_inlier_head

    history: list[tuple] = []
    last_good = weights.copy()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        write_json(out_path / "matcher_config.json", matcher_config.to_json())
        write_json(out_path / "train_config.json", config.to_json())

    step = 0
    aborted = False
    for epoch in range(config.epochs):
        for sample in _training_samples_for_epoch(dataset, view, config, epoch):
            try:
                components, grads = loss_and_gradients(
                    sample.partial, sample.full, sample.gt, weights, matcher_config,
                    with_inlier=with_inlier,
                )
            except NonFiniteGradient:
                weights = last_good
                aborted = True
                break
            if not np.isfinite(components["total"]):
                weights = last_good
                aborted = True
                break
            opt.step(weights, grads)
            history.append((epoch, step, components["L_P"], components["L_Q"],
                            components["L_focal"], components["total"]))
            step += 1
        if aborted:
            break
        last_good = weights.copy()
        if out_path is not None:
            _atomic_write_gsmw(out_path / f"checkpoint_epoch{epoch:03d}.gsmw", weights.tensors)

    if out_path is not None:
        _atomic_write_gsmw(out_path / "weights.gsmw", weights.tensors)
        with open(out_path / "loss_history.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "step", "L_P", "L_Q", "L_focal", "total"])
            for row in history:
                writer.writerow([row[0], row[1], f"{row[2]!r}", f"{row[3]!r}",
                                 f"{row[4]!r}", f"{row[5]!r}"])
    if aborted and not history:
        raise NonFiniteLoss("training diverged before the first finished step")
    return weights, history


def _atomic_write_gsmw(path: Path, tensors: dict) -> None:
    tmp = path.with_suffix(".tmp")
    write_gsmw(tmp, tensors)
    os.replace(tmp, path)
