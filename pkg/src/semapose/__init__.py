"""Category-level 9D object pose estimation from 3D semantic correspondence.

The pipeline lifts dense 2D feature maps onto a category reference model,
trains a transformer matching network with inlier gating between partial
observations and the full reference cloud, and recovers rotation,
translation and scale with a robust similarity solver. NOCS-style metrics
and a batch CLI round out the engine.
"""

from .errors import (
    BehindCamera,
    DegenerateInput,
    DegenerateViewpoint,
    DimensionMismatch,
    EmptyObservation,
    EngineError,
    FormatError,
    LengthMismatch,
    NoConsensus,
    NoMatches,
    NonFiniteActivation,
    NonFiniteGradient,
    NonFiniteLoss,
    NoPartMask,
    OutOfBounds,
    ZeroExtent,
)
from .featurelift import (
    CameraView,
    FeatureCloud,
    FeatureMap,
    ReferenceModel,
    SymmetryDescriptor,
    backproject_observation,
    cloud_diameter,
    farthest_point_sample,
    lift_features,
    normalize_cloud,
    project_point,
    render_point_splats,
    sample_camera_poses,
    sample_feature_bilinear,
    visibility_mask,
)
from .geometry import (
    Match,
    OrientedBox3D,
    Pose9D,
    RansacParams,
    apply_pose,
    geodesic_rotation_deg,
    oriented_box_iou,
    ransac_similarity,
    rot_axis,
    rotation_error_deg,
    symmetry_aware_box_iou,
    umeyama,
)
from .matcher import (
    AssignmentOutput,
    CorrespondenceGT,
    MatcherConfig,
    MatcherWeights,
    embed_inputs,
    focal_assignment_loss,
    forward,
    gate_assignment,
    inlier_bce_loss,
    param_gradients,
    positional_encode,
    total_loss,
)
from .metrics import accuracy_curves, evaluate
from .solver import (
    InferenceParams,
    InferenceResult,
    estimate_pose,
    extract_matches,
    infer,
    refine_pose,
)
from .trainer import (
    Adam,
    CategoryDataset,
    FeatureOracle,
    TrainConfig,
    TrainingSample,
    build_category_dataset,
    disambiguate_symmetry,
    generate_toy_category,
    gt_correspondences,
    handle_visible,
    make_training_sample,
    observation_camera,
    sample_object_pose,
    synthetic_feature_oracle,
    train,
)

__version__ = "0.1.0"
