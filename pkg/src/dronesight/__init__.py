"""Drone-view object tracking and ground-plane 3D localization.

The package covers the full monocular pipeline: semi-direct visual
odometry over a sparse inverse-depth map, a recursive Bayesian depth
filter with epipolar NCC search and densification, ground-plane
estimation from depth patches under detections, footpoint
back-projection for metric object positions, tracklet-graph
multi-object tracking, and the matching evaluation and synthetic-scene
tooling.
"""

from .alignment import (
    AlignmentResult,
    FeaturePoint,
    SparseDepthMap,
    VisualOdometry,
    estimate_relative_pose,
    initialize_depth_map,
    photometric_cost,
    refine_depths,
    select_grid_features,
    track_sequence,
)
from .depth import (
    DenseDepthMap,
    DepthHypothesis,
    DepthObservation,
    WindowDepthMapper,
    WindowResult,
    densify,
    epipolar_search,
    fuse,
    measurement_moments,
    ncc_score,
    run_depth_window,
)
from .errors import (
    BehindCameraError,
    ConfigError,
    DataError,
    DegenerateGeometryError,
    DegenerateSamplesError,
    DroneSightError,
    EmptyReportError,
    GeometryError,
    HorizonError,
    InsufficientConstraintsError,
    InsufficientSeedsError,
    InvalidPairError,
    LowCorrelationError,
    NoSupportError,
    NonConvergenceError,
    OutOfViewError,
    UndefinedCorrelationError,
    UndefinedMetricsError,
)
from .geometry import (
    CameraIntrinsics,
    EpipolarSegment,
    IntensityImage,
    PixelBlock,
    Pose,
    approximate_intrinsics,
    backproject,
    epipolar_line,
    huber_norm,
    project,
    triangulate,
    warp,
)
from .ground import (
    GroundPlane,
    GroundPlaneEstimator,
    GroundSample,
    backproject_footpoint,
    estimate_ground,
    fit_plane_cramer,
    object_distance,
    patch_samples,
    plane_homography,
    transform_plane,
)
from .metrics import (
    AblationConfig,
    LocalizationReport,
    MotSummary,
    ablation_run,
    localization_report,
    mot_metrics,
    translation_drift_rate,
)
from .synth import (
    CorruptionConfig,
    ObjectSpec,
    ScenarioTruth,
    SceneSpec,
    build_scene,
    corrupt_detections,
    layout_objects,
    load_scene_spec,
)
from .tracking import (
    Detection,
    Track,
    Tracklet,
    TrackletGraphTracker,
    build_graph,
    cluster_graph,
    connectivity,
    generate_tracklets,
    iou,
    smooth_box,
    track_pipeline,
    warp_box,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
