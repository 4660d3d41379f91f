"""Deterministic geometry, fusion, loss, and evaluation machinery for
multi-sensor 3D object detection.

The package covers everything around the learned parts of a detector:
calibrated projection, BEV voxelization, ground estimation, sparse depth
images and pseudo-points, continuous image-to-BEV fusion, rotated-box IoU,
oriented NMS and ROI extraction, refinement encodings, losses, and 11-point
AP evaluation.  Feature extraction itself is pluggable; deterministic
analytic stubs and an oracle detector make the whole pipeline runnable and
testable without trained weights.
"""

from .depthmap import (
    DenseDepthImage,
    SparseDepthImage,
    build_sparse_depth_image,
    densify_pseudo_points,
)
from .errors import ConfigError, GenerationError, ParseError, PipelineError
from .evaluation import (
    ApResult,
    Difficulty,
    EvalConfig,
    GroundTruthObject,
    ap_11point,
    evaluate_frames,
    match_detections,
)
from .fusion import (
    CorrespondenceMap,
    FeatureMap,
    FusionMLP,
    aggregate_multiscale,
    build_correspondence_map,
    continuous_fuse,
)
from .geometry import (
    Box2D,
    Box3D,
    CalibrationProfile,
    OrientedBoxBEV,
    Point3D,
    project_points_to_image,
    transform_points_to_camera,
    transform_points_to_ego,
    unproject_pixels,
    wrap_angle_pi,
)
from .ground import GroundHeightMap, estimate_ground_baseline, make_ground_relative, restore_ground_height
from .iou import iou3d_pairs, rotated_iou_bev, rotated_iou_matrix, rotated_iou_pairs
from .kitti_io import (
    LabelRecord,
    read_calibration,
    read_labels,
    read_point_cloud,
    write_calibration,
    write_labels,
    write_point_cloud,
)
from .losses import LossWeights, assign_targets, smooth_l1, total_loss
from .nms import Detection, oriented_nms
from .pipeline import OracleDetector, PipelineConfig, PipelineResult, run_frames, run_pipeline
from .roi import (
    OrientationAnchor,
    OrientedROI,
    RoiFeatures,
    assign_orientation_anchor,
    decode_refinement_offsets,
    encode_refinement_offsets,
    extract_oriented_roi,
)
from .scene import Frame, SceneSpec, augment_frame, load_frame, save_frame, synth_scene
from .stubs import stub_bev_map, stub_feature_maps, stub_image_maps
from .voxelize import BevTensor, VoxelGridConfig, voxelize_trilinear

__version__ = "0.1.0"
