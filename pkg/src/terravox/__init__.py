"""Sparse semantic voxel mapping with range-priority fusion.

Submodules:
    geometry    rigid transforms, pinhole projection, backprojection, plane fit
    semantics   ontologies, sparse label masks, remapping, IoU machinery
    voxelmap    the sparse fused map, fusion strategies, water injection
    simulator   deterministic synthetic scenes, sensors, scenario runner
    evaluation  hindsight ground truth and fusion quality metrics
    cli         the terravox command
"""

from .errors import (ConfigurationError, CorruptMaskError,
                     ImplausibleSurfaceError, InsufficientDataError,
                     InvalidMeasurementError, TerravoxError)
from .geometry import (CameraIntrinsics, Plane, Pose, SemanticCloud,
                       backproject_cloud, fit_water_plane, nearest_pixel,
                       project_to_image, transform_point)
from .semantics import (ONTOLOGY_6, ONTOLOGY_10, ConfusionMatrix, Ontology,
                        RemapTable, SparseLabelMask, accumulate_confusion,
                        class_weights, dataset_stats, iou_per_class, miou,
                        remap_mask, threshold_prediction)
from .voxelmap import (STRATEGIES, FusionStats, MapSnapshot, Voxel, VoxelMap,
                       argmax_class, fuse_point_average, fuse_point_bayesian,
                       fuse_point_range_based, fuse_point_vote)
from .simulator import (CameraSpec, LidarSpec, Scene, ScenarioTimeline,
                        SensorRig, StereoSpec, Trajectory, load_rig,
                        load_scene, load_trajectory, raycast_lidar,
                        render_semantic_image, run_scenario, simulate_stereo)
from .evaluation import (FREE_CELL, FusionReport, HindsightMap, VoxelIoU,
                         bleed_correction_rate, build_hindsight_map,
                         evaluate_timeline, map_iou, popup_hazard_keys,
                         popup_latency, reverse_stability)
from .cli import RunConfig, load_timeline, save_timeline

__version__ = "0.1.0"

__all__ = [
    "TerravoxError", "ConfigurationError", "CorruptMaskError",
    "ImplausibleSurfaceError", "InsufficientDataError", "InvalidMeasurementError",
    "CameraIntrinsics", "Plane", "Pose", "SemanticCloud", "backproject_cloud",
    "fit_water_plane", "nearest_pixel", "project_to_image", "transform_point",
    "ONTOLOGY_6", "ONTOLOGY_10", "ConfusionMatrix", "Ontology", "RemapTable",
    "SparseLabelMask", "accumulate_confusion", "class_weights", "dataset_stats",
    "iou_per_class", "miou", "remap_mask", "threshold_prediction",
    "STRATEGIES", "FusionStats", "MapSnapshot", "Voxel", "VoxelMap",
    "argmax_class", "fuse_point_average", "fuse_point_bayesian",
    "fuse_point_range_based", "fuse_point_vote",
    "CameraSpec", "LidarSpec", "Scene", "ScenarioTimeline", "SensorRig",
    "StereoSpec", "Trajectory", "load_rig", "load_scene", "load_trajectory",
    "raycast_lidar", "render_semantic_image", "run_scenario", "simulate_stereo",
    "FREE_CELL", "FusionReport", "HindsightMap", "VoxelIoU",
    "bleed_correction_rate", "build_hindsight_map", "evaluate_timeline",
    "map_iou", "popup_hazard_keys", "popup_latency", "reverse_stability",
    "RunConfig", "load_timeline", "save_timeline",
    "__version__",
]
