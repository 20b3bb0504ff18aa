"""Stereo pair to coarse-to-fine octree occupancy, with a voxel-aligned cost volume."""

from .geometry import (CameraModel, DisparityPlan, GridSpec, OccupancyPyramid, backproject_depth,
                       build_pyramid, camera_to_grid, depth_to_occupancy, even_plan, full_plan,
                       pipeline_voxelize, plan_disparity_levels, voxelize)
from .metrics import LossWeights, chamfer_distance, eval_iou, soft_iou_loss, total_loss
from .network import DecoderConfig, NetConfig, OctreeDecoder, StereoVoxNet, build_cost_volume
from .macs import count_macs, count_parameters
from .adaptive import ExitState, decode_to_level, next_exit_level, run_controller
from .config import Config, load_config, full_scale_config, save_config

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "DisparityPlan", "GridSpec", "OccupancyPyramid", "backproject_depth",
    "build_pyramid", "camera_to_grid", "depth_to_occupancy", "even_plan", "full_plan",
    "pipeline_voxelize", "plan_disparity_levels", "voxelize",
    "LossWeights", "chamfer_distance", "eval_iou", "soft_iou_loss", "total_loss",
    "DecoderConfig", "NetConfig", "OctreeDecoder", "StereoVoxNet", "build_cost_volume",
    "count_macs", "count_parameters",
    "ExitState", "decode_to_level", "next_exit_level", "run_controller",
    "Config", "load_config", "full_scale_config", "save_config",
]
