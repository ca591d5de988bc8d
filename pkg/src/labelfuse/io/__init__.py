"""Readers and writers: sparse SfM text models, rasters, labeled PLY and run configs."""
from .config import RunConfig, load_run_config, parse_run_config
from .ply import PALETTE, read_labeled_ply, read_ply, write_labeled_ply
from .raster import (read_color_image, read_depth_image, read_label_image, read_normal_image,
                     write_color_image, write_depth_image, write_label_image, write_normal_image)
from .sfm import (SfmModel, SfmView, parse_sfm_cameras, parse_sfm_images, parse_sfm_points3d,
                  read_sfm_model, write_sfm_model)

__all__ = [
    "PALETTE", "RunConfig", "SfmModel", "SfmView", "load_run_config", "parse_run_config",
    "parse_sfm_cameras", "parse_sfm_images", "parse_sfm_points3d", "read_color_image",
    "read_depth_image", "read_label_image", "read_labeled_ply", "read_normal_image", "read_ply",
    "read_sfm_model", "write_color_image", "write_depth_image", "write_label_image",
    "write_labeled_ply", "write_normal_image", "write_sfm_model",
]
