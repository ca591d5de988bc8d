"""End-to-end drivers shared by the CLI and the estimators.

On-disk frame layout (written by ``synth`` and read everywhere else):
each frame has a key such as ``000003``, with rasters ``color_<key>.png``,
``depth_<key>.png`` (16-bit millimetres), ``label_<key>.png`` and optional
``normal_<key>.npy``. The SfM ``images.txt`` names each view by its colour
file, so the key is recovered from the view name.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import Intrinsics, MASKDFrame, RGBDFrame, RigidPose
from .io.config import RunConfig
from .io.raster import read_color_image, read_depth_image, read_label_image, read_normal_image
from .io.sfm import SfmModel
from .mvs import (KEEP_ALL, KEEP_LABELED, FusionParams, FusionView, filter_labeled_cloud, fuse_views,
                  select_reconstruction_frames)
from .registration import RegistrationParams
from .rgbd import Fragment, OdometryParams, make_fragments, register_fragments
from .tsdf import TsdfVolume, extract_mesh, extract_point_cloud, extract_voxel_grid, integrate_fragments

log = logging.getLogger(__name__)

COLOR, DEPTH, LABEL, NORMAL = "color", "depth", "label", "normal"


def frame_key(name):
    """``color_000003.png`` -> ``000003``; other names keep their stem."""
    stem = os.path.splitext(os.path.basename(name))[0]
    return stem[len(COLOR) + 1:] if stem.startswith(COLOR + "_") else stem


def frame_path(directory, kind, key):
    ext = ".npy" if kind == NORMAL else ".png"
    return os.path.join(directory, f"{kind}_{key}{ext}")


def list_frame_keys(directory, kind=COLOR):
    """Sorted keys of every ``<kind>_<key>`` raster in a directory."""
    prefix, ext = kind + "_", ".npy" if kind == NORMAL else ".png"
    keys = sorted(f[len(prefix):-len(ext)] for f in os.listdir(directory)
                  if f.startswith(prefix) and f.endswith(ext))
    if not keys:
        raise InvalidInputError(f"no {kind}_*{ext} files in {directory}")
    return keys


class StageTimer:
    """Wall-clock seconds per named stage."""

    def __init__(self):
        self.times: Dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + time.perf_counter() - self.t0
                return False

        return _Stage()


# ----------------------------------------------------------------- MVS path

def fusion_params(cfg: RunConfig) -> FusionParams:
    return FusionParams(cfg.min_views, cfg.depth_tolerance, cfg.normal_tolerance, cfg.reprojection_tolerance)


def load_fusion_views(model: SfmModel, depth_dir, masks_dir, images_dir=None, normals_dir=None,
                      stride=1) -> List[FusionView]:
    """Views of the model in image-id order, keeping every ``stride``-th one."""
    ids = sorted(model.views)
    chosen = [ids[i] for i in select_reconstruction_frames(len(ids), stride)]
    images_dir = depth_dir if images_dir is None else images_dir
    views = []
    for image_id in chosen:
        view = model.views[image_id]
        key = frame_key(view.name)
        normal = None if normals_dir is None else read_normal_image(frame_path(normals_dir, NORMAL, key))
        views.append(FusionView(read_depth_image(frame_path(depth_dir, DEPTH, key)),
                                read_color_image(os.path.join(images_dir, view.name)),
                                read_label_image(frame_path(masks_dir, LABEL, key)),
                                view.pose, model.cameras[view.camera_id], normal))
    return views


def run_mvs(views: Sequence[FusionView], params: FusionParams = FusionParams(), keep_unlabeled=False):
    """Fuse views then apply the labeled-only filter unless ``keep_unlabeled``."""
    cloud = fuse_views(views, params)
    return filter_labeled_cloud(cloud, KEEP_ALL if keep_unlabeled else KEEP_LABELED)


# ----------------------------------------------------------------- RGBD path

@dataclass
class RgbdReconstruction:
    volume: TsdfVolume
    fragments: List[Fragment]
    fragment_poses: List[RigidPose]
    stage_times: Dict[str, float] = field(default_factory=dict)

    def frame_poses(self):
        """World pose (camera->world) of every frame."""
        return [g @ p for frag, g in zip(self.fragments, self.fragment_poses) for p in frag.frame_poses]

    def extract(self, kind="mesh", keep_unlabeled=False):
        if kind == "mesh":
            geom = extract_mesh(self.volume)
            if not keep_unlabeled:
                geom = geom.select_labeled()
            return geom
        geom = extract_point_cloud(self.volume) if kind == "cloud" else extract_voxel_grid(self.volume)
        return filter_labeled_cloud(geom, KEEP_ALL if keep_unlabeled else KEEP_LABELED)


def registration_params(cfg: RunConfig) -> RegistrationParams:
    return RegistrationParams(voxel_down=cfg.voxel_down, max_iterations=cfg.ransac_max_iterations,
                              confidence=cfg.ransac_confidence, fitness_floor=cfg.fitness_floor,
                              seed=cfg.seed)


def reconstruct_rgbd(frames: Sequence[RGBDFrame], masks: Optional[Sequence] = None,
                     cfg: RunConfig = RunConfig(), anchor: RigidPose = RigidPose(),
                     odometry: OdometryParams = OdometryParams()) -> RgbdReconstruction:
    """Fragments, registration and labeled TSDF integration of a whole sequence.

    ``masks`` holds label images or MASKDFrames aligned with ``frames``.
    ``anchor`` places the first camera in the world (camera->world).
    """
    frames = list(frames)
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(frames):
            raise InvalidInputError("frames and masks differ in length")
    labels = None if masks is None else [m.labels if isinstance(m, MASKDFrame) else m for m in masks]
    stage = StageTimer()
    with stage("make_fragments"):
        fragments = make_fragments(frames, labels, cfg.fragment_size, odometry)
    with stage("register_fragments"):
        poses = register_fragments(fragments, cfg.registration_method, registration_params(cfg))
    poses = [anchor @ g for g in poses]
    volume = TsdfVolume(cfg.voxel_size, cfg.truncation, cfg.block_edge)
    with stage("integrate"):
        integrate_fragments(volume, frames, labels, fragments, poses)
    log.info("rgbd stages: %s", stage.times)
    return RgbdReconstruction(volume, fragments, poses, stage.times)


def load_rgbd_frames(frames_dir, intrinsics: Intrinsics, masks_dir=None):
    """RGBD frames (and label images when ``masks_dir`` is given) in key order."""
    keys = list_frame_keys(frames_dir, COLOR)
    frames = [RGBDFrame(read_color_image(frame_path(frames_dir, COLOR, k)),
                        read_depth_image(frame_path(frames_dir, DEPTH, k)), intrinsics) for k in keys]
    masks = None
    if masks_dir is not None:
        masks = [read_label_image(frame_path(masks_dir, LABEL, k)) for k in keys]
    return keys, frames, masks


__all__ = [
    "RgbdReconstruction", "StageTimer", "fusion_params", "frame_key", "frame_path", "list_frame_keys",
    "load_fusion_views", "load_rgbd_frames", "reconstruct_rgbd", "registration_params", "run_mvs",
]
