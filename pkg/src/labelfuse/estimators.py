"""Estimator-style wrappers (``fit`` / ``transform`` / ``get_params``).

The functional API stays the source of truth; these classes only hold
hyper-parameters, validate them at fit time and keep fitted state in
trailing-underscore attributes the way scikit-learn estimators do.
"""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidInputError
from .geometry import RigidPose
from .io.config import RunConfig
from .mvs import KEEP_ALL, KEEP_LABELED, FusionParams, FusionView, filter_labeled_cloud, fuse_views
from .pipeline import reconstruct_rgbd
from .registration import RegistrationParams
from .rgbd import Fragment, OdometryParams, register_fragments
from .tracker import TrackerConfig, track_sequence
from .tsdf import TsdfVolume, extract_mesh, extract_point_cloud, extract_voxel_grid

_EXTRACTORS = {"mesh": extract_mesh, "cloud": extract_point_cloud, "voxel": extract_voxel_grid}


class MaskTracker(BaseEstimator):
    """Propagate seed masks through an image sequence.

    ``fit(images, seed_masks)`` tracks the whole sequence and stores the
    per-frame label images in ``masks_``.
    """

    def __init__(self, search_radius=8, color_threshold=0.1, min_area=10):
        self.search_radius = search_radius
        self.color_threshold = color_threshold
        self.min_area = min_area

    def _config(self):
        return TrackerConfig(self.search_radius, self.color_threshold, self.min_area)

    def fit(self, images: Sequence[np.ndarray], seed_masks: Dict[int, np.ndarray]):
        self.masks_ = track_sequence(images, seed_masks, self._config())
        self.n_frames_ = len(self.masks_)
        return self

    def predict(self, images, seed_masks):
        return self.fit(images, seed_masks).masks_


class MVSLabelFusion(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Multi-view depth fusion with aligned colour and label channels."""

    def __init__(self, min_views=2, depth_tolerance=0.01, normal_tolerance=25.0,
                 reprojection_tolerance=1.0, keep_unlabeled=False):
        self.min_views = min_views
        self.depth_tolerance = depth_tolerance
        self.normal_tolerance = normal_tolerance
        self.reprojection_tolerance = reprojection_tolerance
        self.keep_unlabeled = keep_unlabeled

    def fit(self, views: Sequence[FusionView], y=None):
        self.params_ = FusionParams(self.min_views, self.depth_tolerance, self.normal_tolerance,
                                    self.reprojection_tolerance)
        self.raw_cloud_ = fuse_views(views, self.params_)
        self.cloud_ = filter_labeled_cloud(self.raw_cloud_, KEEP_ALL if self.keep_unlabeled else KEEP_LABELED)
        return self

    def transform(self, views=None):
        """Fused cloud; fits on ``views`` first when they are given."""
        if views is not None:
            self.fit(views)
        check_is_fitted(self, "cloud_")
        return self.cloud_


class TSDFLabelFusion(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Labeled TSDF integration of posed frames.

    ``fit(frames, poses, masks)`` integrates into a fresh volume and
    ``partial_fit`` keeps adding to the current one. Poses are
    camera->world. ``transform()`` extracts the geometry named by ``extract``.
    """

    def __init__(self, voxel_size=0.008, truncation=None, block_edge=16, max_weight=255, extract="mesh"):
        self.voxel_size = voxel_size
        self.truncation = truncation
        self.block_edge = block_edge
        self.max_weight = max_weight
        self.extract = extract

    def partial_fit(self, frames, poses: Sequence[RigidPose], masks=None):
        if self.extract not in _EXTRACTORS:
            raise InvalidInputError(f"extract must be one of {sorted(_EXTRACTORS)}")
        if len(frames) != len(poses) or (masks is not None and len(masks) != len(frames)):
            raise InvalidInputError("frames, poses and masks must be parallel")
        if not hasattr(self, "volume_"):
            self.volume_ = TsdfVolume(self.voxel_size, self.truncation, self.block_edge, self.max_weight)
            self.n_frames_ = 0
        for i, (frame, pose) in enumerate(zip(frames, poses)):
            labels = None if masks is None else getattr(masks[i], "labels", masks[i])
            self.volume_.integrate(frame.depth, frame.intrinsics, pose, color=frame.color, labels=labels)
        self.n_frames_ += len(frames)
        return self

    def fit(self, frames, poses, masks=None):
        for name in ("volume_", "n_frames_"):
            self.__dict__.pop(name, None)
        return self.partial_fit(frames, poses, masks)

    def transform(self, X=None):
        check_is_fitted(self, "volume_")
        return _EXTRACTORS[self.extract](self.volume_)


class FragmentRegistrar(BaseEstimator):
    """Pairwise fragment registration chained into world poses (``poses_``)."""

    def __init__(self, method="ransac", voxel_down=0.016, max_iterations=100000, confidence=0.999,
                 fitness_floor=0.1, seed=0):
        self.method = method
        self.voxel_down = voxel_down
        self.max_iterations = max_iterations
        self.confidence = confidence
        self.fitness_floor = fitness_floor
        self.seed = seed

    def fit(self, fragments: Sequence[Fragment], y=None):
        params = RegistrationParams(voxel_down=self.voxel_down, max_iterations=self.max_iterations,
                                    confidence=self.confidence, fitness_floor=self.fitness_floor,
                                    seed=self.seed)
        self.poses_ = register_fragments(fragments, self.method, params)
        return self

    def predict(self, fragments):
        return self.fit(fragments).poses_


class RGBDReconstructor(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Whole RGBD path: fragments, registration and labeled TSDF fusion."""

    def __init__(self, fragment_size=50, voxel_size=0.008, truncation=None, registration_method="ransac",
                 voxel_down=None, seed=0, extract="mesh", keep_unlabeled=False):
        self.fragment_size = fragment_size
        self.voxel_size = voxel_size
        self.truncation = truncation
        self.registration_method = registration_method
        self.voxel_down = voxel_down
        self.seed = seed
        self.extract = extract
        self.keep_unlabeled = keep_unlabeled

    def fit(self, frames, masks=None, anchor: Optional[RigidPose] = None):
        cfg = RunConfig(fragment_size=self.fragment_size, voxel_size=self.voxel_size,
                        truncation=self.truncation, registration_method=self.registration_method,
                        voxel_down=self.voxel_down, seed=self.seed, extract=self.extract,
                        keep_unlabeled=self.keep_unlabeled)
        self.reconstruction_ = reconstruct_rgbd(frames, masks, cfg, anchor or RigidPose(), OdometryParams())
        self.fragment_poses_ = self.reconstruction_.fragment_poses
        return self

    def transform(self, X=None):
        check_is_fitted(self, "reconstruction_")
        return self.reconstruction_.extract(self.extract, self.keep_unlabeled)


__all__ = ["FragmentRegistrar", "MVSLabelFusion", "MaskTracker", "RGBDReconstructor", "TSDFLabelFusion"]
