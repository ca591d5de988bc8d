"""Label-aware 3D reconstruction: segmentation masks carried through multi-view
depth fusion and labeled TSDF integration, with a synthetic scene oracle."""
from .errors import (BehindCameraError, DegenerateFragmentError, FormatError, InsufficientOverlapError,
                     InvalidInputError, LabelFuseError, NoSeedError, ParseError, PipelineError,
                     RegistrationFailedError, UnsupportedModelError)
from .estimators import FragmentRegistrar, MaskTracker, MVSLabelFusion, RGBDReconstructor, TSDFLabelFusion
from .geometry import (Intrinsics, LabeledPointCloud, MASKDFrame, RGBDFrame, RigidPose, backproject_pixel,
                       depth_to_cloud, estimate_normals, project_point, transform_point, voxel_downsample)
from .mvs import FusionParams, FusionView, filter_labeled_cloud, fuse_views, select_reconstruction_frames
from .oracle import Scene, evaluate, orbit_trajectory, render_frame, sdf, two_sphere_scene
from .pipeline import reconstruct_rgbd, run_mvs
from .registration import (RegistrationParams, RegistrationResult, refine_multiscale_icp,
                           register_pair_fgr, register_pair_ransac)
from .rgbd import Fragment, OdometryParams, make_fragments, register_fragments, rgbd_odometry
from .tracker import TrackerConfig, propagate_mask, track_sequence
from .tsdf import (LabeledMesh, TsdfVolume, extract_mesh, extract_point_cloud, extract_voxel_grid,
                   integrate_fragments, integrate_maskd, integrate_rgbd)

__version__ = "0.1.0"
