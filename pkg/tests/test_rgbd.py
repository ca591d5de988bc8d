import numpy as np
import pytest

from labelfuse.errors import InsufficientOverlapError, InvalidInputError, PipelineError
from labelfuse.geometry import Intrinsics, LabeledPointCloud, RGBDFrame, RigidPose, depth_to_cloud, rotation_angle
from labelfuse.oracle import orbit_trajectory, render_frame, two_sphere_scene
from labelfuse.registration import RegistrationParams
from labelfuse.rgbd import (Fragment, absolute_trajectory_error, make_fragments, preprocess_fragment,
                            register_fragments, rgbd_odometry)

K = Intrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)


@pytest.fixture(scope="module")
def checker_scene():
    return two_sphere_scene(checker=0.05)


def frame(scene, pose, k=K):
    c, d, lab = render_frame(scene, k, pose)
    return RGBDFrame(c, d, k), lab


# ------------------------------------------------------------------ odometry

def test_odometry_identity(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, _ = frame(checker_scene, pose)
    res = rgbd_odometry(f, f)
    assert np.linalg.norm(res.pose.translation) <= 1e-9
    assert rotation_angle(res.pose.rotation) <= 1e-7


@pytest.mark.parametrize("direction", [(1, 0, 0), (0, 1, 0), (0, 0, 1)])
def test_odometry_recovers_one_centimetre(checker_scene, direction):
    p0 = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 10.0)))
    p1 = p0 @ RigidPose(np.eye(3), 0.01 * np.asarray(direction, float))
    target, _ = frame(checker_scene, p0)
    source, _ = frame(checker_scene, p1)
    res = rgbd_odometry(target, source)
    truth = p0.inverse() @ p1
    assert np.linalg.norm(res.pose.translation - truth.translation) <= 1e-3


def test_odometry_disjoint_halves(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, _ = frame(checker_scene, pose)
    left, right = f.depth.copy(), f.depth.copy()
    left[:, 160:] = 0
    right[:, :160] = 0
    with pytest.raises(InsufficientOverlapError):
        rgbd_odometry(RGBDFrame(f.color, left, K), RGBDFrame(f.color, right, K))


def test_odometry_requires_shared_intrinsics(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, _ = frame(checker_scene, pose)
    other = RGBDFrame(f.color, f.depth, Intrinsics(301.0, 300.0, 160.0, 120.0, 320, 240))
    with pytest.raises(InvalidInputError):
        rgbd_odometry(f, other)


# ------------------------------------------------------------------ fragments

def test_single_frame_fragment(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, lab = frame(checker_scene, pose)
    frags = make_fragments([f], [lab], 1)
    assert len(frags) == 1 and frags[0].pose.allclose(RigidPose(), atol=0)
    assert frags[0].cloud.equals(depth_to_cloud(f.depth, K, None, f.color, lab))
    assert frags[0].frame_range == (0, 1)


def test_static_camera_fragments(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, lab = frame(checker_scene, pose)
    frags = make_fragments([f] * 10, [lab] * 10, 5)
    assert len(frags) == 2
    assert [fr.frame_range for fr in frags] == [(0, 5), (5, 10)]
    for fr in frags:
        assert fr.pose.allclose(RigidPose(), atol=1e-6)
    poses = register_fragments(frags, "ransac", RegistrationParams(voxel_down=0.016))
    assert np.linalg.norm((poses[0].inverse() @ poses[1]).translation) <= 1e-3


def test_make_fragments_errors(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, lab = frame(checker_scene, pose)
    with pytest.raises(InvalidInputError):
        make_fragments([f], [lab], 0)
    with pytest.raises(InvalidInputError):
        make_fragments([f, f], [lab], 1)
    blank = RGBDFrame(f.color, np.zeros_like(f.depth), K)
    with pytest.raises(PipelineError) as err:
        make_fragments([f, blank], None, 2)
    assert "[0, 2)" in str(err.value)


@pytest.mark.slow
def test_hundred_frame_orbit_fragment_poses(checker_scene):
    # desk-scale orbit where the scene fills most of the frame
    traj = list(orbit_trajectory((0.35, 0, 0), 1.6, 100, 0.0))
    frames = [frame(checker_scene, p)[0] for p in traj]
    frags = make_fragments(frames, None, 20)
    assert len(frags) == 5
    tol = 0.005 * checker_scene.diameter()
    for fr in frags:
        truth = traj[0].inverse() @ traj[fr.start]
        assert np.linalg.norm(fr.pose.translation - truth.translation) <= tol


def test_preprocess_fragment(checker_scene):
    pose = next(iter(orbit_trajectory((0.35, 0, 0), 2.0, 1, 0.0)))
    f, lab = frame(checker_scene, pose)
    frag = make_fragments([f], [lab], 1)[0]
    pre = preprocess_fragment(frag, 0.02)
    assert len(pre.cloud) <= len(frag.cloud)
    assert pre.features.shape == (len(pre.cloud), 33)
    with pytest.raises(InvalidInputError):
        preprocess_fragment(frag, 0.0)


def test_register_single_fragment():
    frag = Fragment(0, RigidPose(np.eye(3), (1, 2, 3)), LabeledPointCloud([[0, 0, 1.0]]), 0, 1, [RigidPose()])
    poses = register_fragments([frag])
    assert len(poses) == 1 and poses[0] == frag.pose
    with pytest.raises(InvalidInputError):
        register_fragments([])
    with pytest.raises(InvalidInputError):
        register_fragments([frag], method="icp")


def test_absolute_trajectory_error_is_alignment_invariant():
    rng = np.random.default_rng(0)
    truth = [RigidPose(np.eye(3), rng.normal(size=3)) for _ in range(6)]
    g = RigidPose(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float), (1.0, 2.0, 3.0))
    moved = [g @ p for p in truth]
    assert absolute_trajectory_error(moved, truth) < 1e-9
    noisy = [RigidPose(np.eye(3), p.translation + (0.01, 0, 0)) for p in truth]
    assert absolute_trajectory_error(noisy, truth) < 1e-9
    with pytest.raises(InvalidInputError):
        absolute_trajectory_error(truth[:2], truth)
