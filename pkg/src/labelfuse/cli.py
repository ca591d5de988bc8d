"""``labelfuse`` command line: synth, track, fuse-mvs, recon-rgbd, eval, export."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .errors import LabelFuseError
from .geometry import RigidPose
from .io.config import RunConfig, load_run_config
from .io.ply import read_labeled_ply, write_labeled_ply
from .io.raster import (read_color_image, read_label_image, write_color_image, write_depth_image,
                        write_label_image, write_normal_image)
from .io.sfm import (SfmModel, SfmView, parse_sfm_cameras, parse_sfm_images, read_sfm_model,
                     rotation_to_quaternion, write_sfm_model)
from .oracle import evaluate, load_scene, render_frame
from .pipeline import (COLOR, DEPTH, LABEL, NORMAL, StageTimer, frame_path, fusion_params, list_frame_keys,
                       load_fusion_views, load_rgbd_frames, reconstruct_rgbd, run_mvs)
from .tracker import TrackerConfig, track_sequence

log = logging.getLogger("labelfuse")

SEED_ENV = "LABELFUSE_SEED"

# subcommand -> owning module, reported in error context
_OWNER = {"synth": "scene-oracle", "track": "mask-tracker", "fuse-mvs": "mvs-fusion",
          "recon-rgbd": "rgbd-pipeline", "eval": "scene-oracle", "export": "io-ingest"}


# ----------------------------------------------------------------- manifest

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_checksums(paths) -> Dict[str, str]:
    """SHA-256 of every input file; directories contribute each regular file inside.

    Run manifests found in input directories are skipped: they record
    timings and are never read by a stage.
    """
    out = {}
    for p in paths:
        if p is None or not os.path.exists(p):
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full) and not name.endswith("manifest.json"):
                    out[full] = _sha256(full)
        else:
            out[p] = _sha256(p)
    return out


def atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, command, config, inputs, seed, stage_times, outputs):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": input_checksums(inputs),
        "seed": seed,
        "stage_times": {k: round(v, 6) for k, v in stage_times.items()},
        "outputs": sorted(outputs),
    }
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def _manifest_path(out):
    """Directory outputs get ``manifest.json`` inside, file outputs a sibling ``.manifest.json``."""
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return os.path.splitext(out)[0] + ".manifest.json"


def resolve_seed(cli_seed: Optional[int], config_seed: int = 0) -> int:
    """``--seed`` beats ``LABELFUSE_SEED``, which beats the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise LabelFuseError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config_seed


# ----------------------------------------------------------------- subcommands

def cmd_synth(args, stage):
    cfg = load_scene(args.scene)
    rng = np.random.default_rng(args.seed)
    k = cfg.intrinsics
    os.makedirs(args.out, exist_ok=True)
    outputs, views = [], {}
    with stage("render"):
        for i, pose in enumerate(cfg.trajectory(args.frames)):
            key = f"{i:06d}"
            color, depth, labels, normals = render_frame(cfg.scene, k, pose, args.depth_noise, rng,
                                                         with_normals=True)
            paths = [frame_path(args.out, COLOR, key), frame_path(args.out, DEPTH, key),
                     frame_path(args.out, LABEL, key)]
            write_color_image(color, paths[0])
            write_depth_image(depth, paths[1])
            write_label_image(labels, paths[2])
            if args.normals:
                paths.append(frame_path(args.out, NORMAL, key))
                write_normal_image(normals, paths[3])
            outputs += paths
            views[i + 1] = SfmView(pose.inverse(), 1, os.path.basename(paths[0]))
    model = SfmModel({1: k}, views)
    write_sfm_model(model, args.out)
    outputs += [os.path.join(args.out, n) for n in ("cameras.txt", "images.txt", "points3D.txt")]
    config = {"scene": args.scene, "frames": args.frames, "depth_noise": args.depth_noise,
              "normals": args.normals}
    return config, [args.scene], outputs, args.out


def cmd_track(args, stage):
    keys = list_frame_keys(args.images, COLOR)
    images = [read_color_image(frame_path(args.images, COLOR, k)) for k in keys]
    seeds = {i: read_label_image(frame_path(args.seeds, LABEL, k)) for i, k in enumerate(keys)
             if os.path.exists(frame_path(args.seeds, LABEL, k))}
    cfg = TrackerConfig(args.search_radius, args.color_threshold, args.min_area)
    with stage("track"):
        masks = track_sequence(images, seeds, cfg)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for k, m in zip(keys, masks):
        path = frame_path(args.out, LABEL, k)
        write_label_image(m, path)
        outputs.append(path)
    config = {"search_radius": cfg.search_radius, "color_threshold": cfg.color_threshold,
              "min_area": cfg.min_area, "seed_frames": sorted(seeds)}
    return config, [args.images, args.seeds], outputs, args.out


def _run_config(args, **overrides) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg.replace(**overrides)


def cmd_fuse_mvs(args, stage):
    cfg = _run_config(args, stride=args.stride, keep_unlabeled=args.keep_unlabeled or None)
    with stage("load"):
        model = read_sfm_model(args.model)
        views = load_fusion_views(model, args.depth, args.masks, args.images or args.model, args.normals,
                                  cfg.stride)
    with stage("fuse"):
        cloud = run_mvs(views, fusion_params(cfg), cfg.keep_unlabeled)
    with stage("write"):
        write_labeled_ply(cloud, args.out, binary=args.binary)
    inputs = [args.model, args.depth, args.masks, args.images, args.normals, args.config]
    return cfg.as_dict(), inputs, [args.out], args.out


def _read_intrinsics_and_anchor(frames_dir):
    with open(os.path.join(frames_dir, "cameras.txt")) as fh:
        cameras = parse_sfm_cameras(fh, os.path.join(frames_dir, "cameras.txt"))
    k = cameras[min(cameras)]
    anchor = RigidPose()
    images = os.path.join(frames_dir, "images.txt")
    if os.path.exists(images):
        with open(images) as fh:
            views = parse_sfm_images(fh, images)
        if views:
            anchor = views[min(views)].pose.inverse()
    return k, anchor


def format_fragment_poses(poses: List[RigidPose]) -> str:
    lines = ["# Fragment poses, fragment frame -> world.",
             "# FRAGMENT_ID QW QX QY QZ TX TY TZ"]
    for i, p in enumerate(poses):
        values = [*rotation_to_quaternion(p.rotation), *p.translation]
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def cmd_recon_rgbd(args, stage):
    seed = args.seed
    cfg = _run_config(args, voxel_size=args.voxel_size, truncation=args.truncation, extract=args.extract,
                      fragment_size=args.fragment_size, registration_method=args.method,
                      keep_unlabeled=args.keep_unlabeled or None)
    cfg = cfg.replace(seed=resolve_seed(seed, cfg.seed))
    args.seed = cfg.seed
    with stage("load"):
        k, anchor = _read_intrinsics_and_anchor(args.frames)
        _, frames, masks = load_rgbd_frames(args.frames, k, args.masks)
    recon = reconstruct_rgbd(frames, masks, cfg, anchor)
    stage.times.update(recon.stage_times)
    os.makedirs(args.out, exist_ok=True)
    with stage("extract"):
        geom = recon.extract(cfg.extract, cfg.keep_unlabeled)
    ply = os.path.join(args.out, f"{cfg.extract}.ply")
    poses = os.path.join(args.out, "poses.txt")
    with stage("write"):
        write_labeled_ply(geom, ply, binary=args.binary)
        atomic_write(poses, format_fragment_poses(recon.fragment_poses).encode())
    return cfg.as_dict(), [args.frames, args.masks, args.config], [ply, poses], args.out


def cmd_eval(args, stage):
    scene = load_scene(args.scene).scene
    with stage("evaluate"):
        report = evaluate(read_labeled_ply(args.pred), scene).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    outputs = []
    if args.out:
        atomic_write(args.out, text.encode())
        outputs.append(args.out)
    sys.stdout.write(text)
    return {"pred": args.pred, "scene": args.scene}, [args.pred, args.scene], outputs, args.out


def cmd_export(args, stage):
    geom = read_labeled_ply(args.input)
    with stage("select"):
        labels = geom.labels
        keep = np.ones(len(labels), dtype=bool)
        if args.labels:
            keep &= np.isin(labels, args.labels)
        if not args.keep_unlabeled:
            keep &= labels != 0
        geom = geom.select(keep)
    write_labeled_ply(geom, args.out, binary=args.format == "binary")
    config = {"format": args.format, "labels": args.labels, "keep_unlabeled": args.keep_unlabeled}
    return config, [args.input], [args.out], args.out


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labelfuse", description=__doc__)
    p.add_argument("--version", action="version", version=f"labelfuse {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/OpenCV worker threads (default: library default)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"RNG seed; overrides {SEED_ENV} and the config file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--no-manifest", action="store_true", help="skip writing the run manifest")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="render a synthetic labeled RGBD sequence and its SfM model")
    s.add_argument("--scene", required=True, help="scene file, or 'two-spheres' for the built-in fixture")
    s.add_argument("--frames", type=int, required=True, help="number of orbit frames")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--depth-noise", type=float, default=0.0, help="Gaussian depth noise sigma in meters")
    s.add_argument("--normals", action="store_true", help="also write camera-frame normal maps (.npy)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("track", help="propagate seed masks through an image sequence")
    s.add_argument("--images", required=True, help="directory of color_<key>.png frames")
    s.add_argument("--seeds", required=True, help="directory of label_<key>.png seeds (frame 0 required)")
    s.add_argument("--out", required=True, help="output directory for label_<key>.png masks")
    s.add_argument("--search-radius", type=int, default=8, help="max shift in pixels per frame")
    s.add_argument("--color-threshold", type=float, default=0.1, help="color agreement threshold (0..1)")
    s.add_argument("--min-area", type=int, default=10, help="labels smaller than this are dropped")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("fuse-mvs", help="fuse calibrated depth maps with color and label channels")
    s.add_argument("--model", required=True, help="SfM text model directory (cameras/images/points3D)")
    s.add_argument("--depth", required=True, help="directory of depth_<key>.png (16-bit mm)")
    s.add_argument("--masks", required=True, help="directory of label_<key>.png")
    s.add_argument("--normals", default=None, help="directory of normal_<key>.npy (enables the normal check)")
    s.add_argument("--images", default=None, help="directory holding the color images (default: --model)")
    s.add_argument("--stride", type=int, default=None, help="use every x-th view")
    s.add_argument("--config", default=None, help="run config file (key = value)")
    s.add_argument("--keep-unlabeled", action="store_true", help="keep points without a label")
    s.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    s.add_argument("--out", required=True, help="output PLY path")
    s.set_defaults(func=cmd_fuse_mvs)

    s = sub.add_parser("recon-rgbd", help="fragments, registration and labeled TSDF reconstruction")
    s.add_argument("--frames", required=True, help="directory of color/depth rasters plus cameras.txt")
    s.add_argument("--masks", default=None, help="directory of label_<key>.png")
    s.add_argument("--config", default=None, help="run config file (key = value)")
    s.add_argument("--voxel-size", type=float, default=None, help="TSDF voxel size in meters")
    s.add_argument("--truncation", type=float, default=None, help="truncation distance in meters")
    s.add_argument("--fragment-size", type=int, default=None, help="frames per fragment")
    s.add_argument("--method", choices=("ransac", "fgr"), default=None, help="global registration method")
    s.add_argument("--extract", choices=("cloud", "mesh", "voxel"), default=None, help="output geometry")
    s.add_argument("--keep-unlabeled", action="store_true", help="keep unlabeled geometry")
    s.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    s.add_argument("--out", required=True, help="output directory (geometry PLY, poses.txt, manifest)")
    s.set_defaults(func=cmd_recon_rgbd)

    s = sub.add_parser("eval", help="score a labeled PLY against a scene")
    s.add_argument("--pred", required=True, help="labeled PLY (cloud or mesh)")
    s.add_argument("--scene", required=True, help="scene file, or 'two-spheres'")
    s.add_argument("--out", default=None, help="also write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="convert or filter a labeled PLY")
    s.add_argument("--in", dest="input", required=True, help="input PLY")
    s.add_argument("--out", required=True, help="output PLY")
    s.add_argument("--format", choices=("ascii", "binary"), default="binary", help="output encoding")
    s.add_argument("--labels", type=int, nargs="+", default=None, help="keep only these label ids")
    s.add_argument("--keep-unlabeled", action="store_true", help="keep label-0 elements")
    s.set_defaults(func=cmd_export)
    return p


def run_subcommand(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        sys.stderr.write("labelfuse: error: --threads must be >= 1\n")
        return 2
    stage = StageTimer()
    try:
        if args.command != "recon-rgbd":
            args.seed = resolve_seed(args.seed)
        from threadpoolctl import threadpool_limits
        import cv2
        if args.threads is not None:
            cv2.setNumThreads(args.threads)
        with threadpool_limits(limits=args.threads):
            t0 = time.perf_counter()
            config, inputs, outputs, out = args.func(args, stage)
            stage.times["total"] = time.perf_counter() - t0
        if not args.no_manifest and out:
            write_manifest(_manifest_path(out), args.command, config, inputs, args.seed, stage.times, outputs)
    except (LabelFuseError, OSError, ValueError) as exc:
        sys.stderr.write(f"labelfuse: error: module={_OWNER[args.command]} operation={args.command} "
                         f"cause={type(exc).__name__}: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
