"""Depth, label and colour rasters on disk.

Depth is stored as 16-bit millimetres (0 = invalid) and handled in metres in
memory. Label rasters hold integer ids directly.
"""
import os

import cv2
import numpy as np

from ..errors import FormatError, InvalidInputError
from ..geometry import check_color, check_depth, check_labels

MAX_DEPTH_M = 65.535


def _imread(path):
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        raise FormatError(f"{path}: unreadable raster")
    return img


def _imwrite(path, img):
    if not cv2.imwrite(os.fspath(path), img):
        raise OSError(f"could not write {path}")


def read_depth_image(path):
    img = _imread(path)
    if img.ndim != 2:
        raise FormatError(f"{path}: depth raster must be single-channel")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: depth raster must be 16-bit, got {img.dtype}")
    return img.astype(np.float64) / 1000.0


def write_depth_image(depth, path):
    d = check_depth(depth)
    if d.max(initial=0.0) > MAX_DEPTH_M:
        raise InvalidInputError(f"depth above {MAX_DEPTH_M} m cannot be stored in 16-bit millimetres")
    _imwrite(path, np.round(d * 1000.0).astype(np.uint16))


def read_label_image(path):
    img = _imread(path)
    if img.ndim != 2:
        raise FormatError(f"{path}: label raster must be single-channel")
    if img.dtype not in (np.uint8, np.uint16):
        raise FormatError(f"{path}: label raster must be 8- or 16-bit, got {img.dtype}")
    return img.astype(np.uint16)


def write_label_image(labels, path):
    _imwrite(path, check_labels(labels))


def read_color_image(path):
    img = _imread(path)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError(f"{path}: colour raster must be 8-bit RGB")
    return np.ascontiguousarray(img[:, :, ::-1])


def write_color_image(color, path):
    _imwrite(path, np.ascontiguousarray(check_color(color)[:, :, ::-1]))


def read_normal_image(path):
    """Normal maps are float32 ``.npy`` arrays (H, W, 3); zero rows are invalid."""
    n = np.load(path)
    if n.ndim != 3 or n.shape[2] != 3:
        raise FormatError(f"{path}: normal map must be HxWx3")
    return n.astype(np.float64)


def write_normal_image(normals, path):
    np.save(path, np.asarray(normals, dtype=np.float32))
