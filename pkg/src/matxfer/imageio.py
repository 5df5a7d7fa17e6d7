"""Material pack, label map and photo I/O.

A material pack is a directory with ``albedo.png``, ``normal.png``,
``roughness.png`` and ``specular.png`` at equal square power-of-two sizes,
8- or 16-bit.  Albedo and specular are sRGB-encoded in files and linear in
memory (exact IEC 61966-2-1 piecewise curve); normals use the tangent-space
convention of :func:`matxfer.render.decode_normal` with the blue channel
derived on save; roughness is stored linearly in the red/gray channel.

Target photographs are kept in display space (no linearization): losses
compare gamma-encoded renders against photos as stored.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .render import MaterialMaps

MAP_NAMES = ("albedo.png", "normal.png", "roughness.png", "specular.png")
UNLABELED = 255


class PackError(ValueError):
    """A material pack or image file is missing or malformed."""


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1.0 / 2.4) - 0.055)


def _read_png(path) -> np.ndarray:
    """Decode to float64 in [0,1], RGB channel order, shape (H,W,C) or (H,W)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise PackError(f"cannot read image file {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise PackError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB if raw.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    return raw.astype(np.float64) / scale


def _write_png(path, values: np.ndarray, bit_depth: int = 8) -> None:
    """Encode float values in [0,1]; (H,W) or (H,W,3), RGB order."""
    if bit_depth == 8:
        q = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        q = np.rint(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), q):
        raise PackError(f"cannot write image file {path}")


def _check_square_pow2(shape, path):
    h, w = shape[:2]
    if h != w or h == 0 or (h & (h - 1)):
        raise PackError(f"{path}: expected square power-of-two image, got {w}x{h}")


def load_pack(directory, dtype=None) -> MaterialMaps:
    """Load a material pack directory into linear-space maps."""
    if dtype is None:
        dtype = ad.get_default_dtype()
    paths = {}
    for name in MAP_NAMES:
        p = os.path.join(directory, name)
        if not os.path.isfile(p):
            raise PackError(f"material pack {directory} is missing {name}")
        paths[name] = p

    images = {}
    size = None
    for name, p in paths.items():
        img = _read_png(p)
        _check_square_pow2(img.shape, p)
        if size is None:
            size = img.shape[0]
        elif img.shape[0] != size:
            raise PackError(
                f"{p}: size {img.shape[0]} differs from the pack's {size}")
        images[name] = img

    def rgb(name):
        img = images[name]
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        return img.transpose(2, 0, 1)

    albedo = srgb_to_linear(rgb("albedo.png"))
    specular = srgb_to_linear(rgb("specular.png"))
    normal_rgb = rgb("normal.png")
    normal_xy = 2.0 * normal_rgb[:2] - 1.0
    rough_img = images["roughness.png"]
    if rough_img.ndim == 3:
        rough_img = rough_img[:, :, 0]
    roughness = rough_img[None]

    return MaterialMaps(
        Tensor(albedo.astype(dtype), dtype=dtype),
        Tensor(normal_xy.astype(dtype), dtype=dtype),
        Tensor(roughness.astype(dtype), dtype=dtype),
        Tensor(specular.astype(dtype), dtype=dtype),
    )


def save_pack(maps: MaterialMaps, directory, bit_depth: int = 8) -> None:
    """Write a material pack; the normal blue channel is recomputed."""
    os.makedirs(directory, exist_ok=True)
    albedo = linear_to_srgb(maps.albedo.data).transpose(1, 2, 0)
    specular = linear_to_srgb(maps.specular.data).transpose(1, 2, 0)
    xy = np.clip(maps.normal_xy.data.astype(np.float64), -1.0, 1.0)
    z = np.sqrt(np.maximum(0.0, 1.0 - xy[0] ** 2 - xy[1] ** 2))
    normal = np.stack([(xy[0] + 1) / 2, (xy[1] + 1) / 2, (z + 1) / 2], axis=-1)
    rough = np.clip(maps.roughness.data[0].astype(np.float64), 0.0, 1.0)

    _write_png(os.path.join(directory, "albedo.png"), albedo, bit_depth)
    _write_png(os.path.join(directory, "normal.png"), normal, bit_depth)
    _write_png(os.path.join(directory, "roughness.png"), rough, bit_depth)
    _write_png(os.path.join(directory, "specular.png"), specular, bit_depth)


def load_labels(path, expect_size: int | None = None) -> np.ndarray:
    """Single-channel 8-bit label map; value 255 means unlabeled."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise PackError(f"cannot read label map {path}")
    if raw.ndim == 3:
        if not (raw[:, :, 0] == raw[:, :, 1]).all() or not (raw[:, :, 0] == raw[:, :, 2]).all():
            raise PackError(f"{path}: label map must be single-channel")
        raw = raw[:, :, 0]
    if raw.dtype != np.uint8:
        raise PackError(f"{path}: label maps must be 8-bit, got {raw.dtype}")
    if expect_size is not None and raw.shape != (expect_size, expect_size):
        raise PackError(
            f"{path}: label map is {raw.shape[1]}x{raw.shape[0]}, expected "
            f"{expect_size}x{expect_size}")
    return raw.copy()


def save_labels(labels: np.ndarray, path) -> None:
    if not cv2.imwrite(str(path), labels.astype(np.uint8)):
        raise PackError(f"cannot write label map {path}")


def save_render(image, path) -> None:
    """Write a display-space render (3,H,W) tensor or array as 8-bit PNG."""
    arr = image.data if isinstance(image, Tensor) else image
    _write_png(path, np.asarray(arr, np.float64).transpose(1, 2, 0), 8)


def load_photo(path, working_res: int | None = None, labels_path=None,
               dtype=None):
    """Load a target photograph (and optional labels) in display space.

    Photos larger than ``working_res`` are center-cropped to the largest
    centered multiple of it and box-downscaled; labels follow by nearest
    neighbor.  Smaller photos are accepted as-is when their sides are
    divisible by 8.  Returns ``(image (3,h,w) float in [0,1], labels or None)``.
    """
    if dtype is None:
        dtype = ad.get_default_dtype()
    img = _read_png(path)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    img = img[:, :, :3]
    labels = load_labels(labels_path) if labels_path else None
    if labels is not None and labels.shape != img.shape[:2]:
        raise PackError(
            f"{labels_path}: label map {labels.shape} does not match photo "
            f"{img.shape[:2]}")

    h, w = img.shape[:2]
    if working_res is not None and min(h, w) > working_res:
        factor = min(h, w) // working_res
        crop = factor * working_res
        y0, x0 = (h - crop) // 2, (w - crop) // 2
        img = img[y0:y0 + crop, x0:x0 + crop]
        img = img.reshape(working_res, factor, working_res, factor, 3).mean(axis=(1, 3))
        if labels is not None:
            labels = labels[y0:y0 + crop:factor, x0:x0 + crop:factor]
    h, w = img.shape[:2]
    if h % 8 or w % 8:
        raise PackError(f"{path}: photo size {w}x{h} is not divisible by 8")
    return img.transpose(2, 0, 1).astype(dtype), labels
