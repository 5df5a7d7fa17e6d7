"""Deterministic synthetic fixtures: procedural packs, targets, label maps.

Everything here is seeded through the documented init stream, so identical
seeds produce byte-identical assets.  The fixtures are sized for desk-scale
runs and drive both the CLI walkthrough and the acceptance suite.
"""

from __future__ import annotations

import os

import numpy as np

from . import imageio
from .autodiff import Tensor
from .render import MaterialMaps
from .rng import Stream, STREAM_INIT

RED_TARGET = (0.82, 0.06, 0.05)
BLUE_TARGET = (0.10, 0.12, 0.72)

_DEMO_STREAM_GRAY = 11
_DEMO_STREAM_BRICK = 12
_DEMO_STREAM_NOISE = 13


def _maps(albedo, normal_xy, roughness, specular) -> MaterialMaps:
    return MaterialMaps(Tensor(albedo.astype(np.float32)),
                        Tensor(normal_xy.astype(np.float32)),
                        Tensor(roughness.astype(np.float32)),
                        Tensor(specular.astype(np.float32)))


def gray_pack(resolution: int = 64) -> MaterialMaps:
    """Flat mid-gray material."""
    n = resolution
    return _maps(np.full((3, n, n), 0.5), np.zeros((2, n, n)),
                 np.full((1, n, n), 0.6), np.full((3, n, n), 0.04))


def split_labels(resolution: int = 64) -> np.ndarray:
    """Left half label 0, right half label 1."""
    labels = np.zeros((resolution, resolution), np.uint8)
    labels[:, resolution // 2:] = 1
    return labels


def _toroidal_value_noise(stream: Stream, resolution: int, cells: int) -> np.ndarray:
    """Smooth tileable noise in [0,1]: a coarse grid interpolated toroidally."""
    grid = stream.uniforms(cells * cells).reshape(cells, cells)
    ys = np.arange(resolution) * cells / resolution
    y0 = ys.astype(int)
    fy = ys - y0
    y1 = (y0 + 1) % cells
    xs, x0, fx, x1 = ys, y0, fy, y1
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x1)]
    c = grid[np.ix_(y1, x0)]
    d = grid[np.ix_(y1, x1)]
    wy = (fy * fy * (3 - 2 * fy))[:, None]
    wx = (fx * fx * (3 - 2 * fx))[None, :]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def noise_pack(seed: int, resolution: int = 64) -> MaterialMaps:
    """Colorized tileable value noise."""
    n = resolution
    s = Stream(seed, STREAM_INIT, _DEMO_STREAM_NOISE)
    base = _toroidal_value_noise(s, n, 8)
    tint = 0.35 + 0.5 * s.uniforms(3)
    albedo = np.stack([np.clip(0.15 + 0.7 * base * t, 0, 1) for t in tint])
    detail = _toroidal_value_noise(s, n, 16)
    rough = (0.35 + 0.45 * detail)[None]
    spec = np.full((3, n, n), 0.04)
    return _maps(albedo, np.zeros((2, n, n)), rough, spec)


def brick_pack(seed: int, resolution: int = 64):
    """Procedural running-bond bricks; labels: brick = 0, mortar = 1.

    Returns ``(maps, labels)``; the pattern period divides the resolution,
    so the maps tile toroidally.
    """
    n = resolution
    s = Stream(seed, STREAM_INIT, _DEMO_STREAM_BRICK)
    rows, cols = 4, 4
    bh, bw = n // rows, n // cols
    mortar = max(2, n // 32)

    labels = np.zeros((n, n), np.uint8)
    brick_id = np.zeros((n, n), np.int32)
    for r in range(rows):
        y0 = r * bh
        offset = (r % 2) * (bw // 2)
        labels[y0:y0 + mortar, :] = 1
        for c in range(cols + 1):
            x0 = (c * bw + offset) % n
            for dx in range(mortar):
                labels[y0:y0 + bh, (x0 + dx) % n] = 1
        for c in range(cols):
            x0 = (c * bw + offset) % n
            for dx in range(bw):
                brick_id[y0:y0 + bh, (x0 + dx) % n] = r * cols + c

    shade = 0.75 + 0.25 * s.uniforms(rows * cols)
    base_rgb = np.array([0.45, 0.18, 0.12])
    mortar_rgb = np.array([0.55, 0.53, 0.50])
    albedo = np.empty((3, n, n))
    for ch in range(3):
        albedo[ch] = np.where(labels == 0, base_rgb[ch] * shade[brick_id],
                              mortar_rgb[ch])
    grain = _toroidal_value_noise(s, n, 16)
    albedo = np.clip(albedo * (0.85 + 0.3 * grain[None]), 0, 1)

    rough = np.where(labels == 0, 0.55, 0.85)[None] * (0.9 + 0.2 * grain[None])
    rough = np.clip(rough, 0.05, 1.0)
    spec = np.full((3, n, n), 0.04)
    return _maps(albedo, np.zeros((2, n, n)), rough, spec), labels


def constant_target(rgb, resolution: int = 64) -> np.ndarray:
    """A constant display-space color image (3,H,W)."""
    n = resolution
    return np.stack([np.full((n, n), v, np.float32) for v in rgb])


def make_demo(out_dir, seed: int = 0, resolution: int = 64) -> dict:
    """Write the demo assets; returns the paths that were created."""
    paths = {}
    gray_dir = os.path.join(out_dir, "gray")
    imageio.save_pack(gray_pack(resolution), gray_dir)
    imageio.save_labels(split_labels(resolution), os.path.join(gray_dir, "labels.png"))
    paths["gray"] = gray_dir

    brick_dir = os.path.join(out_dir, "brick")
    bricks, brick_labels = brick_pack(seed, resolution)
    imageio.save_pack(bricks, brick_dir)
    imageio.save_labels(brick_labels, os.path.join(brick_dir, "labels.png"))
    paths["brick"] = brick_dir

    noise_dir = os.path.join(out_dir, "noise")
    imageio.save_pack(noise_pack(seed, resolution), noise_dir)
    paths["noise"] = noise_dir

    target_dir = os.path.join(out_dir, "targets")
    os.makedirs(target_dir, exist_ok=True)
    for name, rgb in (("red.png", RED_TARGET), ("blue.png", BLUE_TARGET)):
        p = os.path.join(target_dir, name)
        imageio.save_render(constant_target(rgb, resolution), p)
        paths[name] = p
    return paths
