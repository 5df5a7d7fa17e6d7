"""Differentiable forward renderer for SVBRDF material maps.

The scene is a flat unit plane textured by the maps, lit by a point light
co-located with an orthographic camera above the plane center.  Shading is
Cook-Torrance with a GGX normal distribution, Schlick Fresnel and
height-correlated Smith masking:

    f = albedo/pi + D*F*G / (4 (n.l)(n.v))
    alpha = roughness^2
    D(h)  = alpha^2 / (pi ((n.h)^2 (alpha^2 - 1) + 1)^2)
    F     = F0 + (1 - F0)(1 - h.v)^5
    G     = 2 (n.l)(n.v) / ((n.l) sqrt(alpha^2 + (1-alpha^2)(n.v)^2)
                            + (n.v) sqrt(alpha^2 + (1-alpha^2)(n.l)^2))

Radiance f * (n.l) * intensity / dist^2 is clamped to [0,1] and then
gamma-encoded.  Texel (i, j) of an NxN map sits at world position
((j/N - 1/2) * extent, (i/N - 1/2) * extent, 0), so for even N the texel
(N/2, N/2) lies exactly under the light.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# roughness floor keeping the GGX distribution away from its alpha->0 singularity
R_MIN = 0.045

# calibrated so a flat diffuse material with albedo 0.8 renders ~0.75 at the
# pixel under the light with the default geometry: 0.75^2.2 * pi / 0.8
DEFAULT_INTENSITY = 2.0854254303491726

_NDL_FLOOR = 1e-6


@dataclass
class RenderConfig:
    """Co-located point-light geometry and tone mapping."""

    light_height: float = 1.0
    light_intensity: float = DEFAULT_INTENSITY
    plane_extent: float = 1.0
    gamma: float = 2.2
    tile_repeat: int = 1

    def __post_init__(self):
        if self.light_height <= 0:
            raise ValueError("light_height must be positive")
        if self.light_intensity <= 0:
            raise ValueError("light_intensity must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class MaterialMaps:
    """9-channel SVBRDF stack: albedo (3), normal xy (2), roughness (1), specular F0 (3)."""

    albedo: Tensor
    normal_xy: Tensor
    roughness: Tensor
    specular: Tensor

    @property
    def resolution(self) -> int:
        return self.albedo.shape[1]

    def validate(self) -> None:
        shapes = {
            "albedo": (3,), "normal_xy": (2,), "roughness": (1,), "specular": (3,),
        }
        H = self.albedo.shape[1] if self.albedo.data.ndim == 3 else 0
        if H == 0 or (H & (H - 1)) != 0:
            raise ValueError(f"map resolution must be a power of two, got {H}")
        for name, (ch,) in shapes.items():
            t = getattr(self, name)
            if t.data.ndim != 3 or t.shape != (ch, H, H):
                raise ValueError(f"{name} must have shape ({ch},{H},{H}), got {t.shape}")
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"{name} contains non-finite values")

    def detached(self) -> "MaterialMaps":
        return MaterialMaps(self.albedo.detach(), self.normal_xy.detach(),
                            self.roughness.detach(), self.specular.detach())

    def arrays(self) -> dict:
        return {
            "albedo": self.albedo.data, "normal_xy": self.normal_xy.data,
            "roughness": self.roughness.data, "specular": self.specular.data,
        }


def decode_normal(rgb: Tensor) -> Tensor:
    """Tangent-space PNG convention: x = 2r - 1, y = 2g - 1 (blue is derived)."""
    xy = ad.slice_channels(rgb, 0, 2)
    return ad.sub(ad.scale(xy, 2.0), 1.0)


def encode_normal(xy: Tensor) -> Tensor:
    """Inverse of :func:`decode_normal` with the z channel recomputed."""
    x2y2 = _sq_norm(xy)
    z = ad.sqrt(ad.clamp_min(ad.sub(1.0, x2y2), 0.0))
    rgb_xy = ad.scale(ad.add(xy, 1.0), 0.5)
    rgb_z = ad.scale(ad.add(z, 1.0), 0.5)
    return ad.concat_channels([rgb_xy, rgb_z])


def _sq_norm(xy: Tensor) -> Tensor:
    x = ad.slice_channels(xy, 0, 1)
    y = ad.slice_channels(xy, 1, 2)
    return ad.add(ad.mul(x, x), ad.mul(y, y))


def _geometry(H: int, W: int, config: RenderConfig, dtype):
    """Constant per-pixel light direction, 1/dist^2 and n-independent terms."""
    e = config.plane_extent
    xs = (np.arange(W, dtype=dtype) / W - 0.5) * e
    ys = (np.arange(H, dtype=dtype) / H - 0.5) * e
    X, Y = np.meshgrid(xs, ys)
    h = dtype(config.light_height)
    d2 = X * X + Y * Y + h * h
    dist = np.sqrt(d2)
    lx, ly, lz = -X / dist, -Y / dist, h / dist
    one = np.ones((1, H, W), dtype=dtype)
    return (
        Tensor(lx[None], dtype=dtype), Tensor(ly[None], dtype=dtype),
        Tensor(lz[None], dtype=dtype), Tensor(1.0 / d2[None], dtype=dtype),
        Tensor(one, dtype=dtype),
    )


def render_linear(maps: MaterialMaps, config: RenderConfig | None = None) -> Tensor:
    """Pre-clamp radiance (3,H,W); :func:`render` applies clamp and gamma."""
    if config is None:
        config = RenderConfig()
    H, W = maps.albedo.shape[1], maps.albedo.shape[2]
    dtype = maps.albedo.data.dtype.type
    lx, ly, lz, inv_d2, one = _geometry(H, W, config, dtype)

    nx = ad.slice_channels(maps.normal_xy, 0, 1)
    ny = ad.slice_channels(maps.normal_xy, 1, 2)
    nz = ad.sqrt(ad.clamp_min(ad.sub(1.0, ad.add(ad.mul(nx, nx), ad.mul(ny, ny))), 0.0))
    # unit-normalize; the squared norm is >= 1 by construction so this is safe
    norm = ad.sqrt(ad.clamp_min(ad.add(ad.add(ad.mul(nx, nx), ad.mul(ny, ny)), ad.mul(nz, nz)), 1.0))
    nx, ny, nz = ad.div(nx, norm), ad.div(ny, norm), ad.div(nz, norm)

    ndl = ad.clamp_min(
        ad.add(ad.add(ad.mul(nx, lx), ad.mul(ny, ly)), ad.mul(nz, lz)), _NDL_FLOOR)
    ndv = ndl          # co-located light and camera
    ndh = ndl          # h = normalize(l + v) = l
    hdv = one          # h.v = 1 exactly

    r = ad.clamp(maps.roughness, R_MIN, 1.0)
    alpha = ad.mul(r, r)
    a2 = ad.mul(alpha, alpha)

    denom = ad.add(ad.mul(ad.mul(ndh, ndh), ad.sub(a2, 1.0)), 1.0)
    D = ad.div(a2, ad.scale(ad.mul(denom, denom), np.pi))

    F = ad.add(maps.specular,
               ad.mul(ad.sub(1.0, maps.specular),
                      ad.repeat_c(ad.pow_(ad.sub(1.0, hdv), 5.0), 3)))

    lam_l = ad.sqrt(ad.add(a2, ad.mul(ad.sub(1.0, a2), ad.mul(ndv, ndv))))
    lam_v = ad.sqrt(ad.add(a2, ad.mul(ad.sub(1.0, a2), ad.mul(ndl, ndl))))
    G = ad.div(ad.scale(ad.mul(ndl, ndv), 2.0),
               ad.add(ad.mul(ndl, lam_l), ad.mul(ndv, lam_v)))

    spec_scalar = ad.div(ad.mul(D, G), ad.scale(ad.mul(ndl, ndv), 4.0))
    f = ad.add(ad.scale(maps.albedo, 1.0 / np.pi), ad.mul(F, ad.repeat_c(spec_scalar, 3)))

    falloff = ad.scale(ad.mul(ndl, inv_d2), config.light_intensity)
    return ad.mul(f, ad.repeat_c(falloff, 3))


def render(maps: MaterialMaps, config: RenderConfig | None = None) -> Tensor:
    """Render the maps to a gamma-encoded (3,H,W) image in [0,1]."""
    if config is None:
        config = RenderConfig()
    radiance = render_linear(maps, config)
    out = ad.pow_(ad.clamp(radiance, 0.0, 1.0), 1.0 / config.gamma)
    if ad.debug_enabled() and not np.all(np.isfinite(out.data)):
        bad = np.argwhere(~np.isfinite(out.data))[0]
        raise FloatingPointError(
            f"render produced a non-finite value at channel {bad[0]}, pixel "
            f"({bad[1]},{bad[2]}); check roughness/normal inputs")
    return out


def tile_maps_arrays(maps: MaterialMaps, k: int) -> MaterialMaps:
    """Toroidal k x k repetition of every channel (non-differentiable copy)."""
    if k < 1:
        raise ValueError("tile repeat must be >= 1")

    def rep(t: Tensor) -> Tensor:
        return Tensor(np.tile(t.data, (1, k, k)), dtype=t.data.dtype)
    return MaterialMaps(rep(maps.albedo), rep(maps.normal_xy),
                        rep(maps.roughness), rep(maps.specular))


def tile_render(maps: MaterialMaps, config: RenderConfig | None = None,
                k: int | None = None) -> Tensor:
    """Render a k x k toroidal tiling at the same physical texel size.

    ``k`` defaults to the config's ``tile_repeat``.
    """
    if config is None:
        config = RenderConfig()
    if k is None:
        k = config.tile_repeat
    if k < 1:
        raise ValueError(f"tile repeat must be >= 1, got {k}")
    if k == 1:
        return render(maps, config)
    tiled = tile_maps_arrays(maps, k)
    big = replace(config, plane_extent=config.plane_extent * k, tile_repeat=1)
    return render(tiled, big)
