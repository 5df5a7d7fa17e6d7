"""Tileable convolutional generator whose latent code is the optimization variable.

The network grows a per-channel constant base from 4x4 up to the output
resolution.  Every convolution uses circular padding and every upsampling is
circular-bilinear, so the synthesized maps are toroidally seamless by
construction: shifting the per-block noise grids consistently shifts the
output cyclically, which is the formal tileability statement checked by the
tests.  The base tensor is a single value per channel (uniform over the 4x4
grid) so that this equivariance is exact; all spatial structure is carried
by the noise grids.

The latent code ("theta") is a per-block style vector (scale and bias per
channel) plus a per-block noise grid.  Weights stay fixed in the default
"latent" prior mode and are co-optimized in "dip" mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .render import MaterialMaps, tile_maps_arrays
from .rng import Stream, init_stream

_LRELU_SLOPE = 0.2


def default_channels(resolution: int, base: int = 4) -> tuple:
    """Channel schedule per block: 256 at the base, halved every two blocks."""
    blocks = (resolution // base).bit_length()
    out = []
    c = 256
    for b in range(blocks):
        out.append(max(16, c))
        if b % 2 == 1:
            c //= 2
    return tuple(out)


@dataclass
class GeneratorConfig:
    resolution: int = 256
    base_resolution: int = 4
    channels: tuple = ()
    noise_strength: float = 0.25
    noise_learnable: bool = False
    seed: int = 0

    def __post_init__(self):
        r, b = self.resolution, self.base_resolution
        if r < b or (r & (r - 1)) or (b & (b - 1)):
            raise ValueError(f"resolution {r} and base {b} must be powers of two with r >= b")
        if not self.channels:
            self.channels = default_channels(r, b)
        self.channels = tuple(self.channels)
        if len(self.channels) != self.blocks:
            raise ValueError(
                f"channel schedule has {len(self.channels)} entries, need {self.blocks}")

    @property
    def blocks(self) -> int:
        return (self.resolution // self.base_resolution).bit_length()

    def block_resolution(self, b: int) -> int:
        return self.base_resolution << b

    @property
    def output_shift_factor(self) -> int:
        """Output pixels moved per unit of base-grid noise shift."""
        return self.resolution // self.base_resolution

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution, "base_resolution": self.base_resolution,
            "channels": list(self.channels), "noise_strength": self.noise_strength,
            "noise_learnable": self.noise_learnable, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(resolution=d["resolution"], base_resolution=d["base_resolution"],
                   channels=tuple(d["channels"]), noise_strength=d["noise_strength"],
                   noise_learnable=d.get("noise_learnable", False), seed=d.get("seed", 0))


@dataclass
class LatentTheta:
    """Per-block style vectors (scale then bias per channel) and noise grids."""

    wplus: list  # Tensor (2*C_b,)
    noise: list  # Tensor (1, H_b, W_b)

    def tensors(self) -> list:
        return list(self.wplus) + list(self.noise)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def copy(self) -> "LatentTheta":
        return LatentTheta(
            [Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
             for t in self.wplus],
            [Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
             for t in self.noise],
        )


@dataclass
class GeneratorWeights:
    config: GeneratorConfig
    base: Tensor                 # (C_0,) per-channel constant
    conv_w: list = field(default_factory=list)
    conv_b: list = field(default_factory=list)
    torgb_w: list = field(default_factory=list)
    torgb_b: list = field(default_factory=list)
    noise_strength: list = field(default_factory=list)  # 0-d Tensors

    def tensors(self) -> list:
        out = [self.base] + self.conv_w + self.conv_b + self.torgb_w + self.torgb_b
        if self.config.noise_learnable:
            out += self.noise_strength
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag


def init_weights(config: GeneratorConfig, dtype=None) -> GeneratorWeights:
    """Seeded random weights; draw order is fixed by block index."""
    if dtype is None:
        dtype = ad.get_default_dtype()
    chans = config.channels
    stream = init_stream(config.seed, block=0)
    w = GeneratorWeights(config, Tensor(stream.normals(chans[0]).astype(dtype), dtype=dtype))
    for b in range(config.blocks):
        cin = chans[b] if b == 0 else chans[b - 1]
        cout = chans[b]
        stream = init_stream(config.seed, block=1 + b)
        std = np.sqrt(2.0 / (cin * 9))
        w.conv_w.append(Tensor(
            (stream.normals(cout * cin * 9) * std).reshape(cout, cin, 3, 3).astype(dtype),
            dtype=dtype))
        w.conv_b.append(Tensor(np.zeros(cout, dtype=dtype), dtype=dtype))
        rgb_std = 0.3 / np.sqrt(cout)
        w.torgb_w.append(Tensor(
            (stream.normals(9 * cout) * rgb_std).reshape(9, cout, 1, 1).astype(dtype),
            dtype=dtype))
        w.torgb_b.append(Tensor(np.zeros(9, dtype=dtype), dtype=dtype))
        w.noise_strength.append(Tensor(np.asarray(config.noise_strength, dtype=dtype),
                                       dtype=dtype))
    return w


def init_theta(config: GeneratorConfig, stream: Stream, style_spread: float = 0.0,
               dtype=None) -> LatentTheta:
    """Neutral latents (scale 1, bias 0) with fresh unit-normal noise grids.

    ``style_spread`` > 0 perturbs the styles too; that is how random samples
    of the prior are drawn.
    """
    if dtype is None:
        dtype = ad.get_default_dtype()
    wplus, noise = [], []
    for b in range(config.blocks):
        c = config.channels[b]
        r = config.block_resolution(b)
        vec = np.concatenate([np.ones(c), np.zeros(c)])
        if style_spread > 0:
            vec = vec + style_spread * stream.normals(2 * c)
        wplus.append(Tensor(vec.astype(dtype), dtype=dtype))
        noise.append(Tensor(stream.normals(r * r).reshape(1, r, r).astype(dtype),
                            dtype=dtype))
    return LatentTheta(wplus, noise)


def sample_theta(config: GeneratorConfig, stream: Stream, dtype=None) -> LatentTheta:
    """A random latent drawn from the prior's sampling distribution."""
    return init_theta(config, stream, style_spread=0.25, dtype=dtype)


def synthesize(weights: GeneratorWeights, theta: LatentTheta) -> MaterialMaps:
    """Run the generator; differentiable w.r.t. theta (and weights in dip mode)."""
    cfg = weights.config
    if len(theta.wplus) != cfg.blocks or len(theta.noise) != cfg.blocks:
        raise ad.ShapeError(
            f"theta has {len(theta.wplus)} blocks, generator expects {cfg.blocks}")
    dtype = weights.base.data.dtype
    base_res = cfg.base_resolution

    ones = Tensor(np.ones((cfg.channels[0], base_res, base_res), dtype=dtype), dtype=dtype)
    zeros = Tensor(np.zeros(cfg.channels[0], dtype=dtype), dtype=dtype)
    x = ad.channel_affine(ones, weights.base, zeros)

    rgb = None
    for b in range(cfg.blocks):
        c = cfg.channels[b]
        r = cfg.block_resolution(b)
        if theta.noise[b].shape != (1, r, r):
            raise ad.ShapeError(
                f"noise grid {b} has shape {theta.noise[b].shape}, expected (1,{r},{r})")
        if theta.wplus[b].shape != (2 * c,):
            raise ad.ShapeError(
                f"style vector {b} has shape {theta.wplus[b].shape}, expected ({2 * c},)")
        if b > 0:
            x = ad.upsample2x(x, "bilinear_circular")
        x = ad.conv2d(x, weights.conv_w[b], weights.conv_b[b], padding="circular")
        style_scale = ad.slice_rows(_as_col(theta.wplus[b]), 0, c)
        style_bias = ad.slice_rows(_as_col(theta.wplus[b]), c, 2 * c)
        x = ad.channel_affine(x, _as_vec(style_scale), _as_vec(style_bias))
        noise = ad.scale_by(theta.noise[b], weights.noise_strength[b])
        x = ad.add(x, ad.repeat_c(noise, c))
        x = ad.leaky_relu(x, _LRELU_SLOPE)
        y = ad.conv2d(x, weights.torgb_w[b], weights.torgb_b[b], padding="circular")
        rgb = y if rgb is None else ad.add(ad.upsample2x(rgb, "bilinear_circular"), y)

    albedo = ad.sigmoid(ad.slice_channels(rgb, 0, 3))
    normal = ad.tanh(ad.slice_channels(rgb, 3, 5))
    nx = ad.slice_channels(normal, 0, 1)
    ny = ad.slice_channels(normal, 1, 2)
    sq = ad.add(ad.mul(nx, nx), ad.mul(ny, ny))
    factor = ad.div(1.0, ad.sqrt(ad.clamp_min(sq, 1.0)))  # clamp xy to the unit disk
    normal = ad.mul(normal, ad.repeat_c(factor, 2))
    roughness = ad.sigmoid(ad.slice_channels(rgb, 5, 6))
    specular = ad.sigmoid(ad.slice_channels(rgb, 6, 9))
    return MaterialMaps(albedo, normal, roughness, specular)


def _as_col(v: Tensor) -> Tensor:
    out = v.data.reshape(-1, 1)

    def bwd(g, acc):
        acc(v, g.reshape(v.data.shape))
    return ad._make(out, (v,), bwd, "reshape")


def _as_vec(v: Tensor) -> Tensor:
    out = v.data.reshape(-1)

    def bwd(g, acc):
        acc(v, g.reshape(v.data.shape))
    return ad._make(out, (v,), bwd, "reshape")


def shift_theta(theta: LatentTheta, dx: int, dy: int) -> LatentTheta:
    """Shift block-b noise by (dx * 2^b, dy * 2^b); styles are untouched.

    ``synthesize(shift_theta(theta, dx, dy))`` equals the synthesis of
    ``theta`` cyclically shifted by ``(dx, dy) * output_shift_factor``.
    """
    shifted = theta.copy()
    for b, noise in enumerate(shifted.noise):
        f = 1 << b
        noise.data = np.roll(noise.data, (dy * f, dx * f), axis=(1, 2))
    return shifted


def tile(maps: MaterialMaps, k: int) -> MaterialMaps:
    """Toroidal k x k repetition of every channel."""
    return tile_maps_arrays(maps, k)


def random_crop(maps: MaterialMaps, size: int, rng: Stream) -> MaterialMaps:
    """Axis-aligned crop at a uniform random offset from the 2x2 tile."""
    H = maps.resolution
    if size > 2 * H:
        raise ValueError(f"crop size {size} exceeds the 2x2 tiled extent {2 * H}")
    oy = rng.below(2 * H - size + 1)
    ox = rng.below(2 * H - size + 1)
    tiled = tile(maps, 2)

    def crop(t: Tensor) -> Tensor:
        return Tensor(t.data[:, oy:oy + size, ox:ox + size].copy(), dtype=t.data.dtype)
    return MaterialMaps(crop(tiled.albedo), crop(tiled.normal_xy),
                        crop(tiled.roughness), crop(tiled.specular))


# Allowance on the interior gradient percentile when judging the wrap edge.
# The maximum over the ~2H wrap samples of a seamless stationary texture sits
# above the interior's 99th percentile by construction (an order-statistics
# effect, measured ratio <= 2); genuine seams measure 7x and beyond.
TILEABILITY_MARGIN = 3.0

# Wrap deviations below one 8-bit quantization step are never a visible seam.
SEAM_FLOOR = 2.0 / 255.0


def seam_metric(maps: MaterialMaps) -> float:
    """Wrap-edge sharpness relative to the interior; <= 0 indicates seamless.

    Per channel: the largest absolute toroidal forward difference across the
    wrap row/column, minus the reference envelope of typical texture edges —
    the larger of :data:`TILEABILITY_MARGIN` times the interior's 99th
    gradient percentile, the interior's maximum gradient (plateau textures
    concentrate their variation in sparse cliffs that a percentile misses),
    and the quantization floor.  The maximum over all nine channels is
    returned.
    """
    return max(seam_metric_channels(arr) for arr in maps.arrays().values())


def seam_metric_channels(arr: np.ndarray) -> float:
    """Seam metric over one (C,H,W) channel stack; see :func:`seam_metric`."""
    worst = -np.inf
    for c in range(arr.shape[0]):
        m = arr[c]
        dcol = np.abs(np.diff(m, axis=1))
        drow = np.abs(np.diff(m, axis=0))
        interior = np.concatenate([dcol.ravel(), drow.ravel()])
        wrap = max(np.abs(m[:, 0] - m[:, -1]).max(), np.abs(m[0, :] - m[-1, :]).max())
        envelope = max(TILEABILITY_MARGIN * np.percentile(interior, 99),
                       interior.max(), SEAM_FLOOR)
        worst = max(worst, wrap - envelope)
    return float(worst)


def save_generator(weights: GeneratorWeights, path) -> None:
    tensors = {"base": weights.base.data}
    for b in range(weights.config.blocks):
        tensors[f"conv{b}.weight"] = weights.conv_w[b].data
        tensors[f"conv{b}.bias"] = weights.conv_b[b].data
        tensors[f"torgb{b}.weight"] = weights.torgb_w[b].data
        tensors[f"torgb{b}.bias"] = weights.torgb_b[b].data
        tensors[f"noise_strength{b}"] = weights.noise_strength[b].data
    container.save(path, "generator", weights.config.to_dict(), tensors)


def _weights_from_tensors(config: GeneratorConfig, tensors: dict, where: str) -> GeneratorWeights:
    def grab(name, shape):
        try:
            arr = tensors[name]
        except KeyError as exc:
            raise container.ContainerError(f"{where}: missing tensor '{name}'") from exc
        if tuple(arr.shape) != tuple(shape):
            raise container.ContainerError(
                f"{where}: tensor '{name}' has shape {arr.shape}, expected {tuple(shape)}")
        return Tensor(arr, dtype=arr.dtype)

    chans = config.channels
    w = GeneratorWeights(config, grab("base", (chans[0],)))
    for b in range(config.blocks):
        cin = chans[b] if b == 0 else chans[b - 1]
        w.conv_w.append(grab(f"conv{b}.weight", (chans[b], cin, 3, 3)))
        w.conv_b.append(grab(f"conv{b}.bias", (chans[b],)))
        w.torgb_w.append(grab(f"torgb{b}.weight", (9, chans[b], 1, 1)))
        w.torgb_b.append(grab(f"torgb{b}.bias", (9,)))
        w.noise_strength.append(grab(f"noise_strength{b}", ()))
    return w


def load_generator(path) -> GeneratorWeights:
    _, config_dict, tensors = container.load(path, expect_kind="generator")
    config = GeneratorConfig.from_dict(config_dict)
    return _weights_from_tensors(config, tensors, str(path))


def save_checkpoint(weights: GeneratorWeights, theta: LatentTheta, path,
                    extra: dict | None = None) -> None:
    """Self-contained latent checkpoint: generator config, weights and theta."""
    tensors = {"base": weights.base.data}
    for b in range(weights.config.blocks):
        tensors[f"conv{b}.weight"] = weights.conv_w[b].data
        tensors[f"conv{b}.bias"] = weights.conv_b[b].data
        tensors[f"torgb{b}.weight"] = weights.torgb_w[b].data
        tensors[f"torgb{b}.bias"] = weights.torgb_b[b].data
        tensors[f"noise_strength{b}"] = weights.noise_strength[b].data
        tensors[f"theta.wplus{b}"] = theta.wplus[b].data
        tensors[f"theta.noise{b}"] = theta.noise[b].data
    config = {"generator": weights.config.to_dict(), "extra": extra or {}}
    container.save(path, "theta-checkpoint", config, tensors)


def load_checkpoint(path):
    """Returns (weights, theta, extra) from a latent checkpoint."""
    _, config_dict, tensors = container.load(path, expect_kind="theta-checkpoint")
    config = GeneratorConfig.from_dict(config_dict["generator"])
    weights = _weights_from_tensors(config, tensors, str(path))
    wplus, noise = [], []
    for b in range(config.blocks):
        c = config.channels[b]
        r = config.block_resolution(b)
        for name, shape, dest in ((f"theta.wplus{b}", (2 * c,), wplus),
                                  (f"theta.noise{b}", (1, r, r), noise)):
            arr = tensors.get(name)
            if arr is None or tuple(arr.shape) != shape:
                raise container.ContainerError(f"{path}: bad or missing tensor '{name}'")
            dest.append(Tensor(arr, dtype=arr.dtype))
    return weights, LatentTheta(wplus, noise), config_dict.get("extra", {})
