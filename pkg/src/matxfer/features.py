"""Fixed multi-scale convolutional feature extractor.

Four scales with channel widths (64, 128, 256, 512), two 3x3 conv + ReLU
layers per scale and 2x average pooling between scales.  Taps are named
s1c1 .. s4c2 (scale, conv-within-scale) and are taken after the ReLU.
Convolutions use zero padding: the extractor describes image statistics and
plays no part in tileability.

Weights are fixed after construction.  The default provenance is a seeded
random orthogonal filter bank; a file in the package's container format can
be loaded instead (e.g. converted pretrained weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .render import MaterialMaps, encode_normal
from .rng import init_stream

SCALE_CHANNELS = (64, 128, 256, 512)
TAPS = ("s1c1", "s1c2", "s2c1", "s2c2", "s3c1", "s3c2", "s4c1", "s4c2")

# conv specs per layer: (name, in_channels, out_channels)
_LAYERS = []
for _s, _c in enumerate(SCALE_CHANNELS):
    _prev = 3 if _s == 0 else SCALE_CHANNELS[_s - 1]
    _LAYERS.append((f"s{_s + 1}c1", _prev, _c))
    _LAYERS.append((f"s{_s + 1}c2", _c, _c))


def tap_channels(tap: str) -> int:
    return SCALE_CHANNELS[int(tap[1]) - 1]


def tap_stride(tap: str) -> int:
    return 1 << (int(tap[1]) - 1)


@dataclass
class FeatureExtractor:
    """Immutable conv weights/biases keyed by tap name."""

    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    provenance: str = "seeded_random"

    def dtype(self):
        return self.weights["s1c1"].data.dtype


@dataclass
class FeaturePyramid:
    """Per-tap feature maps, optionally with per-tap integer label maps."""

    taps: dict[str, Tensor]
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, tap: str) -> Tensor:
        return self.taps[tap]

    def __contains__(self, tap: str) -> bool:
        return tap in self.taps


def _orthogonal_rows(gauss: np.ndarray) -> np.ndarray:
    """Orthonormalize a (K, M) Gaussian draw along its smaller dimension.

    For K <= M the rows come out pairwise orthonormal; for K > M that is
    impossible, so the columns are orthonormalized instead.
    """
    K, M = gauss.shape
    if K <= M:
        q, r = np.linalg.qr(gauss.T)
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        return (q * d).T
    q, r = np.linalg.qr(gauss)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def init_random(seed: int, dtype=None) -> FeatureExtractor:
    """Orthogonal filter banks drawn from the init stream; biases zero."""
    if dtype is None:
        dtype = ad.get_default_dtype()
    weights, biases = {}, {}
    for layer_index, (name, cin, cout) in enumerate(_LAYERS):
        stream = init_stream(seed, block=layer_index)
        g = stream.normals(cout * cin * 9).reshape(cout, cin * 9)
        w = _orthogonal_rows(g).reshape(cout, cin, 3, 3)
        weights[name] = Tensor(w.astype(dtype), dtype=dtype)
        biases[name] = Tensor(np.zeros(cout, dtype=dtype), dtype=dtype)
    return FeatureExtractor(weights, biases, provenance=f"seeded_random({seed})")


def save_weights(extractor: FeatureExtractor, path) -> None:
    tensors = {}
    for name, _, _ in _LAYERS:
        tensors[f"{name}.weight"] = extractor.weights[name].data
        tensors[f"{name}.bias"] = extractor.biases[name].data
    container.save(path, "feature-extractor",
                   {"scale_channels": list(SCALE_CHANNELS)}, tensors)


def load_weights(path, dtype=None) -> FeatureExtractor:
    _, config, tensors = container.load(path, expect_kind="feature-extractor")
    if tuple(config.get("scale_channels", ())) != SCALE_CHANNELS:
        raise container.ContainerError(
            f"{path}: scale channels {config.get('scale_channels')} do not match "
            f"the fixed architecture {list(SCALE_CHANNELS)}")
    weights, biases = {}, {}
    for name, cin, cout in _LAYERS:
        try:
            w, b = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
        except KeyError as exc:
            raise container.ContainerError(f"{path}: missing tensor for layer {name}") from exc
        if w.shape != (cout, cin, 3, 3) or b.shape != (cout,):
            raise container.ContainerError(
                f"{path}: layer {name} dims {w.shape}/{b.shape} do not match "
                f"expected ({cout},{cin},3,3)/({cout},)")
        if dtype is not None:
            w, b = w.astype(dtype), b.astype(dtype)
        weights[name] = Tensor(w, dtype=w.dtype)
        biases[name] = Tensor(b, dtype=b.dtype)
    return FeatureExtractor(weights, biases, provenance=f"loaded({path})")


def extract(image: Tensor, extractor: FeatureExtractor, taps=TAPS) -> FeaturePyramid:
    """Run the extractor on a (3,H,W) image and collect the requested taps."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ad.ShapeError(f"extract: expected (3,H,W) image, got {image.shape}")
    H, W = image.shape[1], image.shape[2]
    if H % 8 or W % 8:
        raise ad.ShapeError(f"extract: spatial dims must be divisible by 8, got {H}x{W}")
    taps = set(taps)
    unknown = taps - set(TAPS)
    if unknown:
        raise ValueError(f"extract: unknown taps {sorted(unknown)}")
    deepest = max(int(t[1]) for t in taps)

    out: dict[str, Tensor] = {}
    x = image
    for s in range(1, deepest + 1):
        if s > 1:
            x = ad.avgpool2x(x)
        for c in (1, 2):
            name = f"s{s}c{c}"
            if c == 2 and s == deepest and name not in taps:
                break  # the last scale's second conv feeds nothing requested
            x = ad.relu(ad.conv2d(x, extractor.weights[name], extractor.biases[name],
                                  padding="zero"))
            if name in taps:
                out[name] = x
    return FeaturePyramid(out)


def extract_material(maps: MaterialMaps, extractor: FeatureExtractor,
                     taps=("s1c2", "s2c2", "s3c2", "s4c2")) -> FeaturePyramid:
    """Featurize a 9-channel material stack.

    The extractor is a 3-channel network, so the stack is split into groups
    (albedo, encoded normal, roughness broadcast to 3 channels, specular),
    each group is featurized independently, and the per-tap feature maps are
    concatenated along channels.
    """
    groups = [
        maps.albedo,
        encode_normal(maps.normal_xy),
        ad.repeat_c(maps.roughness, 3),
        maps.specular,
    ]
    pyramids = [extract(g, extractor, taps) for g in groups]
    merged = {
        tap: ad.concat_channels([p[tap] for p in pyramids])
        for tap in pyramids[0].taps
    }
    return FeaturePyramid(merged)


def downsample_labels(labels: np.ndarray, tap: str) -> np.ndarray:
    """Nearest-neighbor label subsampling to a tap's resolution."""
    s = tap_stride(tap)
    return labels[::s, ::s]
