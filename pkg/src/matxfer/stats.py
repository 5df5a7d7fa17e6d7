"""Statistical descriptors and distances between feature sample sets.

The style descriptors compare per-pixel feature vectors gathered from
labeled regions.  The default distance is a resampled sliced Wasserstein
loss: features are projected onto random unit directions, the direction with
more samples is uniformly subsampled to the other's count, and sorted
projections are compared with a mean L1 distance.  A sliced Cramer distance
(integrated squared difference of the 1D empirical CDFs) and a Gram-matrix
distance are available as alternatives.

Empty regions return ``None`` from the distance functions, which callers
treat as "skip this tap".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Stream

__all__ = [
    "SampleSet", "ProjectionSet", "erode", "gather", "sample_directions",
    "sw_loss", "cramer_loss", "gram", "gram_loss", "feature_loss",
]


@dataclass
class SampleSet:
    """(n, C) feature vectors gathered from one labeled region at one tap."""

    values: Tensor

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class ProjectionSet:
    """Unit-norm projection directions, one row per direction."""

    directions: np.ndarray  # (D, C) float64
    seed_info: tuple = ()

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if self.directions.ndim != 2 or np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("projection directions must be unit-norm rows")

    @property
    def count(self) -> int:
        return self.directions.shape[0]


def sample_directions(stream: Stream, channels: int, count: int | None = None) -> ProjectionSet:
    """Gaussian i.i.d. rows normalized to unit length; count defaults to channels."""
    if count is None:
        count = channels
    g = stream.normals(count * channels).reshape(count, channels)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return ProjectionSet(g / norms, seed_info=(stream.seed, stream.stream_id, stream.block))


def _shifted(mask: np.ndarray, s: int, axis: int) -> np.ndarray:
    """Shift with False fill (no wraparound)."""
    out = np.zeros_like(mask)
    if s > 0:
        src = [slice(None)] * 2
        dst = [slice(None)] * 2
        src[axis] = slice(s, None)
        dst[axis] = slice(0, -s)
    else:
        src = [slice(None)] * 2
        dst = [slice(None)] * 2
        src[axis] = slice(0, s)
        dst[axis] = slice(-s, None)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological erosion with a (2r+1)^2 square structuring element.

    Pixels whose neighborhood leaves the grid are eroded; label maps are not
    toroidal, so there is no wraparound.
    """
    if radius < 0:
        raise ValueError("erosion radius must be >= 0")
    mask = mask.astype(bool)
    if radius == 0:
        return mask.copy()
    out = mask.copy()
    for axis in (0, 1):  # square element separates into two 1D passes
        acc = out.copy()
        for s in range(1, radius + 1):
            acc &= _shifted(out, s, axis)
            acc &= _shifted(out, -s, axis)
        out = acc
    return out


def gather(features: Tensor, mask: np.ndarray) -> SampleSet:
    """One channel vector per true pixel, in raster order; differentiable."""
    return SampleSet(ad.gather_pixels(features, mask))


def _project_const(values: np.ndarray, proj: ProjectionSet) -> np.ndarray:
    return values @ proj.directions.T.astype(values.dtype)


def _project_tape(values: Tensor, proj: ProjectionSet) -> Tensor:
    dirs = Tensor(proj.directions.T.astype(values.data.dtype), dtype=values.data.dtype)
    return ad.matmul(values, dirs)


def sw_loss(a: SampleSet, b: SampleSet, proj: ProjectionSet,
            rng: Stream | None = None) -> Tensor | None:
    """Resampled sliced Wasserstein distance; gradient flows to ``a`` only.

    Per direction both sets are projected to 1D; the larger side is
    subsampled uniformly without replacement to the smaller count, both are
    sorted, and the mean absolute difference is taken.  The result averages
    over directions.
    """
    n, m = a.n, b.n
    if n == 0 or m == 0:
        return None
    pa = _project_tape(a.values, proj)                      # (n, D)
    pb = _project_const(b.values.data, proj)                # (m, D) constant
    D = proj.count

    if n == m:
        sa, _ = ad.sort_cols(pa)
        sb = np.sort(pb, axis=0)
    elif n < m:
        if rng is None:
            raise ValueError("sw_loss: subsampling requires an rng stream")
        idx = rng.subsample_multi(m, n, D).T                # (n, D), per direction
        sa, _ = ad.sort_cols(pa)
        sb = np.sort(np.take_along_axis(pb, idx, axis=0), axis=0)
    else:
        if rng is None:
            raise ValueError("sw_loss: subsampling requires an rng stream")
        idx = rng.subsample_multi(n, m, D).T                # (m, D)
        sa, _ = ad.sort_cols(ad.take_rows_per_col(pa, idx))
        sb = np.sort(pb, axis=0)

    diff = ad.sub(sa, Tensor(sb.astype(sa.data.dtype), dtype=sa.data.dtype))
    return ad.mean(ad.abs_(diff))


def cramer_loss(a: SampleSet, b: SampleSet, proj: ProjectionSet) -> Tensor | None:
    """Sliced Cramer distance: integral of the squared CDF difference.

    Computed exactly by sweeping the merged sorted samples per direction;
    handles unequal counts natively.  Differentiable in ``a``'s samples.
    """
    n, m = a.n, b.n
    if n == 0 or m == 0:
        return None
    pa = _project_tape(a.values, proj)
    pb = _project_const(b.values.data, proj)
    dtype = pa.data.dtype

    merged = ad.concat_rows([pa, Tensor(pb.astype(dtype), dtype=dtype)])
    svals, perm = ad.sort_cols(merged)
    # CDF step sizes: +1/n for samples of a, -1/m for samples of b; the
    # running sum between consecutive merged values is F_a - F_b there
    steps = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)]).astype(dtype)
    cdf_diff = np.cumsum(steps[perm], axis=0)[:-1]          # (n+m-1, D) constant
    gaps = ad.sub(ad.slice_rows(svals, 1, n + m), ad.slice_rows(svals, 0, n + m - 1))
    weighted = ad.mul(gaps, Tensor((cdf_diff * cdf_diff), dtype=dtype))
    return ad.scale(ad.sum_(weighted), 1.0 / proj.count)


def gram(features: Tensor, mask: np.ndarray | None = None) -> Tensor | None:
    """Mean outer product of channel vectors over the selected pixels."""
    C, H, W = features.shape
    if mask is None:
        mask = np.ones((H, W), bool)
    n = int(mask.sum())
    if n == 0:
        return None
    s = ad.gather_pixels(features, mask)
    return ad.scale(ad.matmul(ad.transpose2d(s), s), 1.0 / n)


def gram_loss(a: SampleSet, b: SampleSet, proj: ProjectionSet | None = None) -> Tensor | None:
    """Mean L1 distance between Gram matrices of two sample sets."""
    if a.n == 0 or b.n == 0:
        return None
    ga = ad.scale(ad.matmul(ad.transpose2d(a.values), a.values), 1.0 / a.n)
    vb = b.values.data
    gb = (vb.T @ vb) / b.n
    return ad.l1_distance(ga, Tensor(gb, dtype=gb.dtype))


def feature_loss(p, q, taps, weights) -> Tensor:
    """Weighted sum of per-tap mean absolute feature differences."""
    total = None
    for tap in taps:
        w = weights[tap] if isinstance(weights, dict) else weights
        term = ad.scale(ad.l1_distance(p[tap], q[tap]), float(w))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("feature_loss: no taps given")
    return total
