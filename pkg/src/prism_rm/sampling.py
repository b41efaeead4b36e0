"""Training point generation in space and surrogate space."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid_image import Volume, read_metaimage, sample_gradient

FLOOR_FRACTION = 0.05


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(stream)])


@dataclass
class SurrogatePath:
    """Piecewise-linear, cyclically closed surrogate curve through knot samples."""
    times: np.ndarray      # (m,) sorted in [0, T)
    values: np.ndarray     # (m, n_s)
    period: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.times), -1)
        if len(self.times) < 1:
            raise ValueError("surrogate path needs at least one knot")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] >= self.period:
            raise ValueError("knot times must lie in [0, T)")

    @classmethod
    def from_frames(cls, frames, period: float) -> "SurrogatePath":
        frames = sorted(frames, key=lambda f: f.time)
        return cls(np.array([f.time for f in frames]),
                   np.array([f.surrogate for f in frames]), period)

    @property
    def n_s(self) -> int:
        return self.values.shape[1]

    def _segment(self, t):
        t = np.mod(np.asarray(t, dtype=np.float64), self.period)
        kt = np.concatenate([[self.times[-1] - self.period], self.times, [self.times[0] + self.period]])
        kv = np.concatenate([self.values[-1:], self.values, self.values[:1]])
        i = np.searchsorted(kt, t, side="right") - 1
        i = np.clip(i, 0, len(kt) - 2)
        return t, kt, kv, i

    def __call__(self, t) -> np.ndarray:
        """Interpolated surrogate at times ``t``; exact at knots."""
        scalar = np.ndim(t) == 0
        t, kt, kv, i = self._segment(np.atleast_1d(t))
        span = kt[i + 1] - kt[i]
        w = np.where(span > 0, (t - kt[i]) / np.where(span > 0, span, 1.0), 0.0)
        out = kv[i] + w[:, None] * (kv[i + 1] - kv[i])
        at_knot = t == kt[i]
        out[at_knot] = kv[i][at_knot]
        return out[0] if scalar else out

    def rate(self, t) -> np.ndarray:
        """ds/dt of the interpolant (slope of the segment that starts at or before ``t``)."""
        scalar = np.ndim(t) == 0
        t, kt, kv, i = self._segment(np.atleast_1d(t))
        span = kt[i + 1] - kt[i]
        out = (kv[i + 1] - kv[i]) / np.where(span > 0, span, np.inf)[:, None]
        return out[0] if scalar else out


def interpolate_surrogate(path: SurrogatePath, t) -> np.ndarray:
    return path(t)


@dataclass
class SurrogateDraw:
    t: np.ndarray
    s: np.ndarray
    has_image: np.ndarray
    knot: np.ndarray       # knot index or -1


def image_count(count: int, image_fraction: float) -> int:
    return min(count, math.ceil(round(image_fraction * count, 9)))


def surrogate_sample(path: SurrogatePath, count: int, image_fraction: float = 0.4,
                     rng: np.random.Generator | None = None) -> SurrogateDraw:
    """Split ``count`` draws into knot surrogates and uniformly timed interpolated ones."""
    rng = np.random.default_rng() if rng is None else rng
    n_img = image_count(count, image_fraction)
    knot = rng.integers(0, len(path.times), size=n_img)
    t_rest = rng.uniform(0.0, path.period, size=count - n_img)
    t = np.concatenate([path.times[knot], t_rest])
    s = np.concatenate([path.values[knot], path(t_rest).reshape(-1, path.n_s)])
    has = np.zeros(count, dtype=bool)
    has[:n_img] = True
    return SurrogateDraw(t, s, has, np.concatenate([knot, -np.ones(count - n_img, dtype=int)]))


class SpatialSampler:
    """Draws world points inside a mask with probability proportional to |grad I|.

    Each mask voxel gets weight ``|grad I| + 0.05 * mean`` so flat regions are
    never starved; points are jittered uniformly within the chosen voxel.
    """

    def __init__(self, ref: Volume, mask: Volume | np.ndarray, floor_fraction: float = FLOOR_FRACTION):
        mflat = mask.flat if isinstance(mask, Volume) else np.asarray(mask, dtype=np.float64).ravel(order="F")
        if mflat.size != ref.flat.size:
            raise ValueError("mask and reference volume differ in size")
        idx = np.flatnonzero(mflat > 0.5)
        if idx.size == 0:
            raise ValueError("mask is empty")
        self.ref = ref
        nodes = self._nodes(ref, idx)
        mag = np.linalg.norm(sample_gradient(ref, nodes), axis=1)
        mean = mag.mean()
        w = mag + floor_fraction * mean if mean > 0 else np.ones_like(mag)
        self.nodes = nodes
        self.prob = w / w.sum()
        self.cdf = np.cumsum(self.prob)
        self.cdf[-1] = 1.0

    @staticmethod
    def _nodes(ref: Volume, idx):
        nx, ny, _ = ref.dims
        i = idx % nx
        j = (idx // nx) % ny
        k = idx // (nx * ny)
        ijk = np.stack([i, j, k], axis=1).astype(np.float64)
        return np.asarray(ref.origin) + ijk * np.asarray(ref.spacing)

    def choose(self, count, rng) -> np.ndarray:
        return np.searchsorted(self.cdf, rng.uniform(0.0, 1.0, size=count), side="right")

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        which = self.choose(count, rng)
        jitter = rng.uniform(-0.5, 0.5, size=(count, 3)) * np.asarray(self.ref.spacing)
        lo, hi = self.ref.box
        return np.clip(self.nodes[which] + jitter, lo, hi)


def spatial_sample(ref: Volume, mask, count: int, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng() if rng is None else rng
    return SpatialSampler(ref, mask).sample(count, rng)


def load_mask(path) -> Volume:
    vol = read_metaimage(path)
    if not np.all(np.isin(vol.flat, (0.0, 1.0))):
        raise ValueError(f"{path}: mask must contain only 0 and 1")
    return vol
