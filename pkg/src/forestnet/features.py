"""Per-pixel feature stacks: a fixed filter bank plus contextual offset lookups."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

STD_FLOOR = 1e-8

CACHE_MAGIC = b"FSTK"
CACHE_VERSION = 1


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class OffsetFeatureId:
    """Feature read from ``channel`` at a displacement ``(dx, dy)`` from the pixel."""

    channel: int
    dx: int = 0
    dy: int = 0

    def within(self, max_offset: int) -> bool:
        return abs(self.dx) <= max_offset and abs(self.dy) <= max_offset


# ---------------------------------------------------------------------------
# filters


def _gauss_hw(sigma: float) -> int:
    return int(np.ceil(4.0 * sigma))


def _identity(img):
    return img.copy()


def _gaussian(img, sigma):
    return ndimage.gaussian_filter(img, sigma, mode="reflect")


def _gradmag(img, sigma):
    return ndimage.gaussian_gradient_magnitude(img, sigma, mode="reflect")


def _laplacian(img, sigma):
    # discrete Laplacian of the blurred image: the stencil sums to exactly zero,
    # unlike a truncated sampled LoG kernel
    return ndimage.laplace(ndimage.gaussian_filter(img, sigma, mode="reflect"), mode="reflect")


def _box(img, size):
    return ndimage.uniform_filter(img, size=int(size), mode="reflect")


def _dx(img):
    return ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=1, mode="reflect")


def _dy(img):
    return ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=0, mode="reflect")


def _structure_tensor_eigs(img, sigma, rho):
    gx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="reflect")
    gy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="reflect")
    jxx = ndimage.gaussian_filter(gx * gx, rho, mode="reflect")
    jxy = ndimage.gaussian_filter(gx * gy, rho, mode="reflect")
    jyy = ndimage.gaussian_filter(gy * gy, rho, mode="reflect")
    mid = 0.5 * (jxx + jyy)
    root = np.sqrt(0.25 * (jxx - jyy) ** 2 + jxy**2)
    return mid + root, mid - root


def _st_max(img, sigma, rho):
    return _structure_tensor_eigs(img, sigma, rho)[0]


def _st_min(img, sigma, rho):
    return _structure_tensor_eigs(img, sigma, rho)[1]


# name -> (function, half-width from params)
_FILTERS = {
    "identity": (_identity, lambda: 0),
    "gaussian": (_gaussian, _gauss_hw),
    "gradmag": (_gradmag, _gauss_hw),
    "laplacian": (_laplacian, _gauss_hw),
    "box": (_box, lambda size: int(size) // 2),
    "dx": (_dx, lambda: 1),
    "dy": (_dy, lambda: 1),
    "st_max": (_st_max, lambda sigma, rho: _gauss_hw(sigma) + _gauss_hw(rho)),
    "st_min": (_st_min, lambda sigma, rho: _gauss_hw(sigma) + _gauss_hw(rho)),
}

DEFAULT_BANK_SPEC = (
    "identity, gaussian(1), gaussian(2), gaussian(4), gaussian(8), "
    "gradmag(1), gradmag(2), gradmag(4), laplacian(1), laplacian(2), laplacian(4), "
    "st_max(1,2), st_min(1,2)"
)


@dataclass(frozen=True)
class Filter:
    name: str
    params: tuple[float, ...] = ()

    @property
    def half_width(self) -> int:
        return _FILTERS[self.name][1](*self.params)

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return "%s(%s)" % (self.name, ",".join("%g" % p for p in self.params))

    def apply(self, image: np.ndarray) -> np.ndarray:
        return _FILTERS[self.name][0](image, *self.params)


@dataclass(frozen=True)
class FilterBank:
    filters: tuple[Filter, ...]

    def __post_init__(self):
        if not self.filters:
            raise ValueError("a filter bank needs at least one filter")
        for f in self.filters:
            if f.name not in _FILTERS:
                raise ValueError("unknown filter %r" % f.name)

    @property
    def count(self) -> int:
        return len(self.filters)

    @property
    def names(self) -> list[str]:
        return [f.label for f in self.filters]

    @classmethod
    def from_spec(cls, spec: str) -> "FilterBank":
        """Parse ``"identity, gaussian(2), st_max(1,2)"``."""
        filters = []
        for m in re.finditer(r"([a-z_]+)\s*(?:\(([^)]*)\))?", spec):
            name, args = m.group(1), m.group(2)
            params = tuple(float(a) for a in args.split(",")) if args else ()
            filters.append(Filter(name, params))
        return cls(tuple(filters))

    @classmethod
    def default(cls) -> "FilterBank":
        return cls.from_spec(DEFAULT_BANK_SPEC)


# ---------------------------------------------------------------------------
# stacks


@dataclass(frozen=True)
class FeatureStack:
    """H x W x channels feature values, stored row-major as ``values[y, x, c]``."""

    values: np.ndarray
    channel_names: tuple[str, ...] = ()
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.size == 0:
            raise DimensionError("feature stack must be a non-empty H x W x C array")
        v = v.view()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if not self.channel_names:
            object.__setattr__(self, "channel_names", tuple("ch%d" % i for i in range(v.shape[2])))
        if len(self.channel_names) != v.shape[2]:
            raise DimensionError("channel name count does not match channel count")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def with_maps(self, maps: np.ndarray, prefix: str = "p") -> "FeatureStack":
        """Append per-class prediction maps (H x W x C) as extra channels."""
        maps = np.asarray(maps, dtype=np.float64)
        if maps.shape[:2] != self.shape:
            raise DimensionError("prediction maps do not match the stack size")
        names = self.channel_names + tuple("%s%d" % (prefix, c) for c in range(maps.shape[2]))
        return FeatureStack(np.concatenate([self.values, maps], axis=2), names)


def apply_filter_bank(image, bank: FilterBank | None = None) -> FeatureStack:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DimensionError("expected a non-empty 2-D image, got shape %r" % (img.shape,))
    bank = bank or FilterBank.default()
    values = np.stack([f.apply(img) for f in bank.filters], axis=2)
    return FeatureStack(values, tuple(bank.names))


def lookup_offset(stack: FeatureStack, pixel: tuple[int, int], fid: OffsetFeatureId) -> float:
    """Value of ``fid`` at ``pixel = (x, y)``; coordinates off the image clamp to the edge."""
    x, y = pixel
    h, w = stack.shape
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError("pixel (%d, %d) outside %dx%d image" % (x, y, w, h))
    if not 0 <= fid.channel < stack.channels:
        raise IndexError("channel %d out of range [0, %d)" % (fid.channel, stack.channels))
    xx = min(max(x + fid.dx, 0), w - 1)
    yy = min(max(y + fid.dy, 0), h - 1)
    return float(stack.values[yy, xx, fid.channel])


def shifted_channel(values: np.ndarray, channel: int, dx: int, dy: int) -> np.ndarray:
    """Whole-image version of :func:`lookup_offset` for one feature id."""
    h, w = values.shape[:2]
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    return values[rows[:, None], cols[None, :], channel]


def channel_stats(stacks: Sequence[FeatureStack]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and floored std pooled over all pixels of ``stacks``."""
    n = 0
    s = None
    for st in stacks:
        v = st.values.reshape(-1, st.channels)
        s = v.sum(axis=0) if s is None else s + v.sum(axis=0)
        n += v.shape[0]
    mean = s / n
    ss = sum(((st.values.reshape(-1, st.channels) - mean) ** 2).sum(axis=0) for st in stacks)
    std = np.maximum(np.sqrt(ss / n), STD_FLOOR)
    return mean, std


def normalize_channels(stack: FeatureStack, stats=None) -> FeatureStack:
    """Zero-mean, unit-variance channels.

    Without ``stats`` they are computed from ``stack`` itself; pass the training
    statistics to normalize test stacks identically. The returned stack carries
    the statistics that were used.
    """
    if stats is None:
        mean, std = channel_stats([stack])
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
        std = np.maximum(std, STD_FLOOR)
    values = (stack.values - mean) / std
    return FeatureStack(values, stack.channel_names, mean.copy(), std.copy())


# ---------------------------------------------------------------------------
# binary cache: magic, version, dims, channel names, stats, float32 payload


def save_stack(path, stack: FeatureStack) -> None:
    h, w, c = stack.values.shape
    has_stats = stack.mean is not None
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HIIIB", CACHE_VERSION, h, w, c, int(has_stats)))
        for name in stack.channel_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        if has_stats:
            fh.write(np.asarray(stack.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(stack.std, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(stack.values, dtype="<f4").tobytes())


def load_stack(path) -> FeatureStack:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError("%s is not a feature-stack cache" % path)
    version, h, w, c, has_stats = struct.unpack_from("<HIIIB", data, 4)
    if version != CACHE_VERSION:
        raise ValueError("unsupported feature-stack cache version %d" % version)
    pos = 4 + struct.calcsize("<HIIIB")
    names = []
    for _ in range(c):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        names.append(data[pos:pos + n].decode("utf-8"))
        pos += n
    mean = std = None
    if has_stats:
        mean = np.frombuffer(data, "<f8", c, pos).astype(np.float64)
        pos += 8 * c
        std = np.frombuffer(data, "<f8", c, pos).astype(np.float64)
        pos += 8 * c
    values = np.frombuffer(data, "<f4", h * w * c, pos).reshape(h, w, c).astype(np.float64)
    return FeatureStack(values, tuple(names), mean, std)
