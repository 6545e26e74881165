"""Reciprocal domain transforms.

Images are ``(C, H, W)`` float64 arrays and batches are ``(N, C, H, W)``.
The source-side transform scales an image by a pixel drawn from another
source image and convolves it with the mean auto-correlation of the target
domain.  The target-side transform does the same with the roles swapped,
scaling by the target's mean drawn pixel instead of a fresh draw.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import fourier

__all__ = [
    "TransformConfig",
    "DomainStats",
    "DegenerateImageError",
    "image_rng",
    "mean_autocorrelation",
    "mean_random_pixel",
    "compute_stats",
    "pixel_kernel",
    "correlate_with_random_pixel",
    "transform_source",
    "transform_target",
    "transform_source_batch",
    "transform_target_batch",
    "inference_transform_batch",
    "renormalize",
    "renormalize_batch",
    "prepare_inputs",
    "write_stats",
    "read_stats",
    "stats_access_count",
    "reset_stats_access",
]

DOMAINS = ("source", "target")


class DegenerateImageError(ValueError):
    """An image has no dynamic range left to normalize."""


@dataclass(frozen=True)
class TransformConfig:
    pixels_per_draw: int = 1
    renormalize: bool = True
    seed: int = 0
    center_kernels: bool = True

    def __post_init__(self):
        if int(self.pixels_per_draw) < 1:
            raise ValueError(f"pixels_per_draw must be >= 1, got {self.pixels_per_draw}")


@dataclass
class DomainStats:
    """Cached per-domain ingredients of the transforms.

    ``mean_autocorr`` is ``(C, H, W)`` with zero lag at ``(0, 0)``;
    ``mean_pixel`` holds one value per channel.
    """

    mean_autocorr: np.ndarray
    mean_pixel: np.ndarray
    sample_count: int
    seed: int
    domain: str = field(default="")

    def __post_init__(self):
        self.mean_autocorr = np.asarray(self.mean_autocorr, dtype=np.float64)
        self.mean_pixel = np.asarray(self.mean_pixel, dtype=np.float64).reshape(-1)
        if self.mean_autocorr.ndim != 3:
            raise ValueError(f"mean_autocorr must be (C, H, W), got {self.mean_autocorr.shape}")
        if self.mean_pixel.shape != (self.mean_autocorr.shape[0],):
            raise ValueError(
                f"mean_pixel has {self.mean_pixel.size} channels, "
                f"mean_autocorr has {self.mean_autocorr.shape[0]}"
            )
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if self.domain and self.domain not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain!r}")

    @property
    def geometry(self):
        return self.mean_autocorr.shape

    def check_geometry(self, x):
        if tuple(x.shape[-3:]) != self.geometry:
            raise ValueError(
                f"image geometry {tuple(x.shape[-3:])} does not match "
                f"{self.domain or 'domain'} statistics geometry {self.geometry}"
            )


# Number of times a transform, reader or writer has consumed DomainStats.
# Lets callers prove that a run with DDA disabled never touched them.
_stats_access = 0


def _touch_stats():
    global _stats_access
    _stats_access += 1


def stats_access_count():
    return _stats_access


def reset_stats_access():
    global _stats_access
    _stats_access = 0


def image_rng(seed, index=0, epoch=0):
    """Generator for one image, independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, int(index), int(epoch)]))


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return image_rng(seed)


def _stack(images):
    """Validate and stack images into an ``(N, C, H, W)`` array."""
    images = getattr(images, "images", images)
    if not isinstance(images, np.ndarray):
        images = list(images)
        if not images:
            raise ValueError("dataset is empty")
        first = np.shape(images[0])
        for j, im in enumerate(images):
            if np.shape(im) != first:
                raise ValueError(f"image {j} has shape {np.shape(im)}, expected {first}")
        images = np.stack(images)
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected (C, H, W) images, got a stack of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("dataset is empty")
    return arr


def mean_autocorrelation(images, chunk=512):
    """Per-channel mean of the images' circular auto-correlations.

    ``images`` may be a Dataset, a list of ``(C, H, W)`` arrays or an
    ``(N, C, H, W)`` array.  Power spectra are accumulated in fixed-size
    chunks in index order and transformed back once.
    """
    arr = _stack(images)
    n = arr.shape[0]
    power = np.zeros(arr.shape[1:])
    for start in range(0, n, chunk):
        spec = fourier.fft2(arr[start:start + chunk])
        power += (spec * np.conj(spec)).real.sum(axis=0)
    return fourier.ifft2(power / n)


def mean_random_pixel(images, seed):
    """Average over images of one uniformly drawn pixel per image, per channel."""
    arr = _stack(images)
    n, _, h, w = arr.shape
    total = np.zeros(arr.shape[1])
    for j in range(n):
        pos = image_rng(seed, j).integers(h * w)
        total += arr[j, :, pos // w, pos % w]
    return total / n


def compute_stats(images, seed, domain=""):
    _touch_stats()
    arr = _stack(images)
    return DomainStats(
        mean_autocorr=mean_autocorrelation(arr),
        mean_pixel=mean_random_pixel(arr, seed),
        sample_count=arr.shape[0],
        seed=int(seed),
        domain=domain,
    )


def pixel_kernel(values, positions, shape, centered=True):
    """Sparse kernel holding drawn pixel values, zero lag at ``(0, 0)``.

    ``values`` is ``(C, k)`` and ``positions`` the ``k`` flat donor indices
    they came from.  The first draw is anchored at the image center when
    ``centered`` (a pure scaling after un-centering) or at the top-left
    corner otherwise; later draws keep their offsets from the first.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    c = values.shape[0]
    h, w = shape
    positions = np.atleast_1d(np.asarray(positions))
    r0, c0 = divmod(int(positions[0]), w)
    ar, ac = (h // 2, w // 2) if centered else (0, 0)
    kernel = np.zeros((c, h, w))
    for i, pos in enumerate(positions):
        r, col = divmod(int(pos), w)
        kernel[:, (ar + r - r0) % h, (ac + col - c0) % w] += values[:, i]
    # stored kernels use the centered convention
    return fourier.uncenter_shift(kernel)


def _draw(donor, rng, k):
    c, h, w = donor.shape
    if k > h * w:
        raise ValueError(f"cannot draw {k} distinct pixels from a {h}x{w} image")
    positions = rng.choice(h * w, size=k, replace=False) if k > 1 else rng.integers(h * w, size=1)
    flat = donor.reshape(c, h * w)
    return flat[:, positions], positions


def correlate_with_random_pixel(x, donor, seed, cfg=TransformConfig()):
    """Cross-correlate ``x`` with pixel(s) drawn from ``donor``."""
    x = np.asarray(x, dtype=np.float64)
    donor = np.asarray(donor, dtype=np.float64)
    if x.shape != donor.shape:
        raise ValueError(f"image shape {x.shape} does not match donor shape {donor.shape}")
    values, positions = _draw(donor, _as_rng(seed), cfg.pixels_per_draw)
    kernel = pixel_kernel(values, positions, x.shape[-2:], cfg.center_kernels)
    return fourier.cross_correlate(x, kernel)


def renormalize_batch(x):
    """Jointly normalize each image of a batch to ``[-1, 1]``.

    Returns ``(y, ok)`` where ``ok`` flags images with a nonzero range;
    degenerate rows of ``y`` are left as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = (-3, -2, -1)
    shifted = x - x.min(axis=axes, keepdims=True)
    top = shifted.max(axis=axes, keepdims=True)
    ok = top > 0
    y = np.where(ok, 2.0 * shifted / np.where(ok, top, 1.0) - 1.0, 0.0)
    return y, ok.reshape(x.shape[:-3])


def prepare_inputs(images):
    """Stretch ``[0, 1]`` images to ``[-1, 1]`` ahead of the transforms.

    Domain statistics and both transforms operate on these signed images;
    constant images come back as zeros.
    """
    return renormalize_batch(images)[0]


def renormalize(x):
    """Map an image to ``[-1, 1]`` using the min and max over all channels."""
    y, ok = renormalize_batch(x)
    if not np.all(ok):
        raise DegenerateImageError("image is constant across all channels; cannot renormalize")
    return y


def _check_stats(stats, x, expect):
    _touch_stats()
    if expect and stats.domain and stats.domain != expect:
        raise ValueError(f"expected {expect} statistics, got {stats.domain} statistics")
    stats.check_geometry(x)


def transform_source_batch(xs, donors, target_stats, cfg, rngs):
    """Source transform for a batch, one generator per image.

    Returns the transformed batch and, when renormalizing, the mask of
    images that survived (constant outputs cannot be normalized).
    """
    xs = np.asarray(xs, dtype=np.float64)
    donors = np.asarray(donors, dtype=np.float64)
    _check_stats(target_stats, xs, "target")
    if xs.shape != donors.shape:
        raise ValueError(f"batch shape {xs.shape} does not match donor shape {donors.shape}")
    kernels = np.empty_like(xs)
    for j, rng in enumerate(rngs):
        values, positions = _draw(donors[j], rng, cfg.pixels_per_draw)
        kernels[j] = pixel_kernel(values, positions, xs.shape[-2:], cfg.center_kernels)
    scaled = fourier.cross_correlate(xs, kernels)
    out = fourier.convolve(scaled, target_stats.mean_autocorr)
    if cfg.renormalize:
        return renormalize_batch(out)
    return out, np.ones(xs.shape[0], dtype=bool)


def inference_transform_batch(xs, mean_pixel, other_stats, cfg):
    """Scale by a fixed per-channel pixel value, then convolve with the other
    domain's mean auto-correlation.  No domain-tag check."""
    _touch_stats()
    xs = np.asarray(xs, dtype=np.float64)
    other_stats.check_geometry(xs)
    mean_pixel = np.asarray(mean_pixel, dtype=np.float64).reshape(-1)
    if mean_pixel.shape != (xs.shape[-3],):
        raise ValueError(f"mean pixel has {mean_pixel.size} channels, images have {xs.shape[-3]}")
    kernel = pixel_kernel(mean_pixel, [0], xs.shape[-2:], cfg.center_kernels)
    scaled = fourier.cross_correlate(xs, kernel)
    out = fourier.convolve(scaled, other_stats.mean_autocorr)
    if cfg.renormalize:
        return renormalize_batch(out)
    return out, np.ones(xs.shape[:-3], dtype=bool)


def transform_target_batch(xs, target_mean_pixel, source_stats, cfg):
    _check_stats(source_stats, np.asarray(xs), "source")
    return inference_transform_batch(xs, target_mean_pixel, source_stats, cfg)


def transform_source(x_s, source_donor, target_stats, cfg=TransformConfig(), seed=None):
    """Training-side transform of one source image.

    Scales ``x_s`` by pixel(s) drawn from ``source_donor`` and convolves the
    result with the target domain's mean auto-correlation.
    """
    rng = _as_rng(cfg.seed if seed is None else seed)
    x_s = np.asarray(x_s, dtype=np.float64)
    out, ok = transform_source_batch(x_s[None], np.asarray(source_donor)[None], target_stats, cfg, [rng])
    if not ok[0]:
        raise DegenerateImageError("transformed source image is constant")
    return out[0]


def transform_target(x_t, target_mean_pixel, source_stats, cfg=TransformConfig()):
    """Inference-side transform of one target image."""
    out, ok = transform_target_batch(np.asarray(x_t, dtype=np.float64)[None], target_mean_pixel, source_stats, cfg)
    if not ok[0]:
        raise DegenerateImageError("transformed target image is constant")
    return out[0]


# Stats cache: "DDASTATS", u32 version, u32 H, W, C, i64 seed, u64 count,
# C x f64 mean pixel, C*H*W x f64 mean auto-correlation; little-endian.
STATS_MAGIC = b"DDASTATS"
STATS_VERSION = 1
_STATS_HEADER = struct.Struct("<8sIIIIqQ")


def write_stats(path, stats):
    _touch_stats()
    c, h, w = stats.geometry
    header = _STATS_HEADER.pack(STATS_MAGIC, STATS_VERSION, h, w, c, int(stats.seed), int(stats.sample_count))
    with open(path, "wb") as f:
        f.write(header)
        f.write(stats.mean_pixel.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(stats.mean_autocorr).astype("<f8").tobytes())


def read_stats(path, domain=""):
    _touch_stats()
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _STATS_HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, h, w, c, seed, count = _STATS_HEADER.unpack_from(blob)
    if magic != STATS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != STATS_VERSION:
        raise ValueError(f"{path}: unsupported stats version {version}")
    expected = _STATS_HEADER.size + 8 * (c + c * h * w)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _STATS_HEADER.size
    mean_pixel = np.frombuffer(blob, "<f8", count=c, offset=off).astype(np.float64)
    planes = np.frombuffer(blob, "<f8", count=c * h * w, offset=off + 8 * c).astype(np.float64)
    return DomainStats(planes.reshape(c, h, w), mean_pixel, count, seed, domain)
