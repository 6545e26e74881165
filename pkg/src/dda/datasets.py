"""Dataset loading and synthesis.

Images are stored as ``(N, C, H, W)`` float64 arrays with values in
``[0, 1]``.
"""

import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import image_rng

__all__ = [
    "Dataset",
    "PatchBank",
    "load_idx",
    "idx_header",
    "write_idx",
    "to_rgb",
    "procedural_patch_bank",
    "photo_patch_bank",
    "synthesize_target",
    "load_image_dir",
    "save_image_dir",
    "subsample",
    "label_checksum",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    domain_tag: str
    name: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if self.domain_tag not in ("source", "target"):
            raise DataError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def geometry(self):
        return self.images.shape[1:]

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.domain_tag, self.name)


@dataclass(frozen=True)
class PatchBank:
    patches: np.ndarray
    origin: str

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        if patches.ndim != 4 or patches.shape[0] == 0:
            raise DataError(f"patch bank must be a non-empty (P, C, H, W) stack, got {patches.shape}")
        if patches.min() < 0 or patches.max() > 1:
            raise DataError("patch values must lie in [0, 1]")
        object.__setattr__(self, "patches", patches)


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_images(blob, path):
    if len(blob) < 16:
        raise DataError(f"{path}: truncated header at byte offset {len(blob)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    payload = count * rows * cols
    if len(blob) - 16 < payload:
        raise DataError(
            f"{path}: truncated payload, expected {payload} bytes from offset 16, "
            f"file ends at offset {len(blob)}"
        )
    return np.frombuffer(blob, np.uint8, count=payload, offset=16).reshape(count, rows, cols)


def _parse_labels(blob, path):
    if len(blob) < 8:
        raise DataError(f"{path}: truncated header at byte offset {len(blob)}")
    magic, count = struct.unpack_from(">II", blob)
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    if len(blob) - 8 < count:
        raise DataError(f"{path}: truncated payload, expected {count} bytes from offset 8, "
                        f"file ends at offset {len(blob)}")
    return np.frombuffer(blob, np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, domain_tag="source", name="mnist"):
    """Read an MNIST-style IDX image/label file pair (optionally gzipped)."""
    pixels = _parse_images(_read_bytes(images_path), images_path)
    labels = _parse_labels(_read_bytes(labels_path), labels_path)
    if labels.size != pixels.shape[0]:
        raise DataError(f"count mismatch: {images_path} holds {pixels.shape[0]} images (offset 4), "
                        f"{labels_path} holds {labels.size} labels (offset 4)")
    images = pixels[:, None].astype(np.float64) / 255.0
    return Dataset(images, labels, domain_tag, name)


def idx_header(path):
    """Kind, magic, count and dimensions of one IDX file (labels included)."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(blob)}")
    (magic,) = struct.unpack_from(">I", blob)
    if magic == IDX_IMAGES_MAGIC:
        pixels = _parse_images(blob, path)
        return {"kind": "images", "magic": magic, "count": pixels.shape[0], "dims": pixels.shape[1:]}
    if magic == IDX_LABELS_MAGIC:
        labels = _parse_labels(blob, path)
        return {"kind": "labels", "magic": magic, "count": labels.size, "dims": (), "labels": labels}
    raise DataError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(N, H, W)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def to_rgb(d):
    """Replicate a single channel into three identical channels."""
    if d.images.shape[1] != 1:
        raise DataError(f"{d.name or 'dataset'} already has {d.images.shape[1]} channels")
    return Dataset(np.repeat(d.images, 3, axis=1), d.labels, d.domain_tag, d.name)


def _cosine_texture(rng, planes, n_waves, min_cycles, max_cycles, rr, cc):
    radius = rng.uniform(min_cycles, max_cycles, size=(planes, n_waves))
    angle = rng.uniform(0, np.pi, size=(planes, n_waves))
    phases = rng.uniform(0, 2 * np.pi, size=(planes, n_waves))
    amps = rng.uniform(0.2, 1.0, size=(planes, n_waves))
    fr = (radius * np.cos(angle))[..., None, None]
    fc = (radius * np.sin(angle))[..., None, None]
    waves = amps[..., None, None] * np.cos(2 * np.pi * (fr * rr + fc * cc) + phases[..., None, None])
    texture = waves.sum(axis=1)
    return texture / np.abs(texture).max(axis=(1, 2), keepdims=True)


def procedural_patch_bank(count, height, width, seed, n_waves=8, min_cycles=1.0, max_cycles=4.0,
                          brightness=(0.05, 0.85), chroma=0.15, contrast=(0.1, 0.5), color_texture=1.0):
    """Photo-like color fields: base color plus a cosine-mixture texture.

    A patch's base color is a luminance uniform in ``brightness`` plus an
    independent per-channel offset uniform in ``[-chroma, chroma]``.  The
    texture mixes ``n_waves`` plane waves with frequencies between
    ``min_cycles`` and ``max_cycles`` cycles across the patch, is scaled to
    ``[-1, 1]`` and weighted by an amplitude uniform in ``contrast``.
    ``color_texture`` blends an independent texture per channel (1) with one
    texture shared by all channels (0).  Values are clipped to ``[0, 1]``.
    """
    if not 0.0 <= color_texture <= 1.0:
        raise ValueError(f"color_texture must lie in [0, 1], got {color_texture}")
    rr, cc = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    patches = np.empty((count, 3, height, width))
    for p in range(count):
        rng = image_rng(seed, p)
        texture = _cosine_texture(rng, 3, n_waves, min_cycles, max_cycles, rr, cc)
        if color_texture < 1.0:
            shared = _cosine_texture(rng, 1, n_waves, min_cycles, max_cycles, rr, cc)
            texture = color_texture * texture + (1.0 - color_texture) * shared
            texture /= np.abs(texture).max(axis=(1, 2), keepdims=True)
        base = rng.uniform(*brightness) + rng.uniform(-chroma, chroma, size=(3, 1, 1))
        amplitude = rng.uniform(*contrast)
        patches[p] = np.clip(base + amplitude * texture, 0.0, 1.0)
    origin = (f"procedural(count={count}, seed={seed}, waves={n_waves}, cycles={min_cycles}-{max_cycles}, "
              f"brightness={brightness[0]}-{brightness[1]}, chroma={chroma}, "
              f"contrast={contrast[0]}-{contrast[1]}, color_texture={color_texture})")
    return PatchBank(patches, origin)


def _decode_rgb(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return arr.transpose(2, 0, 1)


def photo_patch_bank(photo_dir, count, height, width, seed):
    """Random ``height x width`` crops from the photos in ``photo_dir``."""
    photo_dir = Path(photo_dir)
    files = sorted(p for p in photo_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise DataError(f"{photo_dir}: no photos found")
    photos = [_decode_rgb(p) for p in files]
    for path, ph in zip(files, photos):
        if ph.shape[1] < height or ph.shape[2] < width:
            raise DataError(f"{path}: photo {ph.shape[1]}x{ph.shape[2]} smaller than patch {height}x{width}")
    patches = np.empty((count, 3, height, width))
    for p in range(count):
        rng = image_rng(seed, p)
        ph = photos[rng.integers(len(photos))]
        r = rng.integers(ph.shape[1] - height + 1)
        c = rng.integers(ph.shape[2] - width + 1)
        patches[p] = ph[:, r:r + height, c:c + width]
    return PatchBank(patches, f"photos({photo_dir}, count={count}, seed={seed})")


def synthesize_target(d, bank, seed, name="synth"):
    """Blend each digit into a random patch: ``|patch - digit|`` per channel."""
    if d.images.shape[1] != 3:
        raise DataError("synthesize_target expects a 3-channel dataset; apply to_rgb first")
    if bank.patches.shape[1:] != d.images.shape[1:]:
        raise DataError(f"patch geometry {bank.patches.shape[1:]} does not match digits {d.images.shape[1:]}")
    out = np.empty_like(d.images)
    for j in range(len(d)):
        patch = bank.patches[image_rng(seed, j).integers(bank.patches.shape[0])]
        out[j] = np.abs(patch - d.images[j])
    return Dataset(out, d.labels, "target", name)


def load_image_dir(dir_path, labels_file, domain_tag="target", name=None, num_classes=10):
    """Load images listed in a ``relative/path.png<TAB>label`` manifest."""
    dir_path = Path(dir_path)
    images, labels = [], []
    with open(labels_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                rel, label = line.split("\t")
                label = int(label)
            except ValueError:
                raise DataError(f"{labels_file}:{lineno}: expected 'path<TAB>label', got {line!r}") from None
            path = dir_path / rel
            if not path.is_file():
                raise DataError(f"{path}: missing file (manifest line {lineno})")
            if not 0 <= label < num_classes:
                raise DataError(f"{path}: label {label} out of range [0, {num_classes})")
            images.append(_decode_rgb(path))
            labels.append(label)
    if images:
        first = images[0].shape
        for j, im in enumerate(images):
            if im.shape != first:
                raise DataError(f"manifest entry {j}: image shape {im.shape} differs from {first}")
        stack = np.stack(images)
    else:
        stack = np.zeros((0, 3, 0, 0))
    return Dataset(stack, np.asarray(labels, dtype=np.int64), domain_tag, name or dir_path.name)


def save_image_dir(images, labels, dir_path, manifest="labels.tsv", prefix="img"):
    """Write 8-bit PNGs plus a manifest loadable by :func:`load_image_dir`."""
    from PIL import Image

    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    lines = []
    for j, (im, label) in enumerate(zip(images, labels)):
        rel = f"{prefix}{j:05d}.png"
        pixels = np.clip(np.rint(np.asarray(im).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        if pixels.shape[2] == 1:
            pixels = pixels[..., 0]
        Image.fromarray(pixels).save(dir_path / rel)
        lines.append(f"{rel}\t{int(label)}\n")
    (dir_path / manifest).write_text("".join(lines), encoding="utf-8")
    return dir_path / manifest


def subsample(d, n_per_class, seed, num_classes=None):
    """Class-balanced uniform subsample, ``n_per_class`` images per label."""
    classes = np.arange(num_classes) if num_classes else np.unique(d.labels)
    counts = {int(k): int(np.sum(d.labels == k)) for k in classes}
    short = {k: n for k, n in counts.items() if n < n_per_class}
    if short:
        raise DataError(f"need {n_per_class} images per class, have {counts}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, len(d)]))
    chosen = []
    for k in classes:
        members = np.flatnonzero(d.labels == k)
        chosen.append(rng.choice(members, size=n_per_class, replace=False))
    index = rng.permutation(np.concatenate(chosen))
    return d.take(index)


def label_checksum(labels):
    """Order-sensitive checksum of a label sequence."""
    return zlib.crc32(np.asarray(labels, dtype="<i8").tobytes())
