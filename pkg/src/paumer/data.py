"""Synthetic segmentation scenes and the PMSEG1 dataset format.

PMSEG1 layout (all little-endian):

    magic      b"PMSEG1\\0"           7 bytes
    header     u32 count, u32 H, u32 W, u32 K
    samples    count x (float32 image H*W*3, uint8 labels H*W)

Label 255 is reserved for ignored pixels.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .model import ConfigError

IGNORE_INDEX = 255
MAGIC = b"PMSEG1\x00"
HEADER = struct.Struct("<IIII")
OCCLUDER_GREY = 0.5


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Scene generator settings.

    Each image has a background class and ``shapes`` rectangles/ellipses of
    other classes. ``small_fraction`` of the shapes are small (hard) objects.
    ``brightness_jitter`` shifts the whole image by a random offset so that a
    patch's absolute colour alone is ambiguous near class boundaries.
    ``occluders`` neutral grey squares are painted over the image without
    changing the labels; pixels under them can only be labelled from context.
    A ``noisy_fraction`` of the shapes get extra pixel noise ``noisy_sigma``, so
    their patches are only recognisable by pooling evidence across the shape.
    """

    height: int = 64
    width: int = 64
    num_classes: int = 5
    shapes: tuple[int, int] = (1, 4)
    noise: float = 0.1
    palette_seed: int = 0
    small_fraction: float = 0.3
    large_size: tuple[int, int] = (14, 36)
    small_size: tuple[int, int] = (5, 10)
    brightness_jitter: float = 0.0
    occluders: tuple[int, int] = (0, 0)
    occluder_size: tuple[int, int] = (12, 20)
    noisy_fraction: float = 0.0
    noisy_sigma: float = 1.0

    def __post_init__(self):
        for name in ("shapes", "large_size", "small_size", "occluders", "occluder_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 2:
            raise ConfigError("synthetic task needs num_classes >= 2")
        lo, hi = self.shapes
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad shapes-per-image range {self.shapes}")
        if self.num_classes > 255:
            raise ConfigError("labels are stored as uint8; num_classes must be <= 255")
        if self.occluders[0] < 0 or self.occluders[1] < self.occluders[0]:
            raise ConfigError(f"bad occluders-per-image range {self.occluders}")
        if self.noise < 0 or not 0 <= self.small_fraction <= 1:
            raise ConfigError("noise must be >= 0 and small_fraction in [0, 1]")
        if self.noisy_sigma < 0 or not 0 <= self.noisy_fraction <= 1:
            raise ConfigError("noisy_sigma must be >= 0 and noisy_fraction in [0, 1]")

    def palette(self) -> np.ndarray:
        return class_palette(self.num_classes, self.palette_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticTaskConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Shape:
    kind: str      # "rect" or "ellipse"
    cls: int
    y0: int
    x0: int
    h: int
    w: int
    noisy: bool = False


@dataclass
class SegSample:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    labels: np.ndarray  # (H, W) uint8
    shapes: tuple[Shape, ...] = ()
    background: int = 0


def class_palette(k: int, seed: int = 0) -> np.ndarray:
    """``k`` RGB colours spread over the cube, shuffled by ``seed``."""
    rng = np.random.default_rng(seed)
    hues = (np.arange(k) / k + rng.uniform(0, 1.0 / k)) % 1.0
    rng.shuffle(hues)
    # Alternate value so neighbouring hues also differ in brightness.
    value = np.where(np.arange(k) % 2 == 0, 0.8, 0.45)
    sat = 0.7
    rgb = np.empty((k, 3))
    for i, (h, v) in enumerate(zip(hues, value)):
        rgb[i] = _hsv_to_rgb(h, sat, v)
    return rgb


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if shape.kind == "rect":
        return ((yy >= shape.y0) & (yy < shape.y0 + shape.h)
                & (xx >= shape.x0) & (xx < shape.x0 + shape.w))
    cy = shape.y0 + (shape.h - 1) / 2.0
    cx = shape.x0 + (shape.w - 1) / 2.0
    ry, rx = shape.h / 2.0, shape.w / 2.0
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def rasterize(shapes: Iterable[Shape], background: int, height: int, width: int) -> np.ndarray:
    labels = np.full((height, width), background, dtype=np.uint8)
    for s in shapes:
        labels[shape_mask(s, height, width)] = s.cls
    return labels


def generate_sample(rng: np.random.Generator, config: SyntheticTaskConfig) -> SegSample:
    h, w, k = config.height, config.width, config.num_classes
    background = int(rng.integers(k))
    n_shapes = int(rng.integers(config.shapes[0], config.shapes[1] + 1))
    shapes = []
    for _ in range(n_shapes):
        small = rng.random() < config.small_fraction
        lo, hi = config.small_size if small else config.large_size
        sh = int(rng.integers(min(lo, h), min(hi, h) + 1))
        sw = int(rng.integers(min(lo, w), min(hi, w) + 1))
        cls = int(rng.integers(k - 1))
        cls += cls >= background
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        y0, x0 = int(rng.integers(0, h - sh + 1)), int(rng.integers(0, w - sw + 1))
        noisy = bool(config.noisy_fraction) and rng.random() < config.noisy_fraction
        shapes.append(Shape(kind, cls, y0, x0, sh, sw, noisy))
    labels = rasterize(shapes, background, h, w)
    image = config.palette()[labels]
    n_occ = int(rng.integers(config.occluders[0], config.occluders[1] + 1)) if config.occluders[1] else 0
    for _ in range(n_occ):
        top = min(config.occluder_size[1], h, w)
        side = int(rng.integers(min(config.occluder_size[0], top), top + 1))
        y0, x0 = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
        image[y0:y0 + side, x0:x0 + side] = OCCLUDER_GREY
    if config.brightness_jitter:
        image = image + rng.uniform(-config.brightness_jitter, config.brightness_jitter)
    sigma = np.full((h, w), config.noise)
    for shape in shapes:
        if config.noisy_fraction:
            # Later shapes cover earlier ones, so their noise level wins too.
            sigma[shape_mask(shape, h, w)] = config.noisy_sigma if shape.noisy else config.noise
    if sigma.any():
        image = image + rng.normal(0.0, 1.0, size=image.shape) * sigma[..., None]
    return SegSample(np.clip(image, 0.0, 1.0), labels, tuple(shapes), background)


def generate_dataset(rng: np.random.Generator | int, config: SyntheticTaskConfig,
                     count: int) -> list[SegSample]:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return [generate_sample(rng, config) for _ in range(count)]


def stack(samples: Iterable[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    if not samples:
        return np.zeros((0, 0, 0, 3), dtype=np.float32), np.zeros((0, 0, 0), dtype=np.uint8)
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]).astype(np.uint8))


def sample_digest(image: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    return h.hexdigest()


def write_dataset(samples: Iterable[SegSample], path, *, height: int | None = None,
                  width: int | None = None, num_classes: int = 0) -> list[str]:
    """Write samples to ``path``; returns per-sample digests in file order."""
    samples = list(samples)
    if samples:
        height, width = samples[0].labels.shape
    if height is None or width is None:
        raise ConfigError("an empty dataset needs explicit height and width")
    digests = []
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(HEADER.pack(len(samples), height, width, num_classes))
        for s in samples:
            if s.image.shape != (height, width, 3) or s.labels.shape != (height, width):
                raise ConfigError(f"sample shape {s.image.shape} inconsistent with {(height, width, 3)}")
            img = np.ascontiguousarray(s.image, dtype="<f4")
            lab = np.ascontiguousarray(s.labels, dtype=np.uint8)
            f.write(img.tobytes())
            f.write(lab.tobytes())
            digests.append(sample_digest(img, lab))
    # Readers never observe a half-written file.
    tmp.replace(path)
    return digests


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    height: int
    width: int
    num_classes: int


def read_header(f) -> DatasetHeader:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte 0")
    raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise DatasetFormatError(f"truncated header at byte {len(MAGIC) + len(raw)}")
    return DatasetHeader(*HEADER.unpack(raw))


def iter_dataset(path) -> Iterator[SegSample]:
    """Stream samples one at a time; never buffers the whole file."""
    with open(path, "rb") as f:
        hdr = read_header(f)
        img_bytes = hdr.height * hdr.width * 3 * 4
        lab_bytes = hdr.height * hdr.width
        offset = len(MAGIC) + HEADER.size
        for i in range(hdr.count):
            raw = f.read(img_bytes + lab_bytes)
            if len(raw) != img_bytes + lab_bytes:
                raise DatasetFormatError(
                    f"truncated sample {i} at byte {offset + len(raw)} "
                    f"(expected {img_bytes + lab_bytes} bytes)")
            image = np.frombuffer(raw, dtype="<f4", count=img_bytes // 4).reshape(hdr.height, hdr.width, 3)
            labels = np.frombuffer(raw, dtype=np.uint8, offset=img_bytes).reshape(hdr.height, hdr.width)
            if hdr.num_classes:
                bad = (labels >= hdr.num_classes) & (labels != IGNORE_INDEX)
                if bad.any():
                    raise DatasetFormatError(f"sample {i} has label {int(labels[bad][0])} >= K at byte {offset}")
            offset += len(raw)
            yield SegSample(image.copy(), labels.copy())
        if f.read(1):
            raise DatasetFormatError(f"trailing bytes after {hdr.count} samples at byte {offset}")


def read_dataset(path) -> list[SegSample]:
    return list(iter_dataset(path))


def load_arrays(path) -> tuple[np.ndarray, np.ndarray, DatasetHeader]:
    with open(path, "rb") as f:
        hdr = read_header(f)
    images, labels = stack(iter_dataset(path))
    if hdr.count == 0:
        images = np.zeros((0, hdr.height, hdr.width, 3), dtype=np.float32)
        labels = np.zeros((0, hdr.height, hdr.width), dtype=np.uint8)
    return images, labels, hdr


def convert_png_dir(directory, out_path, num_classes: int) -> int:
    """Pack ``<stem>_image.png`` / ``<stem>_label.png`` pairs into a PMSEG1 file.

    Images are 8-bit RGB (scaled to [0, 1]); labels are 8-bit class maps.
    """
    from PIL import Image

    directory = Path(directory)
    samples = []
    for img_path in sorted(directory.glob("*_image.png")):
        lab_path = img_path.with_name(img_path.name[: -len("_image.png")] + "_label.png")
        if not lab_path.exists():
            raise FileNotFoundError(f"missing label file {lab_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        labels = np.asarray(Image.open(lab_path), dtype=np.uint8)
        if labels.ndim != 2 or labels.shape != image.shape[:2]:
            raise ConfigError(f"{lab_path.name}: label map shape {labels.shape} vs image {image.shape}")
        bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
        if bad.any():
            raise ConfigError(f"{lab_path.name}: label {int(labels[bad][0])} outside [0, {num_classes})")
        samples.append(SegSample(image, labels))
    if not samples:
        raise FileNotFoundError(f"no *_image.png files in {directory}")
    write_dataset(samples, out_path, num_classes=num_classes)
    return len(samples)
