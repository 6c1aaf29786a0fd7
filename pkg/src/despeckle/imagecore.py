"""Grayscale image I/O, synthetic test images, patch cropping and augmentation.

Images are plain 2-D ``float64`` numpy arrays of shape ``(height, width)``
with intensities in ``[0, 1]``. Nothing here mutates its input.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InvalidFloor,
    IoFailure,
    MalformedHeader,
    PatchTooLarge,
    SizeTooSmall,
    TruncatedData,
    UnsupportedFormat,
)

#: Smallest nonzero 8-bit level; applied before any log transform.
DEFAULT_FLOOR = 1.0 / 255.0

SYNTH_KINDS = ("checkerboard", "gradient", "blobs", "piecewise")
SYNTH_LOW, SYNTH_HIGH = 0.1, 0.9

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def as_image(data) -> np.ndarray:
    """Validate ``data`` as an image and return it as a float64 array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise UnsupportedFormat(f"expected a single-channel 2-D image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise SizeTooSmall(f"image must be at least 1x1, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise MalformedHeader(f"header ended at byte {pos} before field {len(tokens) + 1} of {count}")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeader(f"expected whitespace after header at byte {pos}")
    return tokens, pos + 1


def _parse_pgm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    tokens, data_start = _pgm_tokens(buf, 4)
    names = ("magic", "width", "height", "maxval")
    values = []
    for (tok, offset), name in zip(tokens[1:], names[1:]):
        try:
            values.append(int(tok))
        except ValueError:
            raise MalformedHeader(f"field {name!r} at byte {offset} is not an integer: {tok!r}") from None
    width, height, maxval = values
    if width < 1 or height < 1:
        raise MalformedHeader(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    npix = width * height
    if magic == b"P5":
        raw = buf[data_start:data_start + npix]
        if len(raw) < npix:
            raise TruncatedData(
                f"expected {npix} pixel bytes from byte {data_start}, file ends at byte {len(buf)}")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        body = buf[data_start:]
        fields = body.split()
        if len(fields) < npix:
            raise TruncatedData(f"expected {npix} ASCII samples after byte {data_start}, found {len(fields)}")
        try:
            pixels = np.array([int(f) for f in fields[:npix]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedHeader(f"non-integer ASCII sample after byte {data_start}: {exc}") from None
        if pixels.min() < 0 or pixels.max() > 255:
            raise MalformedHeader("ASCII sample outside 0..255")
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def _parse_png(buf: bytes) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(io.BytesIO(buf)) as im:
            im.load()
            if im.mode != "L":
                raise UnsupportedFormat(f"only 8-bit grayscale PNG is supported, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnsupportedFormat:
        raise
    except OSError as exc:
        raise TruncatedData(f"unreadable PNG data: {exc}") from None
    return arr.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PGM (P2/P5) or PNG as a ``[0, 1]`` image."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if buf.startswith(_PNG_MAGIC):
        return _parse_png(buf)
    if buf[:2] in (b"P5", b"P2"):
        return _parse_pgm(buf)
    if len(buf) < 2:
        raise MalformedHeader("missing magic number at byte 0")
    raise UnsupportedFormat(f"unrecognised magic {buf[:2]!r} at byte 0")


def quantize(image) -> np.ndarray:
    """Map ``[0, 1]`` intensities to 8-bit levels (round half up on v*255)."""
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(image, path) -> None:
    """Write ``image`` as a binary (P5) PGM."""
    img = as_image(image)
    h, w = img.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()
    try:
        parent = Path(path).parent
        if not parent.is_dir():
            raise OSError(f"directory {parent} does not exist")
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    """Sorted PGM/PNG files in ``directory``."""
    exts = {".pgm", ".png"}
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in exts)


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

def _rescale(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-12:
        return np.full_like(a, SYNTH_LOW)
    return SYNTH_LOW + (a - lo) * (SYNTH_HIGH - SYNTH_LOW) / (hi - lo)


def synth_image(kind: str, size: int, seed: int = 0) -> np.ndarray:
    """Deterministic ``size x size`` test image with levels in [0.1, 0.9].

    ``checkerboard`` and ``gradient`` ignore the seed. ``blobs`` is a sum of
    random Gaussian bumps; ``piecewise`` is a random Voronoi partition with
    constant levels per cell.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if size < 4:
        raise SizeTooSmall(f"synthetic images need size >= 4, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if kind == "checkerboard":
        cell = max(1, size // 4)
        parity = ((yy // cell) + (xx // cell)) % 2
        return np.where(parity == 0, SYNTH_LOW, SYNTH_HIGH)

    if kind == "gradient":
        row = np.linspace(SYNTH_LOW, SYNTH_HIGH, size)
        return np.tile(row, (size, 1))

    if kind == "blobs":
        field = np.zeros((size, size))
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0, size, 2)
            sigma = rng.uniform(size / 12, size / 4)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        return _rescale(field)

    # piecewise
    n_cells = int(rng.integers(4, 9))
    centers = rng.uniform(0, size, (n_cells, 2))
    levels = rng.uniform(SYNTH_LOW, SYNTH_HIGH, n_cells)
    levels[0], levels[1] = SYNTH_LOW, SYNTH_HIGH
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    return levels[np.argmin(d2, axis=-1)]


def two_region_image(size: int, low: float = 0.3, high: float = 0.7) -> np.ndarray:
    """Piecewise-constant test image: a ``high`` disk on a ``low`` background."""
    if size < 4:
        raise SizeTooSmall(f"size must be >= 4, got {size}")
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inside = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 4.0) ** 2
    return np.where(inside, high, low).astype(np.float64)


def synthetic_dataset(count: int, size: int, seed: int = 0) -> list[np.ndarray]:
    """``count`` synthetic images cycling through every kind."""
    return [synth_image(SYNTH_KINDS[i % len(SYNTH_KINDS)], size, seed=seed + i) for i in range(count)]


# ---------------------------------------------------------------------------
# patches, augmentation, floor
# ---------------------------------------------------------------------------

def crop_patch(image, size: int, seed=0) -> np.ndarray:
    """Random contiguous ``size x size`` crop; the offset is uniform over valid positions."""
    img = as_image(image)
    h, w = img.shape
    if size < 1 or size > min(h, w):
        raise PatchTooLarge(f"patch size {size} does not fit in a {h}x{w} image")
    rng = np.random.default_rng(seed)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size].copy()


@dataclass(frozen=True)
class AugmentParams:
    """Training-set augmentation: a right-angle rotation, then additive Gaussian noise."""

    rotation_set: Sequence[int] = (0, 90, 180, 270)
    noise_means: Sequence[float] = (0.0, 0.05)
    noise_variances: Sequence[float] = (0.0, 0.001)

    def __post_init__(self):
        if len(self.rotation_set) == 0:
            raise ValueError("rotation_set must be non-empty")
        if any(int(r) % 90 for r in self.rotation_set):
            raise ValueError("only multiples of 90 degrees are supported")
        if len(self.noise_means) == 0 or len(self.noise_variances) == 0:
            raise ValueError("noise_means and noise_variances must be non-empty")
        if any(v < 0 for v in self.noise_variances):
            raise ValueError("noise variances must be non-negative")


def augment(image, params: AugmentParams, seed=0) -> np.ndarray:
    img = as_image(image)
    rng = np.random.default_rng(seed)
    rotation = int(params.rotation_set[int(rng.integers(len(params.rotation_set)))])
    mean = float(params.noise_means[int(rng.integers(len(params.noise_means)))])
    var = float(params.noise_variances[int(rng.integers(len(params.noise_variances)))])
    out = np.rot90(img, k=(rotation // 90) % 4)
    out = out + mean + np.sqrt(var) * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def clamp_floor(image, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    if not 0.0 < floor < 1.0:
        raise InvalidFloor(f"floor must lie in (0, 1), got {floor}")
    return np.maximum(as_image(image), floor)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
