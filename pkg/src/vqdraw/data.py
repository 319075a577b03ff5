"""Dataset ingestion (IDX files, Gaussian mixtures) and PGM/PPM grid output."""
from __future__ import annotations

import gzip
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvtext

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PIXEL_SCALE = 255.0


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    examples: np.ndarray
    split: str = "train"
    labels: np.ndarray | None = None
    normalization: dict = field(default_factory=lambda: {"scale": 1.0, "offset": 0.0})

    def __len__(self) -> int:
        return self.examples.shape[0]

    @property
    def data_shape(self) -> tuple[int, ...]:
        return tuple(self.examples.shape[1:])


def normalize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(PIXEL_SCALE)


def denormalize(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * PIXEL_SCALE + 0.5).astype(np.uint8)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + math.prod(dims)
    if len(raw) != need:
        raise DataFormatError(f"{path}: dims {dims} need {need} bytes, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, split: str = "train") -> Dataset:
    """Read an IDX image file (optionally gzipped) into a [0, 1] dataset.

    Images come back as (n, 1, rows, cols) float32. Labels are optional and
    only carried along.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
        if labels.shape[0] != images.shape[0]:
            raise DataFormatError(f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    return Dataset(
        normalize(images)[:, None],
        split,
        labels,
        {"scale": 1.0 / PIXEL_SCALE, "offset": 0.0},
    )


def idx_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    data = idx_bytes(array)
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


# --------------------------------------------------------------------------
# synthetic mixtures
# --------------------------------------------------------------------------


@dataclass
class MixtureSpec:
    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    seed: int = 0
    box: tuple[float, float] | None = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim == 1 and scales.size == k:
            scales = scales[:, None]
        self.scales = np.broadcast_to(scales, (k, d)).copy()
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,) or np.any(self.weights <= 0):
            raise ValueError(f"need {k} positive component weights, got {self.weights}")
        if not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9):
            raise ValueError(f"component weights sum to {self.weights.sum()}, not 1")
        if np.any(self.scales < 0):
            raise ValueError("component scales must be non-negative")
        if self.box is None:
            reach = 4 * self.scales
            self.box = (float((self.means - reach).min()), float((self.means + reach).max()))
        self.box = (float(self.box[0]), float(self.box[1]))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "weights": self.weights.tolist(),
            "seed": self.seed,
            "box": list(self.box),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MixtureSpec:
        return cls(d["means"], d["scales"], d["weights"], int(d.get("seed", 0)), d.get("box"))

    @classmethod
    def load(cls, path) -> MixtureSpec:
        return cls.from_dict(kvtext.load(path))

    def save(self, path) -> None:
        kvtext.dump(self.to_dict(), path)


def ring_mixture(components: int = 8, radius: float = 1.0, scale: float = 0.05, seed: int = 0) -> MixtureSpec:
    """Equal-weight components spaced evenly on a circle in 2-D."""
    angles = 2 * np.pi * np.arange(components) / components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureSpec(means, scale, np.full(components, 1.0 / components), seed)


def gen_mixture(spec: MixtureSpec, n: int) -> Dataset:
    """Draw ``n`` points, deterministic under ``spec.seed``.

    Every point consumes a fixed block of uniforms, so the first ``m`` points
    of a draw of size ``n >= m`` equal a draw of size ``m``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    d = spec.dim
    u = np.random.default_rng(spec.seed).random((n, 1 + 2 * d))
    comp = np.minimum(np.searchsorted(np.cumsum(spec.weights), u[:, 0], side="right"), len(spec.weights) - 1)
    # Box-Muller on (0, 1] uniforms
    r = np.sqrt(-2.0 * np.log1p(-u[:, 1 : 1 + d]))
    z = r * np.cos(2 * np.pi * u[:, 1 + d :])
    points = spec.means[comp] + spec.scales[comp] * z
    points = np.clip(points, *spec.box).astype(np.float32)
    return Dataset(points, "train", comp, {"box": list(spec.box)})


# --------------------------------------------------------------------------
# image grids
# --------------------------------------------------------------------------

SEPARATOR_VALUE = 128


def _as_images(tensors) -> np.ndarray:
    arr = np.asarray([np.asarray(getattr(t, "data", t)) for t in tensors], dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] not in (1, 3):
        raise ValueError(f"expected (n, C, H, W) images with C in (1, 3), got {arr.shape}")
    return arr


def image_grid(tensors, rows: int, cols: int) -> np.ndarray:
    """Tile images row-major with a 1-pixel separator; returns (H, W, C) uint8."""
    imgs = _as_images(tensors)
    n, c, h, w = imgs.shape
    if rows * cols < n:
        raise ValueError(f"{rows}x{cols} grid cannot hold {n} images")
    if imgs.min() < 0 or imgs.max() > 1:
        warnings.warn(f"image values outside [0, 1] (range {imgs.min():.3g}..{imgs.max():.3g}); clipping")
    pixels = denormalize(imgs)
    canvas = np.full((rows * h + rows - 1, cols * w + cols - 1, c), SEPARATOR_VALUE, dtype=np.uint8)
    for k in range(n):
        r, q = divmod(k, cols)
        canvas[r * (h + 1) : r * (h + 1) + h, q * (w + 1) : q * (w + 1) + w] = pixels[k].transpose(1, 2, 0)
    return canvas


def pnm_bytes(canvas: np.ndarray) -> bytes:
    h, w, c = canvas.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(canvas).tobytes()


def write_image_grid(tensors, rows: int, cols: int, path) -> Path:
    """Write a binary PGM (1 channel) or PPM (3 channels) grid of images."""
    path = Path(path)
    path.write_bytes(pnm_bytes(image_grid(tensors, rows, cols)))
    return path


def read_pnm(path) -> np.ndarray:
    """Parse a binary P5/P6 file written by :func:`write_image_grid`."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"{path}: unsupported PNM header {tokens}")
    c = 1 if magic == b"P5" else 3
    body = raw[pos + 1 :]
    if len(body) != w * h * c:
        raise DataFormatError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
