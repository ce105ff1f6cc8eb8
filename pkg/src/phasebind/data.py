"""Synthetic binary image datasets with per-object ground truth.

Four generators reproduce the experiment datasets (bars, corners, 3-shapes,
MNIST+shape).  Every image draws from its own random stream keyed by
``(seed, image_index)`` so any image can be regenerated independently of the
others.  MNIST itself is read from local IDX files.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

KINDS = ("bars", "corners", "three_shapes", "mnist_plus_shape")
DEFAULT_SIDE = {"bars": 20, "corners": 28, "three_shapes": 20, "mnist_plus_shape": 28}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CORNER_ARM = 4
SQUARE_SPAN = 12
SHAPE_BOX = 7


class IdxFormatError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class GroundTruth:
    """Object membership of every pixel.

    ``masks`` has shape ``(object_count, height, width)``; a pixel may belong
    to several objects (bars cross, shapes overlap).
    """

    masks: np.ndarray

    @property
    def object_count(self) -> int:
        return int(self.masks.shape[0])

    def membership_count(self) -> np.ndarray:
        return self.masks.sum(axis=0)

    def single_membership(self) -> np.ndarray:
        """Masks restricted to pixels owned by exactly one object."""
        return self.masks & (self.membership_count() == 1)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    count: int
    seed: int = 0
    side: int | None = None
    n_bars: int = 6
    p_digit: float = 0.8
    p_shape: float = 0.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.side is None:
            object.__setattr__(self, "side", DEFAULT_SIDE[self.kind])
        if self.kind != "bars" and self.side != DEFAULT_SIDE[self.kind]:
            raise ValueError(f"{self.kind} images must be {DEFAULT_SIDE[self.kind]} pixels wide")


@dataclass
class Dataset:
    """Images ``(count, height, width)`` as uint8 {0,1} plus ground truths."""

    images: np.ndarray
    truths: list[GroundTruth] = field(default_factory=list)
    kind: str = ""

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> tuple[np.ndarray, GroundTruth | None]:
        return self.images[i], (self.truths[i] if self.truths else None)

    def __iter__(self) -> Iterator[tuple[np.ndarray, GroundTruth | None]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def flat(self, dtype=np.float32) -> np.ndarray:
        return self.images.reshape(len(self.images), -1).astype(dtype)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for one image."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index]))


def _assemble(kind: str, samples: list[tuple[np.ndarray, np.ndarray]]) -> Dataset:
    images = np.stack([img for img, _ in samples]).astype(np.uint8)
    truths = [GroundTruth(m.astype(bool)) for _, m in samples]
    return Dataset(images, truths, kind)


def generate(spec: DatasetSpec, mnist: np.ndarray | None = None) -> Dataset:
    if spec.kind == "bars":
        return gen_bars(spec)
    if spec.kind == "corners":
        return gen_corners(spec)
    if spec.kind == "three_shapes":
        return gen_three_shapes(spec)
    if mnist is None:
        raise ValueError("mnist_plus_shape needs binarized MNIST digits")
    return gen_mnist_plus_shape(spec, mnist)


# -- bars --------------------------------------------------------------------


def gen_bars(spec: DatasetSpec) -> Dataset:
    """Images of ``n_bars`` vertical and ``n_bars`` horizontal full-length bars."""
    side, n = spec.side, spec.n_bars
    if side < n:
        raise ValueError(f"cannot place {n} distinct bars per orientation in {side} pixels")
    samples = []
    for i in range(spec.count):
        rng = image_rng(spec.seed, i)
        cols = rng.choice(side, size=n, replace=False)
        rows = rng.choice(side, size=n, replace=False)
        masks = np.zeros((2 * n, side, side), dtype=bool)
        for j, c in enumerate(cols):
            masks[j, :, c] = True
        for j, r in enumerate(rows):
            masks[n + j, r, :] = True
        samples.append((masks.any(axis=0), masks))
    return _assemble("bars", samples)


# -- corners -----------------------------------------------------------------


def corner_glyph(orientation: int) -> np.ndarray:
    """L-shaped corner, arm length 4, thickness 1.

    ``orientation`` 0..3 places the vertex top-left, top-right, bottom-right,
    bottom-left of its 4x4 box.
    """
    g = np.zeros((CORNER_ARM, CORNER_ARM), dtype=bool)
    g[0, :] = True
    g[:, 0] = True
    return np.rot90(g, -orientation).copy()


def _paste(canvas: np.ndarray, glyph: np.ndarray, top: int, left: int) -> None:
    h, w = glyph.shape
    canvas[top:top + h, left:left + w] |= glyph


def gen_corners(spec: DatasetSpec) -> Dataset:
    """A square arrangement of four corners plus four free corners per image.

    Ground truth object 0 is the square (all four of its corners), objects
    1..4 are the free corners.
    """
    side = spec.side
    span = SQUARE_SPAN
    a = CORNER_ARM
    samples = []
    for i in range(spec.count):
        rng = image_rng(spec.seed, i)
        masks = np.zeros((5, side, side), dtype=bool)
        top, left = rng.integers(0, side - span, size=2)
        bottom, right = top + span, left + span
        _paste(masks[0], corner_glyph(0), top, left)
        _paste(masks[0], corner_glyph(1), top, right - a + 1)
        _paste(masks[0], corner_glyph(2), bottom - a + 1, right - a + 1)
        _paste(masks[0], corner_glyph(3), bottom - a + 1, left)
        for j in range(4):
            o = int(rng.integers(4))
            t, l = rng.integers(0, side - a + 1, size=2)
            _paste(masks[1 + j], corner_glyph(o), t, l)
        samples.append((masks.any(axis=0), masks))
    return _assemble("corners", samples)


# -- shapes ------------------------------------------------------------------


def _square_outline() -> np.ndarray:
    g = np.zeros((SHAPE_BOX, SHAPE_BOX), dtype=bool)
    g[[0, -1], :] = True
    g[:, [0, -1]] = True
    return g


def _triangle_outline() -> np.ndarray:
    g = np.zeros((SHAPE_BOX, SHAPE_BOX), dtype=bool)
    mid = SHAPE_BOX // 2
    for r in range(SHAPE_BOX):
        half = (r * mid + SHAPE_BOX - 2) // (SHAPE_BOX - 1)
        g[r, mid - half] = g[r, mid + half] = True
    g[-1, :] = True
    return g


SHAPES = {
    "square": _square_outline(),
    "triangle": _triangle_outline(),
    "rotated_triangle": _triangle_outline()[::-1].copy(),
}
SHAPE_NAMES = tuple(SHAPES)


def _random_shape(rng: np.random.Generator, side: int) -> np.ndarray:
    name = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
    t, l = rng.integers(0, side - SHAPE_BOX + 1, size=2)
    mask = np.zeros((side, side), dtype=bool)
    _paste(mask, SHAPES[name], t, l)
    return mask


def gen_three_shapes(spec: DatasetSpec) -> Dataset:
    """Three outline shapes per image, each drawn uniformly from the glyph set."""
    samples = []
    for i in range(spec.count):
        rng = image_rng(spec.seed, i)
        masks = np.stack([_random_shape(rng, spec.side) for _ in range(3)])
        samples.append((masks.any(axis=0), masks))
    return _assemble("three_shapes", samples)


def gen_mnist_plus_shape(spec: DatasetSpec, mnist: np.ndarray | Sequence[np.ndarray]) -> Dataset:
    """Composite of a random binary digit and a random shape, each with probability 0.8."""
    digits = np.asarray(mnist).astype(bool)
    if digits.ndim != 3 or len(digits) == 0:
        raise ValueError("need a non-empty stack of binarized digits")
    if digits.shape[1:] != (spec.side, spec.side):
        raise ValueError(f"digits must be {spec.side}x{spec.side}")
    samples = []
    for i in range(spec.count):
        rng = image_rng(spec.seed, i)
        objs = []
        if rng.random() < spec.p_digit:
            objs.append(digits[int(rng.integers(len(digits)))])
        if rng.random() < spec.p_shape:
            objs.append(_random_shape(rng, spec.side))
        masks = np.stack(objs) if objs else np.zeros((0, spec.side, spec.side), dtype=bool)
        samples.append((masks.any(axis=0), masks))
    return _assemble("mnist_plus_shape", samples)


# -- MNIST IDX ingestion -----------------------------------------------------


def _open_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    path = Path(source)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx_images(source) -> np.ndarray:
    """Parse an IDX unsigned-byte rank-3 file into ``(count, rows, cols)`` uint8.

    ``source`` is raw bytes or a path (``.gz`` is decompressed).
    """
    buf = _open_bytes(source)
    if len(buf) < 4:
        raise IdxFormatError("truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}: expected unsigned-byte data")
    rank = magic & 0xFF
    if rank != 3:
        raise IdxFormatError(f"expected rank-3 image data, got rank {rank}")
    if len(buf) < 16:
        raise IdxFormatError("truncated IDX header")
    n, rows, cols = struct.unpack(">III", buf[4:16])
    size = n * rows * cols
    if len(buf) - 16 < size:
        raise IdxFormatError(f"truncated IDX payload: need {size} bytes, have {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=16).reshape(n, rows, cols).copy()


def read_idx_labels(source) -> np.ndarray:
    buf = _open_bytes(source)
    if len(buf) < 8:
        raise IdxFormatError("truncated IDX header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(buf) - 8 < n:
        raise IdxFormatError("truncated IDX payload")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).copy()


def write_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def binarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Pixel is 1 iff ``gray / 255 >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    return (np.asarray(img, dtype=np.float64) / 255.0 >= threshold).astype(np.uint8)


# -- PBIMG export ------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> tuple[Path, Path | None]:
    """Write ``path`` (PBIMG v1) and, if ground truth exists, ``path.truth``.

    Each image is one line: its row-major pixels packed MSB-first into bytes,
    hex-encoded.  Each ground-truth line lists ``objectId:pix,pix,...`` tokens
    separated by spaces.
    """
    path = Path(path)
    n, h, w = ds.images.shape
    lines = [f"PBIMG v1 {n} {h} {w}"]
    for img in ds.images:
        lines.append(np.packbits(img.reshape(-1).astype(bool)).tobytes().hex())
    path.write_text("\n".join(lines) + "\n")
    if not ds.truths:
        return path, None
    tpath = truth_path(path)
    tlines = []
    for t in ds.truths:
        tokens = []
        for oid, m in enumerate(t.masks):
            idx = np.flatnonzero(m.reshape(-1))
            tokens.append(f"{oid}:" + ",".join(map(str, idx)))
        tlines.append(" ".join(tokens))
    tpath.write_text("\n".join(tlines) + "\n")
    return path, tpath


def truth_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".truth")


def load_dataset(path, kind: str = "") -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["PBIMG", "v1"]:
        raise DatasetFormatError(f"bad dataset header {lines[0]!r}")
    n, h, w = map(int, head[2:])
    if len(lines) - 1 < n:
        raise DatasetFormatError(f"dataset declares {n} images, found {len(lines) - 1}")
    nbytes = (h * w + 7) // 8
    images = np.empty((n, h, w), dtype=np.uint8)
    for i in range(n):
        raw = bytes.fromhex(lines[1 + i].strip())
        if len(raw) != nbytes:
            raise DatasetFormatError(f"image {i} has {len(raw)} bytes, expected {nbytes}")
        images[i] = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=h * w).reshape(h, w)
    truths = []
    tpath = truth_path(path)
    if tpath.exists():
        tlines = tpath.read_text().split("\n")
        for i in range(n):
            tokens = tlines[i].split() if i < len(tlines) else []
            masks = np.zeros((len(tokens), h, w), dtype=bool)
            for tok in tokens:
                oid, _, pix = tok.partition(":")
                if pix:
                    masks[int(oid)].reshape(-1)[[int(p) for p in pix.split(",")]] = True
            truths.append(GroundTruth(masks))
    return Dataset(images, truths, kind)
