"""Ingestion of IDX datasets and PGM images into the canonical raster form.

Only dependency-free binary containers are supported: IDX (the MNIST
container: big-endian magic, big-endian 32-bit dimensions, raw unsigned
bytes) for datasets, and binary "P5" PGM for single images.  Pixels are
scaled by 1/255 (or 1/maxval) into [0, 1]; color inputs must be reduced
to grayscale before decomposition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsistencyError,
    FormatError,
    RangeError,
    TruncationError,
)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True, eq=False)
class Image:
    """A width x height grayscale raster stored row-major in [0, 1].

    The same container carries perturbation rasters, whose entries are
    signed but still bounded by 1 in magnitude.
    """

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise RangeError(
                f"image must be at least 2x2, got {self.width}x{self.height}"
            )
        pixels = np.ascontiguousarray(np.asarray(self.pixels, dtype=float))
        if pixels.ndim != 1 or pixels.size != self.width * self.height:
            raise RangeError(
                f"pixel array of length {pixels.size} does not match "
                f"{self.width}x{self.height}"
            )
        if not np.all(np.isfinite(pixels)) or float(np.abs(pixels).max()) > 1.0 + 1e-12:
            raise RangeError("pixel magnitudes must be finite and <= 1")
        object.__setattr__(self, "pixels", pixels)

    def as_matrix(self) -> np.ndarray:
        """Return the raster as an (height, width) array; [y, x] indexing."""
        return self.pixels.reshape(self.height, self.width)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Image":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise RangeError(f"expected a 2D array, got ndim={matrix.ndim}")
        return cls(width=matrix.shape[1], height=matrix.shape[0],
                   pixels=matrix.reshape(-1))

    def is_content(self) -> bool:
        """True when every pixel lies in [0, 1] (content, not perturbation)."""
        return bool(self.pixels.min() >= 0.0)


@dataclass(frozen=True, eq=False)
class LabeledExample:
    """An image with either a victim-task class id or a detector label."""

    image: Image
    label: int


@dataclass(eq=False)
class Dataset:
    """An ordered list of labeled examples sharing one image size."""

    examples: list
    name: str = ""
    num_classes: int = 2

    def __post_init__(self):
        if self.examples:
            w, h = self.examples[0].image.width, self.examples[0].image.height
            for ex in self.examples:
                if ex.image.width != w or ex.image.height != h:
                    raise ConsistencyError("all images in a dataset must share one size")
                if not 0 <= ex.label < self.num_classes:
                    raise RangeError(
                        f"label {ex.label} outside 0..{self.num_classes - 1}"
                    )

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def width(self) -> int:
        return self.examples[0].image.width

    @property
    def height(self) -> int:
        return self.examples[0].image.height

    def images(self) -> list:
        return [ex.image for ex in self.examples]

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=int)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncationError(f"{what}: expected {count} bytes, got {len(data)}")
    return data


def load_idx_pair(images_path: str, labels_path: str, name: str = "",
                  num_classes: int = 10) -> Dataset:
    """Load an IDX image/label file pair into a Dataset.

    Pixel bytes are scaled by 1/255.  The image file must carry magic 2051
    and three dimensions (count, rows, cols); the label file magic 2049 and
    one dimension.  The two counts must agree.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, "IDX image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic {magic}, expected {IDX_IMAGE_MAGIC}")
        payload = _read_exact(fh, count * rows * cols, "IDX image payload")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">ii", _read_exact(fh, 8, "IDX label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic {magic}, expected {IDX_LABEL_MAGIC}")
        label_payload = _read_exact(fh, label_count, "IDX label payload")
    if count != label_count:
        raise ConsistencyError(
            f"image count {count} does not match label count {label_count}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8).astype(float) / 255.0
    raw = raw.reshape(count, rows * cols)
    labels = np.frombuffer(label_payload, dtype=np.uint8)
    examples = [
        LabeledExample(Image(width=cols, height=rows, pixels=raw[i]), int(labels[i]))
        for i in range(count)
    ]
    return Dataset(examples=examples, name=name or images_path, num_classes=num_classes)


def save_idx_pair(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write a Dataset back to an IDX pair, quantizing pixels to bytes.

    Pixels that are exact multiples of 1/255 (anything loaded from IDX)
    round-trip bit-identically; anything else is rounded to the nearest
    1/255 step.
    """
    rows, cols = dataset.height, dataset.width
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, len(dataset), rows, cols))
        for ex in dataset.examples:
            quantized = np.rint(ex.image.pixels * 255.0).astype(np.uint8)
            fh.write(quantized.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(dataset)))
        fh.write(bytes(int(ex.label) for ex in dataset.examples))


def _next_pgm_token(fh) -> bytes:
    """Read one whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            raise TruncationError("PGM header ended early")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_pgm(path: str) -> Image:
    """Load a binary ("P5") PGM file, scaling pixels by 1/maxval."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 2, "PGM magic")
        if magic != b"P5":
            raise FormatError(f"expected binary PGM magic 'P5', got {magic!r}")
        width = int(_next_pgm_token(fh))
        height = int(_next_pgm_token(fh))
        maxval = int(_next_pgm_token(fh))
        if maxval < 1 or maxval > 255:
            raise RangeError(f"PGM maxval must be in 1..255, got {maxval}")
        payload = _read_exact(fh, width * height, "PGM payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(float) / float(maxval)
    return Image(width=width, height=height, pixels=pixels)


def save_pgm(image: Image, path: str) -> None:
    """Write a content image as binary PGM with maxval 255."""
    if not image.is_content():
        raise RangeError("only content images (pixels in [0, 1]) can be saved as PGM")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (image.width, image.height))
        fh.write(np.rint(image.pixels * 255.0).astype(np.uint8).tobytes())


def rgb_to_gray(r: float, g: float, b: float) -> float:
    """ITU-R 601 luma reduction of one [0, 1] RGB triple."""
    for name, value in (("r", r), ("g", g), ("b", b)):
        if not 0.0 <= value <= 1.0:
            raise RangeError(f"channel {name} outside [0, 1]: {value}")
    return 0.299 * r + 0.587 * g + 0.114 * b
