"""Datasets and image files.

Images are held as column-stacked vectors in ``[-1, 1]``; a
:class:`Dataset` keeps them as the rows of a 2-D array together with the
image shape.
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .linops import image_to_vector, vector_to_image

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class DimensionMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, rows*cols), column-stacked
    shape: tuple
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != self.shape[0] * self.shape[1]:
            raise ValueError("images must be a (count, rows*cols) array")

    def __len__(self):
        return self.images.shape[0]

    def as_images(self):
        return vector_to_image(self.images, self.shape)

    def split_at(self, n_train):
        """First ``n_train`` images as train, the rest as test."""
        return (
            Dataset(self.images[:n_train], self.shape, "train", self.source),
            Dataset(self.images[n_train:], self.shape, "test", self.source),
        )


def bytes_to_unit(pixels):
    """Map bytes ``0..255`` linearly onto ``[-1, 1]``."""
    return np.asarray(pixels, dtype=np.float64) * (2.0 / 255.0) - 1.0


def unit_to_bytes(values):
    """Clamp to ``[-1, 1]`` and round back to bytes."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.rint((v + 1.0) * 127.5).astype(np.uint8)


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    body = len(raw) - header
    if body < count:
        raise TruncatedFileError(f"{path}: {body} data bytes, header declares {count}")
    if body > count:
        raise DimensionMismatchError(f"{path}: {body} data bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path=None, limit=None, split="train"):
    """Read an uncompressed MNIST IDX image file into a :class:`Dataset`.

    Labels are validated for count when given but otherwise ignored.
    """
    pixels = _read_idx(images_path, IDX_IMAGE_MAGIC)
    if pixels.ndim != 3:
        raise DimensionMismatchError(f"{images_path}: expected 3 dimensions, got {pixels.ndim}")
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
        if labels.shape[0] != pixels.shape[0]:
            raise DimensionMismatchError(
                f"{labels.shape[0]} labels for {pixels.shape[0]} images"
            )
    if limit is not None:
        pixels = pixels[:limit]
    shape = pixels.shape[1:]
    return Dataset(image_to_vector(bytes_to_unit(pixels)), shape, split, f"mnist:{images_path}")


def write_idx_images(path, images):
    """Write a ``(count, rows, cols)`` uint8 array as an IDX image file."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


_EXTENSIONS = (".png", ".pgm", ".pnm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def _to_gray(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ np.array([0.299, 0.587, 0.114])
    return arr


def load_image_dir(path, split="train", limit=None):
    """Load every raster image of a directory, converted to grayscale in ``[-1, 1]``.

    All images must share one size.  Unreadable files are skipped with a
    warning; an empty result raises ``ValueError``.
    """
    images, shape = [], None
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(_EXTENSIONS):
            continue
        try:
            with Image.open(os.path.join(path, name)) as img:
                gray = _to_gray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
        except OSError as exc:
            logger.warning("skipping %s: %s", name, exc)
            continue
        if shape is None:
            shape = gray.shape
        elif gray.shape != shape:
            logger.warning("skipping %s: size %s differs from %s", name, gray.shape, shape)
            continue
        images.append(bytes_to_unit(gray))
        if limit is not None and len(images) >= limit:
            break
    if not images:
        raise ValueError(f"no readable images in {path}")
    return Dataset(image_to_vector(np.stack(images)), shape, split, f"dir:{path}")


def synth_dataset(seed, count, rows, cols, split="train"):
    """Seeded stand-in for MNIST.

    Dark background (-1) with one or two bright bars, mostly tall and thin
    like pen strokes, and at most one soft blob.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    out = np.empty((count, rows, cols))
    for i in range(count):
        img = np.zeros((rows, cols))
        for _ in range(rng.integers(1, 3)):
            if rng.random() < 0.7:
                w = rng.integers(1, max(2, cols // 6) + 1)
                h = rng.integers(rows // 2, max(rows // 2 + 1, rows - 1))
            else:
                h = rng.integers(1, max(2, rows // 6) + 1)
                w = rng.integers(cols // 3, max(cols // 3 + 1, cols - 1))
            r0 = rng.integers(0, rows - h + 1)
            c0 = rng.integers(0, cols - w + 1)
            img[r0:r0 + h, c0:c0 + w] += rng.uniform(0.7, 1.0)
        for _ in range(rng.integers(0, 2)):
            cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
            s = rng.uniform(0.06, 0.12) * min(rows, cols)
            img += rng.uniform(0.8, 1.2) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        out[i] = np.clip(2.0 * img - 1.0, -1.0, 1.0)
    return Dataset(image_to_vector(out), (rows, cols), split, f"synthetic:{seed}")


def smooth_image(seed, rows, cols):
    """Single piecewise-smooth test image (rectangles on a gradient) in ``[-1, 1]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:rows, 0:cols] / max(rows, cols)
    img = 0.4 * (xx - 0.5) + 0.2 * np.sin(4 * yy)
    for _ in range(6):
        h, w = rng.integers(rows // 8, rows // 2), rng.integers(cols // 8, cols // 2)
        r0, c0 = rng.integers(0, rows - h), rng.integers(0, cols - w)
        img[r0:r0 + h, c0:c0 + w] += rng.uniform(-0.8, 0.8)
    return np.clip(img, -1.0, 1.0)


def save_image(u, path, shape=None):
    """Write one image (2-D array, or vector with ``shape``) as 8-bit grayscale.

    ``.pgm`` paths get a binary P5 graymap with maxval 255; other extensions
    are written by Pillow.
    """
    img = np.asarray(u, dtype=np.float64)
    if img.ndim == 1:
        if shape is None:
            raise ValueError("shape is required for vector input")
        img = vector_to_image(img, shape)
    data = unit_to_bytes(img)
    if str(path).lower().endswith(".pgm"):
        rows, cols = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    else:
        Image.fromarray(data, mode="L").save(path)


def read_pgm(path):
    """Read a binary P5 graymap written by :func:`save_image`; returns values in ``[-1, 1]``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(parts[4][: rows * cols], dtype=np.uint8).reshape(rows, cols)
    return bytes_to_unit(data)


def tile_grid(rows_of_images, pad=1, fill=-1.0):
    """Arrange a list of rows (each a list of 2-D images) into one padded canvas."""
    h = max(im.shape[0] for row in rows_of_images for im in row)
    w = max(im.shape[1] for row in rows_of_images for im in row)
    ncols = max(len(row) for row in rows_of_images)
    canvas = np.full(
        (len(rows_of_images) * (h + pad) + pad, ncols * (w + pad) + pad), fill, dtype=np.float64
    )
    for i, row in enumerate(rows_of_images):
        for j, im in enumerate(row):
            r0 = pad + i * (h + pad)
            c0 = pad + j * (w + pad)
            canvas[r0:r0 + im.shape[0], c0:c0 + im.shape[1]] = im
    return canvas


def save_grid(rows_of_images, path, pad=1):
    save_image(tile_grid(rows_of_images, pad), path)


def kernel_tiles(weights):
    """Each kernel (or dense row reshaped square when possible) rescaled into ``[-1, 1]``."""
    tiles = []
    for k in np.asarray(weights):
        m = np.max(np.abs(k))
        tiles.append(k / m if m > 0 else k)
    return tiles
