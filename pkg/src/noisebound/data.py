"""Dataset ingestion: IDX image/label files plus a synthetic fallback.

The IDX layout is the classic big-endian one: a 32-bit magic number
(2051 for image tensors, 2049 for label vectors), one 32-bit size per
dimension, then raw unsigned bytes.  Both plain and gzip-compressed files
are accepted; compression is sniffed from the leading two bytes rather
than the file name.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import RngStream
from .network import LabeledExample

__all__ = [
    "Dataset",
    "IdxParseError",
    "load_mnist",
    "write_idx_images",
    "write_idx_labels",
    "subset",
    "synthetic_blobs",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxParseError(Exception):
    """Structured parse failure: carries the file path plus the byte offset
    at which the problem was detected."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: byte {offset}: {reason}")


@dataclass(frozen=True)
class Dataset:
    examples: tuple[LabeledExample, ...]
    num_classes: int
    input_dim: int
    source: str

    def __post_init__(self):
        for i, ex in enumerate(self.examples):
            if ex.y >= self.num_classes:
                raise ValueError(f"example {i} has label {ex.y} >= num_classes {self.num_classes}")
            if ex.x.shape[0] != self.input_dim:
                raise ValueError(f"example {i} has dim {ex.x.shape[0]} != {self.input_dim}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == b"\x1f\x8b":  # gzip signature
        try:
            return gzip.decompress(raw)
        except OSError as exc:
            raise IdxParseError(path, 0, f"gzip decompression failed: {exc}") from exc
    return raw


def _parse_idx(path, payload: bytes, expected_magic: int, expected_ndim: int):
    if len(payload) < 4:
        raise IdxParseError(path, 0, f"file truncated: {len(payload)} bytes, need at least 4 for the magic")
    (magic,) = struct.unpack(">i", payload[:4])
    if magic != expected_magic:
        raise IdxParseError(path, 0, f"bad magic {magic}, expected {expected_magic}")
    header_end = 4 + 4 * expected_ndim
    if len(payload) < header_end:
        raise IdxParseError(path, len(payload), f"file truncated inside the {expected_ndim}-dim header")
    dims = struct.unpack(f">{expected_ndim}i", payload[4:header_end])
    if any(d < 0 for d in dims):
        raise IdxParseError(path, 4, f"negative dimension in header: {dims}")
    count = int(np.prod(dims)) if dims else 0
    body = payload[header_end:]
    if len(body) != count:
        raise IdxParseError(
            path,
            header_end + min(len(body), count),
            f"payload holds {len(body)} bytes but the header promises {count}",
        )
    return dims, np.frombuffer(body, dtype=np.uint8)


def load_mnist(image_path, label_path) -> Dataset:
    """Read an IDX image/label pair into a Dataset with pixels scaled into
    [0,1] (byte 255 -> 1.0) and images flattened row-major."""
    img_dims, img_bytes = _parse_idx(image_path, _read_file(image_path), IMAGE_MAGIC, 3)
    lbl_dims, lbl_bytes = _parse_idx(label_path, _read_file(label_path), LABEL_MAGIC, 1)
    n, rows, cols = img_dims
    if lbl_dims[0] != n:
        raise IdxParseError(label_path, 4, f"label count {lbl_dims[0]} != image count {n}")
    pixel_dim = rows * cols
    images = img_bytes.reshape(n, pixel_dim).astype(np.float64) / 255.0
    if lbl_bytes.size and int(lbl_bytes.max()) > 9:
        raise IdxParseError(label_path, 8 + int(np.argmax(lbl_bytes > 9)),
                            f"label {int(lbl_bytes.max())} outside 0..9")
    examples = tuple(LabeledExample(images[i], int(lbl_bytes[i])) for i in range(n))
    return Dataset(examples, num_classes=10, input_dim=pixel_dim, source=f"idx:{image_path}")


def write_idx_images(path, images: np.ndarray):
    """Write an (n, rows, cols) uint8 array in IDX image layout."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError(f"expected (n, rows, cols), got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", IMAGE_MAGIC))
        fh.write(struct.pack(">3i", *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"expected a label vector, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("labels must fit in a byte")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", LABEL_MAGIC))
        fh.write(struct.pack(">i", arr.shape[0]))
        fh.write(arr.astype(np.uint8).tobytes())


def subset(data: Dataset, m: int, rng: RngStream) -> Dataset:
    """Uniform sample of m examples without replacement."""
    if m > len(data):
        raise ValueError(f"requested subset of {m} from a dataset of {len(data)}")
    idx = rng.permutation(len(data))[:m]
    picked = tuple(data.examples[i] for i in idx)
    return Dataset(picked, data.num_classes, data.input_dim, data.source + f"|subset[{m}]")


def synthetic_blobs(n: int, input_dim: int, num_classes: int, separation: float,
                    rng: RngStream) -> Dataset:
    """K Gaussian clusters with unit within-cluster spread, centers scaled so
    the closest pair sits `separation` apart, features squashed into [0,1]."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 1:
        raise ValueError("need at least 1 point")
    directions = rng.normals(num_classes * input_dim).reshape(num_classes, input_dim)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    directions /= norms
    min_dist = min(
        float(np.linalg.norm(directions[i] - directions[j]))
        for i in range(num_classes)
        for j in range(i + 1, num_classes)
    )
    if separation > 0 and min_dist > 0:
        centers = directions * (separation / min_dist)
    else:
        centers = np.zeros_like(directions)
    labels = np.arange(n) % num_classes
    noise = rng.normals(n * input_dim).reshape(n, input_dim)
    raw = centers[labels] + noise
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    span = hi - lo
    feats = np.full_like(raw, 0.5)
    nonflat = span > 0
    feats[:, nonflat] = (raw[:, nonflat] - lo[nonflat]) / span[nonflat]
    examples = tuple(LabeledExample(feats[i], int(labels[i])) for i in range(n))
    return Dataset(examples, num_classes, input_dim, f"blobs[n={n},sep={separation}]")
