"""Synthetic datasets, brightness measurements and the GSDS1 dataset file."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .nn.checkpoint import read_exact, read_blob, read_records, write_records
from .rng import make_rng

DATASET_MAGIC = b"GSDS1"


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    seed: int | None = None
    generator: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim < 2 or x.shape[0] < 1:
            raise ValueError("dataset needs at least one sample with a leading batch axis")
        if y.shape != (x.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
        if self.classes < 1 or y.min() < 0 or y.max() >= self.classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(x)):
            raise ValueError("dataset inputs must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, self.seed, self.generator, dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        return (
            self.classes == other.classes
            and self.seed == other.seed
            and self.generator == other.generator
            and self.meta == other.meta
            and self.inputs.shape == other.inputs.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


def _blob_centers(classes: int, dims: int) -> np.ndarray:
    # center c sits on axis (c mod dims) at radius 1 + c // dims: distinct and seed-free
    centers = np.zeros((classes, dims))
    for c in range(classes):
        centers[c, c % dims] = 1.0 + c // dims
    return centers


def gen_blobs(classes: int, per_class: int, dims: int, sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, ``per_class`` samples around each class center."""
    if classes < 2 or per_class < 1 or dims < 1:
        raise ValueError("gen_blobs needs classes >= 2, per_class >= 1, dims >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = make_rng(seed, "blobs")
    centers = _blob_centers(classes, dims)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(size=(len(labels), dims))
    x = centers[labels] + sigma * noise
    return Dataset(x, labels, classes, seed, "blobs", {"sigma": float(sigma)})


def gen_images(
    n: int,
    channels: int,
    height: int,
    width: int,
    brightness_spread: float,
    seed: int,
    classes: int = 10,
    noise: float = 0.05,
    pattern_amplitude: float = 0.15,
) -> Dataset:
    """Images with a controlled mean brightness.

    Image ``i`` has target brightness drawn uniformly from
    ``[0.5 - spread/2, 0.5 + spread/2]``. Labels are independent of brightness:
    each class owns a fixed zero-mean spatial pattern. The pattern plus pixel
    noise is re-centred per image, so before clipping to ``[0, 1]`` the image
    mean equals its target. Targets are kept in ``meta["brightness"]``.
    """
    if n < 1 or min(channels, height, width) < 1 or classes < 1:
        raise ValueError("gen_images needs positive n, channels, height, width, classes")
    if not 0.0 <= brightness_spread <= 1.0:
        raise ValueError("brightness_spread must lie in [0, 1]")
    shape = (channels, height, width)
    patterns = make_rng(seed, "image-patterns").normal(size=(classes,) + shape)
    patterns -= patterns.mean(axis=(1, 2, 3), keepdims=True)
    patterns /= patterns.std(axis=(1, 2, 3), keepdims=True)
    rng = make_rng(seed, "images")
    targets = 0.5 + brightness_spread * (rng.random(n) - 0.5)
    labels = rng.integers(0, classes, size=n)
    pert = pattern_amplitude * patterns[labels] + noise * rng.normal(size=(n,) + shape)
    pert -= pert.mean(axis=(1, 2, 3), keepdims=True)
    x = np.clip(targets[:, None, None, None] + pert, 0.0, 1.0)
    return Dataset(x, labels, classes, seed, "images", {"brightness": [float(t) for t in targets]})


def measurement(x, kind: str = "brightness", channel: int | None = None) -> float:
    """Scalar feature of one sample: mean brightness or the mean of one channel."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "brightness":
        return float(x.mean())
    if kind == "channel_mean":
        if channel is None or not 0 <= channel < x.shape[0]:
            raise ValueError(f"channel {channel} out of range for sample with {x.shape[0]} channels")
        return float(x[channel].mean())
    raise ValueError(f"unknown measurement {kind!r}")


def measure_batch(inputs, kind: str = "brightness", channel: int | None = None) -> np.ndarray:
    return np.array([measurement(x, kind, channel) for x in np.asarray(inputs)])


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    write_records(buf, [{
        "n": len(ds),
        "sample_shape": list(ds.sample_shape),
        "classes": ds.classes,
        "seed": ds.seed,
        "generator": ds.generator,
        "meta": ds.meta,
    }])
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    if not os.fspath(path):
        raise FileNotFoundError("empty dataset path")
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    if not os.fspath(path):
        raise FileNotFoundError("empty dataset path")
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if read_exact(buf, len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
        raise FormatError("not a GSDS1 dataset (bad magic)")
    records = read_records(buf)
    try:
        head = records[0]
        n, shape = int(head["n"]), tuple(head["sample_shape"])
        classes = int(head["classes"])
    except (IndexError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed dataset header: {e}") from None
    x = read_blob(buf, (n, *shape), "inputs")
    raw = read_exact(buf, 4 * n, "labels")
    y = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    if buf.read(1):
        raise FormatError("trailing bytes after label data")
    return Dataset(x, y, classes, head.get("seed"), head.get("generator", ""), head.get("meta", {}))
