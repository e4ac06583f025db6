"""Bimodal datasets: MNIST IDX files, a synthetic stripe-pattern toy set, splits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .distributions import BERNOULLI, CATEGORICAL, FAMILIES

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    family: str
    input_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"modality {self.name!r}: dimension must be positive")
        if self.family not in FAMILIES:
            raise ValueError(f"modality {self.name!r}: unknown family {self.family!r}")
        if not self.input_shape:
            object.__setattr__(self, "input_shape", (self.dim,))
        if int(np.prod(self.input_shape)) != self.dim:
            raise ValueError(f"modality {self.name!r}: shape {self.input_shape} does not hold {self.dim} values")

    def to_dict(self) -> dict:
        return {"name": self.name, "dim": self.dim, "family": self.family, "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> ModalitySpec:
        return cls(d["name"], int(d["dim"]), d["family"], tuple(int(s) for s in d["input_shape"]))


def zero_fill(spec: ModalitySpec, batch: int | None = None, dtype=np.float64) -> np.ndarray:
    """Stand-in input for a missing modality: all zeros."""
    shape = (spec.dim,) if batch is None else (batch, spec.dim)
    return np.zeros(shape, dtype=dtype)


@dataclass
class BimodalDataset:
    x: np.ndarray
    w: np.ndarray
    x_spec: ModalitySpec
    w_spec: ModalitySpec
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.w):
            raise DataError(f"record counts differ: x has {len(self.x)}, w has {len(self.w)}")
        if self.x.shape[1:] != (self.x_spec.dim,) or self.w.shape[1:] != (self.w_spec.dim,):
            raise DataError("record widths do not match the modality specs")
        if self.w_spec.family == CATEGORICAL and len(self.w) and not np.all(self.w.sum(axis=1) == 1):
            raise DataError("categorical w rows must be one-hot")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.w, axis=1)

    def subset(self, idx, split: str | None = None) -> BimodalDataset:
        return BimodalDataset(self.x[idx], self.w[idx], self.x_spec, self.w_spec, split or self.split, dict(self.meta))


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, expect_magic: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expect_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expect_magic}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    need = int(np.prod(dims))
    if len(buf) - head < need:
        raise IdxTruncatedError(f"{path}: payload has {len(buf) - head} bytes, header promises {need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> BimodalDataset:
    """Read an MNIST-style image/label file pair.

    Pixels are scaled to [0, 1] by /255 and labels one-hot encoded. Files
    ending in ``.gz`` are decompressed transparently.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= classes:
        raise DataError(f"label {labels.max()} outside {classes} classes")
    shape = images.shape[1:]
    dim = int(np.prod(shape))
    x = images.reshape(len(images), dim).astype(np.float64) / 255.0
    return BimodalDataset(
        x,
        one_hot(labels.astype(np.int64), classes),
        ModalitySpec("x", dim, BERNOULLI, tuple(shape)),
        ModalitySpec("w", classes, CATEGORICAL),
        meta={"source": "idx"},
    )


def write_idx(dataset: BimodalDataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for pixel values on the 1/255 grid."""
    n = len(dataset)
    shape = dataset.x_spec.input_shape
    pix = np.rint(dataset.x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(f">{1 + len(shape)}I", n, *shape))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# -- toy ------------------------------------------------------------------------------

def prototypes(classes: int, dim: int) -> np.ndarray:
    """Binary stripe prototypes: rows 1..classes of a Sylvester-Hadamard matrix.

    Entry (i, j) is on when popcount(i & j) is even. For dim >= classes the
    truncated rows are pairwise distinct.
    """
    i = np.arange(1, classes + 1)[:, None]
    j = np.arange(dim)[None, :]
    parity = np.vectorize(lambda v: bin(v).count("1") & 1)(i & j)
    return (parity == 0).astype(np.float64)


def make_toy(classes: int, dim: int, n_per_class: int, noise: float, seed: int) -> BimodalDataset:
    """Synthetic bimodal set: each image is its class prototype with pixels
    flipped independently with probability ``noise``; w is the one-hot class."""
    if classes < 2 or dim < classes or n_per_class < 1 or not 0.0 <= noise <= 1.0:
        raise DataError(f"invalid toy sizes: classes={classes}, dim={dim}, n_per_class={n_per_class}, noise={noise}")
    rng = np.random.default_rng(seed)
    protos = prototypes(classes, dim)
    labels = np.repeat(np.arange(classes), n_per_class)
    flips = rng.random((len(labels), dim)) < noise
    x = np.abs(protos[labels] - flips)
    side = int(round(dim**0.5))
    shape = (side, side) if side * side == dim else (dim,)
    return BimodalDataset(
        x,
        one_hot(labels, classes),
        ModalitySpec("x", dim, BERNOULLI, shape),
        ModalitySpec("w", classes, CATEGORICAL),
        meta={"source": "toy", "classes": classes, "noise": noise},
    )


def split(dataset: BimodalDataset, train_fraction: float, seed: int) -> tuple[BimodalDataset, BimodalDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[:n_train]), "train"), dataset.subset(np.sort(perm[n_train:]), "test")
