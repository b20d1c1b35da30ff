# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import csv
import logging
import os
import re

import numpy as np
import yaml

from . import ArgumentError
from . import EndOfEpoch
from . import ManifestError
from . import ParseError

from .augment import DEFAULT_ROUTING
from .augment import RASTER
from .augment import VECTOR
from .augment import TransformSpec
from .augment import batch_views
from .numcore import Rng

__all__ = [
    "BatchPlan",
    "Dataset",
    "Minibatch",
    "load_dataset",
    "next_batch",
    "read_pnm",
    "save_dataset",
    "synth_blobs",
    "synth_rings",
]

log = logging.getLogger(__name__)

FORMATS = ("auto", "csv", "binary", "pgm")

MANIFEST_SUFFIX = ".manifest"

_BINARY_DTYPE = "<f4"

_LABEL_DTYPE = "<i4"


class Dataset:
    def __init__(
        self,
        samples: Any,
        labels: Optional[Any] = None,
        modality: str = VECTOR,
        raster_shape: Optional[Sequence[int]] = None,
        name: str = "",
    ):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ArgumentError(f"samples must be an N x d matrix (got {samples.shape})")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(samples):
                raise ArgumentError(
                    f"{len(labels)} labels for {len(samples)} samples"
                )
            if len(labels) and labels.min() < 0:
                raise ArgumentError("labels must be non-negative")
        if modality == RASTER:
            if not raster_shape or int(np.prod(raster_shape)) != samples.shape[1]:
                raise ArgumentError(
                    f"raster shape {raster_shape} does not match sample "
                    f"width {samples.shape[1]}"
                )
        elif modality != VECTOR:
            raise ArgumentError(f"unknown modality '{modality}'")
        self.samples = samples
        self.labels = labels
        self.modality = modality
        self.raster_shape = tuple(raster_shape) if raster_shape else None
        self.name = name

    def __len__(self):
        return len(self.samples)

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def num_classes(self):
        return 0 if self.labels is None or not len(self.labels) else int(self.labels.max()) + 1

    def __repr__(self):
        return (
            f"<Dataset {self.name or self.modality} n={len(self)} dim={self.dim} "
            f"labels={'yes' if self.labels is not None else 'no'}>"
        )


class Minibatch:
    def __init__(
        self,
        x0: np.ndarray,
        x1: np.ndarray,
        x2: np.ndarray,
        labels: Optional[np.ndarray],
        indices: np.ndarray,
    ):
        self.x0 = x0
        self.x1 = x1
        self.x2 = x2
        self.labels = labels
        self.indices = indices

    def __len__(self):
        return len(self.indices)

    def __repr__(self):
        return f"<Minibatch n={len(self)}>"


# =============================================================
# Synthetic data
# =============================================================


def synth_blobs(
    k: int,
    per_cluster: int,
    dim: int,
    separation: float,
    sigma: float,
    rng: Rng,
) -> Dataset:
    """Returns K isotropic Gaussian clusters.

    When K <= dim, centers lie on random orthogonal directions and are
    exactly `separation` apart. Otherwise centers are spaced
    `separation` apart along a random direction.
    """
    if k < 2 or per_cluster < 1:
        raise ArgumentError(
            f"blobs require k >= 2 and per_cluster >= 1 (got {k}, {per_cluster})"
        )
    if dim < 1:
        raise ArgumentError(f"blobs require dim >= 1 (got {dim})")
    if separation < 0 or sigma < 0:
        raise ArgumentError("separation and sigma must be non-negative")
    if k <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        centers = q.T * (separation / np.sqrt(2.0))
    else:
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        centers = np.arange(k)[:, None] * separation * direction[None, :]
    labels = np.repeat(np.arange(k), per_cluster)
    samples = centers[labels] + rng.normal(0.0, sigma, (len(labels), dim))
    return Dataset(samples, labels, name=f"blobs-k{k}")


def synth_rings(k: int, per_cluster: int, noise: float, rng: Rng) -> Dataset:
    """Returns K concentric 2-D rings with radius `class + 1`."""
    if k < 2 or per_cluster < 1:
        raise ArgumentError(
            f"rings require k >= 2 and per_cluster >= 1 (got {k}, {per_cluster})"
        )
    labels = np.repeat(np.arange(k), per_cluster)
    angles = rng.uniform(0.0, 2.0 * np.pi, len(labels))
    radii = labels + 1.0 + rng.normal(0.0, noise, len(labels))
    samples = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    return Dataset(samples, labels, name=f"rings-k{k}")


# =============================================================
# Load / save
# =============================================================


def load_dataset(path: str, format: str = "auto") -> Dataset:
    if format not in FORMATS:
        raise ArgumentError(
            f"unknown dataset format '{format}' (expected one of {', '.join(FORMATS)})"
        )
    if format == "auto":
        format = _infer_format(path)
    if format == "csv":
        dataset = _load_csv(path)
    elif format == "binary":
        dataset = _load_binary(path)
    else:
        assert format == "pgm", format
        dataset = _load_pgm_dir(path)
    log.debug("loaded %s from %s (%s)", dataset, path, format)
    return dataset


def _infer_format(path: str):
    if os.path.isdir(path):
        return "pgm"
    if path.lower().endswith(".csv"):
        return "csv"
    return "binary"


def _remap_labels(raw: Sequence[str]):
    # Numeric labels keep their numeric order
    try:
        keys: Any = np.array([int(val) for val in raw])
    except ValueError:
        keys = np.asarray(raw)
    _, labels = np.unique(keys, return_inverse=True)
    return labels.reshape(-1)


def _load_csv(path: str):
    try:
        f = open(path, newline="")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or not all(name.strip() for name in header):
            raise ParseError(f"{path}, line 1: missing or empty header")
        has_labels = header[-1].strip().lower() == "label"
        width = len(header)
        rows: List[List[float]] = []
        raw_labels: List[str] = []
        for line, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(
                    f"{path}, line {line}: expected {width} fields, got {len(row)}"
                )
            if has_labels:
                raw_labels.append(row[-1].strip())
                row = row[:-1]
            try:
                rows.append([float(val) for val in row])
            except ValueError as e:
                raise ParseError(f"{path}, line {line}: {e}") from None
    n_features = width - 1 if has_labels else width
    if n_features < 1:
        raise ParseError(f"{path}, line 1: header has no feature columns")
    samples = np.array(rows, dtype=np.float64).reshape(len(rows), n_features)
    labels = _remap_labels(raw_labels) if has_labels else None
    return Dataset(samples, labels, name=os.path.basename(path))


def _manifest_path(path: str):
    return path + MANIFEST_SUFFIX


def _load_binary(path: str):
    manifest = _read_manifest(path)
    shape = manifest["shape"]
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    n = shape[0]
    n_values = int(np.prod(shape))
    sample_bytes = n_values * 4
    label_bytes = n * 4 if manifest["labels"] else 0
    expected = sample_bytes + label_bytes
    if len(data) != expected:
        offset = min(len(data), expected)
        raise ParseError(
            f"{path}: payload is {len(data)} bytes but manifest declares "
            f"{expected} (mismatch at offset {offset})"
        )
    samples = np.frombuffer(data, dtype=_BINARY_DTYPE, count=n_values)
    labels = (
        np.frombuffer(data, dtype=_LABEL_DTYPE, count=n, offset=sample_bytes)
        if manifest["labels"]
        else None
    )
    raster_shape = tuple(shape[1:]) if len(shape) == 4 else None
    return Dataset(
        samples.reshape(n, n_values // n),
        labels,
        RASTER if raster_shape else VECTOR,
        raster_shape,
        name=os.path.basename(path),
    )


def _read_manifest(path: str):
    manifest_path = _manifest_path(path)
    try:
        with open(manifest_path) as f:
            manifest = yaml.safe_load(f)
    except FileNotFoundError:
        raise ManifestError(f"missing manifest {manifest_path}") from None
    except (OSError, yaml.YAMLError) as e:
        raise ManifestError(f"cannot read manifest {manifest_path}: {e}") from None
    if not isinstance(manifest, dict):
        raise ManifestError(f"{manifest_path}: expected a mapping")
    if manifest.get("dtype") != _BINARY_DTYPE:
        raise ManifestError(
            f"{manifest_path}: unsupported dtype {manifest.get('dtype')!r} "
            f"(expected {_BINARY_DTYPE})"
        )
    shape = manifest.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) not in (2, 4)
        or not all(isinstance(dim, int) and dim >= 1 for dim in shape)
    ):
        raise ManifestError(
            f"{manifest_path}: shape must be [n, d] or [n, height, width, channels] "
            f"with positive sizes (got {shape!r})"
        )
    if not isinstance(manifest.get("labels"), bool):
        raise ManifestError(f"{manifest_path}: labels must be true or false")
    return manifest


def save_dataset(dataset: Dataset, path: str):
    """Writes dataset as a flat little-endian binary with a manifest.

    Samples are stored as 32-bit reals.
    """
    n = len(dataset)
    shape = [n, *dataset.raster_shape] if dataset.raster_shape else [n, dataset.dim]
    with open(path, "wb") as f:
        f.write(dataset.samples.astype(_BINARY_DTYPE).tobytes())
        if dataset.labels is not None:
            f.write(dataset.labels.astype(_LABEL_DTYPE).tobytes())
    manifest = {
        "dtype": _BINARY_DTYPE,
        "shape": shape,
        "labels": dataset.labels is not None,
    }
    with open(_manifest_path(path), "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)


# =============================================================
# PGM / PPM
# =============================================================

_PNM_SUFFIXES = (".pgm", ".ppm")

_PNM_HEADER_P = re.compile(
    rb"(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
    rb"(?:\s|#[^\n]*\n)+(\d+)\s"
)


def read_pnm(path: str) -> np.ndarray:
    """Returns a binary PGM (P5) or PPM (P6) image scaled to [0, 1].

    The result is channel-last with 1 or 3 channels.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    m = _PNM_HEADER_P.match(data)
    if not m:
        raise ParseError(f"{path}, offset 0: not a binary PGM/PPM header")
    magic, width, height, maxval = m.group(1), *map(int, m.groups()[1:])
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}, offset {m.start(4)}: invalid maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = ">u1" if maxval < 256 else ">u2"
    count = width * height * channels
    expected = count * np.dtype(dtype).itemsize
    payload = data[m.end() :]
    if len(payload) < expected:
        raise ParseError(
            f"{path}, offset {m.end() + len(payload)}: truncated pixel data "
            f"(expected {expected} bytes)"
        )
    pixels = np.frombuffer(payload, dtype=dtype, count=count)
    return pixels.reshape(height, width, channels).astype(np.float64) / maxval


def _load_pgm_dir(path: str):
    if not os.path.isdir(path):
        raise ParseError(f"{path} is not a directory")
    class_dirs = sorted(
        name for name in os.listdir(path) if os.path.isdir(os.path.join(path, name))
    )
    images: List[np.ndarray] = []
    labels: List[int] = []
    for label, name in enumerate(class_dirs):
        class_path = os.path.join(path, name)
        for filename in sorted(os.listdir(class_path)):
            if not filename.lower().endswith(_PNM_SUFFIXES):
                continue
            image_path = os.path.join(class_path, filename)
            image = read_pnm(image_path)
            if images and image.shape != images[0].shape:
                raise ParseError(
                    f"{image_path}: image shape {image.shape} differs from "
                    f"{images[0].shape}"
                )
            images.append(image)
            labels.append(label)
    if not images:
        raise ParseError(f"{path}: no PGM/PPM images found in class directories")
    shape = images[0].shape
    samples = np.vstack([image.reshape(1, -1) for image in images])
    return Dataset(samples, labels, RASTER, shape, name=os.path.basename(path))


# =============================================================
# Batches
# =============================================================


class BatchPlan:
    """One epoch of minibatch indices.

    The sample permutation is drawn from `rng` when the plan is
    created.
    """

    def __init__(self, n: int, batch_size: int, rng: Rng, drop_last: bool = False):
        if batch_size < 1:
            raise ArgumentError(f"batch size must be positive (got {batch_size})")
        self.n = n
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.permutation = rng.permutation(n)
        self.cursor = 0

    @property
    def num_batches(self):
        full, rest = divmod(self.n, self.batch_size)
        return full if self.drop_last or not rest else full + 1

    def next_indices(self):
        start = self.cursor
        stop = min(start + self.batch_size, self.n)
        if start >= self.n or (self.drop_last and stop - start < self.batch_size):
            raise EndOfEpoch()
        self.cursor = stop
        return self.permutation[start:stop]

    def __repr__(self):
        return f"<BatchPlan n={self.n} batch_size={self.batch_size} cursor={self.cursor}>"


def next_batch(
    plan: BatchPlan,
    dataset: Dataset,
    spec: TransformSpec,
    rng: Rng,
    routing: Sequence[str] = DEFAULT_ROUTING,
) -> Minibatch:
    indices = plan.next_indices()
    x0, x1, x2 = batch_views(spec, rng, dataset.samples[indices], routing)
    labels = dataset.labels[indices] if dataset.labels is not None else None
    return Minibatch(x0, x1, x2, labels, indices)
