# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import functools
import json
import logging
import os
import struct

import numpy as np

from . import ArgumentError
from . import CheckpointError
from . import ShapeError

from .numcore import GradientTape
from .numcore import Operand
from .numcore import Rng
from .numcore import Var
from .numcore import add
from .numcore import as_matrix
from .numcore import matmul
from .numcore import relu
from .numcore import reshape
from .numcore import take

__all__ = [
    "AdamState",
    "EncoderSpec",
    "InstanceHeadSpec",
    "ModelSpec",
    "ParamStore",
    "centroids",
    "encode",
    "init_params",
    "load_checkpoint",
    "param_shapes",
    "project_instance",
    "save_checkpoint",
]

log = logging.getLogger(__name__)

MAGIC = b"EMBC"

FORMAT_VERSION = 1

ENCODER_KINDS = ("mlp", "conv")

CONV_KERNEL = 3

CONV_STRIDE = 2


class EncoderSpec:
    def __init__(
        self,
        widths: Sequence[int],
        kind: str = "mlp",
        raster_shape: Optional[Sequence[int]] = None,
        channels: Sequence[int] = (8, 16),
    ):
        self.widths = [int(w) for w in widths]
        self.kind = kind
        self.raster_shape = tuple(int(n) for n in raster_shape) if raster_shape else None
        self.channels = [int(c) for c in channels]
        _check_encoder_spec(self)

    @property
    def input_dim(self):
        return self.widths[0]

    @property
    def embedding_dim(self):
        return self.widths[-1]

    def conv_geometry(self) -> List[Tuple[int, int, int]]:
        """Returns (height, width, channels) after each conv layer."""
        assert self.raster_shape
        h, w, _c = self.raster_shape
        shapes = []
        for c in self.channels:
            h = (h - CONV_KERNEL) // CONV_STRIDE + 1
            w = (w - CONV_KERNEL) // CONV_STRIDE + 1
            shapes.append((h, w, c))
        return shapes

    def affine_widths(self):
        if self.kind == "conv":
            h, w, c = self.conv_geometry()[-1]
            return [h * w * c, *self.widths[1:]]
        return self.widths

    def to_dict(self) -> Dict[str, Any]:
        return {
            "widths": self.widths,
            "kind": self.kind,
            "raster_shape": list(self.raster_shape) if self.raster_shape else None,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        return cls(
            data["widths"],
            data.get("kind", "mlp"),
            data.get("raster_shape"),
            data.get("channels", (8, 16)),
        )


def _check_encoder_spec(spec: EncoderSpec):
    if spec.kind not in ENCODER_KINDS:
        raise ArgumentError(f"unknown encoder kind '{spec.kind}'")
    if len(spec.widths) < 2 or any(w <= 0 for w in spec.widths):
        raise ArgumentError(
            f"encoder widths must be at least two positive counts (got {spec.widths})"
        )
    if spec.kind != "conv":
        return
    if not spec.raster_shape or len(spec.raster_shape) != 3:
        raise ArgumentError("conv encoder requires a (height, width, channels) shape")
    h, w, c = spec.raster_shape
    if h * w * c != spec.widths[0]:
        raise ArgumentError(
            f"raster shape {spec.raster_shape} does not match input dim {spec.widths[0]}"
        )
    if not spec.channels or any(c <= 0 for c in spec.channels):
        raise ArgumentError(f"invalid conv channels {spec.channels}")
    for h, w, _c in spec.conv_geometry():
        if h < 1 or w < 1:
            raise ArgumentError(
                f"raster shape {spec.raster_shape} is too small for "
                f"{len(spec.channels)} conv layers"
            )


class InstanceHeadSpec:
    def __init__(self, embedding_dim: int, hidden_dim: int, output_dim: int):
        self.embedding_dim = int(embedding_dim)
        self.hidden_dim = int(hidden_dim)
        self.output_dim = int(output_dim)
        if min(self.embedding_dim, self.hidden_dim, self.output_dim) <= 0:
            raise ArgumentError("instance head dims must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "embedding_dim": self.embedding_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        return cls(data["embedding_dim"], data["hidden_dim"], data["output_dim"])


class ModelSpec:
    def __init__(self, encoder: EncoderSpec, head: InstanceHeadSpec, k: int):
        if head.embedding_dim != encoder.embedding_dim:
            raise ArgumentError(
                f"instance head expects dim {head.embedding_dim} but encoder "
                f"produces {encoder.embedding_dim}"
            )
        if k < 2:
            raise ArgumentError(f"cluster count must be at least 2 (got {k})")
        self.encoder = encoder
        self.head = head
        self.k = int(k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": self.encoder.to_dict(),
            "head": self.head.to_dict(),
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        return cls(
            EncoderSpec.from_dict(data["encoder"]),
            InstanceHeadSpec.from_dict(data["head"]),
            data["k"],
        )

    def __eq__(self, other: Any):
        return isinstance(other, ModelSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return (
            f"<ModelSpec {self.encoder.kind} {self.encoder.widths} "
            f"head={self.head.hidden_dim}x{self.head.output_dim} k={self.k}>"
        )


def param_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    enc = spec.encoder
    if enc.kind == "conv":
        assert enc.raster_shape
        c_in = enc.raster_shape[2]
        for j, c_out in enumerate(enc.channels):
            shapes[f"encoder.conv{j}.weight"] = (CONV_KERNEL * CONV_KERNEL * c_in, c_out)
            shapes[f"encoder.conv{j}.bias"] = (1, c_out)
            c_in = c_out
    widths = enc.affine_widths()
    for i in range(len(widths) - 1):
        shapes[f"encoder.{i}.weight"] = (widths[i], widths[i + 1])
        shapes[f"encoder.{i}.bias"] = (1, widths[i + 1])
    head = spec.head
    shapes["head.0.weight"] = (head.embedding_dim, head.hidden_dim)
    shapes["head.0.bias"] = (1, head.hidden_dim)
    shapes["head.1.weight"] = (head.hidden_dim, head.output_dim)
    shapes["head.1.bias"] = (1, head.output_dim)
    shapes["centroids"] = (spec.k, enc.embedding_dim)
    return shapes


class AdamState:
    def __init__(
        self,
        m: Dict[str, np.ndarray],
        v: Dict[str, np.ndarray],
        step: int = 0,
    ):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def for_tensors(cls, tensors: Dict[str, np.ndarray]):
        return cls(
            {name: np.zeros_like(t) for name, t in tensors.items()},
            {name: np.zeros_like(t) for name, t in tensors.items()},
        )

    def reset(self, name: str):
        self.m[name][...] = 0.0
        self.v[name][...] = 0.0

    def __repr__(self):
        return f"<AdamState step={self.step} tensors={len(self.m)}>"


class ParamStore:
    def __init__(
        self,
        spec: ModelSpec,
        tensors: Dict[str, np.ndarray],
        adam: Optional[AdamState] = None,
    ):
        self.spec = spec
        self.tensors = tensors
        self.grads = {name: np.zeros_like(t) for name, t in tensors.items()}
        self.adam = adam or AdamState.for_tensors(tensors)
        self.state: Dict[str, Any] = {}
        self.extras: Dict[str, np.ndarray] = {}

    def __getitem__(self, name: str):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def watch(self, tape: GradientTape) -> Dict[str, Var]:
        return {name: tape.leaf(name, t) for name, t in self.tensors.items()}

    def weights(self, tape: Optional[GradientTape] = None) -> Mapping[str, Operand]:
        return self.watch(tape) if tape is not None else self.tensors

    def assign(self, name: str, val: Any):
        cur = self.tensors[name]
        val = np.asarray(val, dtype=np.float64)
        if val.shape != cur.shape:
            raise ShapeError(f"cannot assign {val.shape} to '{name}' {cur.shape}")
        cur[...] = val

    def set_grads(self, grads: Mapping[str, np.ndarray]):
        """Stores grads in the gradient buffers. Tensors missing from
        grads get a zero gradient.
        """
        for name, buf in self.grads.items():
            g = grads.get(name)
            if g is None:
                buf.fill(0.0)
            elif np.shape(g) != buf.shape:
                raise ShapeError(
                    f"gradient for '{name}' has shape {np.shape(g)} (expected {buf.shape})"
                )
            else:
                buf[...] = g
        unknown = sorted(set(grads) - set(self.grads))
        if unknown:
            raise ShapeError(f"gradients for unknown tensors {unknown}")

    def copy(self):
        """Returns an independent snapshot, including optimizer state."""
        params = ParamStore(
            self.spec,
            {name: t.copy() for name, t in self.tensors.items()},
            AdamState(
                {name: m.copy() for name, m in self.adam.m.items()},
                {name: v.copy() for name, v in self.adam.v.items()},
                self.adam.step,
            ),
        )
        params.state = json.loads(json.dumps(self.state))
        params.extras = {name: t.copy() for name, t in self.extras.items()}
        return params

    def __repr__(self):
        return f"<ParamStore tensors={len(self.tensors)} step={self.adam.step}>"


def init_params(spec: ModelSpec, rng: Rng) -> ParamStore:
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name == "centroids":
            tensors[name] = rng.normal(0.0, 1.0, shape)
        else:
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
    return ParamStore(spec, tensors)


# =============================================================
# Forward
# =============================================================


def encode(params: ParamStore, batch: Any, tape: Optional[GradientTape] = None):
    """Returns embeddings h = f(x) for a batch of flattened samples."""
    spec = params.spec.encoder
    x = as_matrix(batch)
    if x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"encoder expects width {spec.input_dim} but batch is {x.shape}"
        )
    w = params.weights(tape)
    h: Any = _conv_stack(w, x, spec) if spec.kind == "conv" else x
    layers = len(spec.widths) - 1
    for i in range(layers):
        h = add(matmul(h, w[f"encoder.{i}.weight"]), w[f"encoder.{i}.bias"])
        if i < layers - 1:
            h = relu(h)
    return h


def _conv_stack(w: Mapping[str, Operand], x: np.ndarray, spec: EncoderSpec):
    assert spec.raster_shape
    n = x.shape[0]
    in_shape = spec.raster_shape
    out: Any = x
    for j, out_shape in enumerate(spec.conv_geometry()):
        cols = take(out, _patch_index(n, in_shape, out_shape))
        out = relu(
            add(matmul(cols, w[f"encoder.conv{j}.weight"]), w[f"encoder.conv{j}.bias"])
        )
        oh, ow, oc = out_shape
        out = reshape(out, (n, oh * ow * oc))
        in_shape = out_shape
    return out


@functools.lru_cache(maxsize=32)
def _patch_index(
    n: int,
    in_shape: Tuple[int, int, int],
    out_shape: Tuple[int, int, int],
):
    # Rows are (sample, y, x) and columns (dy, dx, channel) over
    # channel-last flattened samples.
    h, w, c = in_shape
    oh, ow, _oc = out_shape
    k = CONV_KERNEL
    y = np.arange(oh)[:, None] * CONV_STRIDE
    x = np.arange(ow)[None, :] * CONV_STRIDE
    origin = ((y * w + x) * c).reshape(-1)
    dy, dx, ch = np.meshgrid(np.arange(k), np.arange(k), np.arange(c), indexing="ij")
    offset = ((dy * w + dx) * c + ch).reshape(-1)
    patches = origin[:, None] + offset[None, :]
    sample = (np.arange(n) * (h * w * c))[:, None, None]
    index = (sample + patches[None, :, :]).reshape(n * oh * ow, k * k * c)
    index.flags.writeable = False
    return index


def project_instance(params: ParamStore, h: Any, tape: Optional[GradientTape] = None):
    """Returns instance features z = W2 relu(W1 h).

    Features are not normalized.
    """
    head = params.spec.head
    width = h.value.shape[1] if isinstance(h, Var) else as_matrix(h).shape[1]
    if width != head.embedding_dim:
        raise ShapeError(
            f"instance head expects width {head.embedding_dim} but got {width}"
        )
    w = params.weights(tape)
    z = relu(add(matmul(h, w["head.0.weight"]), w["head.0.bias"]))
    return add(matmul(z, w["head.1.weight"]), w["head.1.bias"])


def centroids(params: ParamStore, tape: Optional[GradientTape] = None):
    return params.weights(tape)["centroids"]


# =============================================================
# Checkpoints
# =============================================================

_GROUPS = ("param", "adam.m", "adam.v", "extra")

_HEADER = struct.Struct("<II")


def save_checkpoint(params: ParamStore, path: str):
    entries: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    for group, tensors in zip(_GROUPS, _group_tensors(params)):
        for name, t in tensors.items():
            if not np.all(np.isfinite(t)):
                raise CheckpointError(f"cannot save non-finite tensor '{name}' ({group})")
            a = np.ascontiguousarray(t, dtype="<f8")
            entries.append(
                {"group": group, "name": name, "shape": list(a.shape), "dtype": "<f8"}
            )
            payloads.append(a.tobytes())
    manifest = {
        "model": params.spec.to_dict(),
        "step": params.adam.step,
        "state": params.state,
        "tensors": entries,
    }
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(FORMAT_VERSION, len(raw)))
        f.write(raw)
        for payload in payloads:
            f.write(payload)
    os.replace(tmp, path)
    log.debug("Saved checkpoint %s (step %i)", path, params.adam.step)


def _group_tensors(params: ParamStore):
    return params.tensors, params.adam.m, params.adam.v, params.extras


def load_checkpoint(path: str, spec: Optional[ModelSpec] = None) -> ParamStore:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    manifest, offset = _read_manifest(data, path)
    groups: Dict[str, Dict[str, np.ndarray]] = {group: {} for group in _GROUPS}
    for entry in manifest["tensors"]:
        t, offset = _read_tensor(entry, data, offset, path)
        try:
            groups[entry["group"]][entry["name"]] = t
        except KeyError:
            raise CheckpointError(
                f"unknown tensor group '{entry['group']}' in {path}"
            ) from None
    if offset != len(data):
        raise CheckpointError(f"unexpected trailing bytes at offset {offset} in {path}")
    try:
        saved_spec = ModelSpec.from_dict(manifest["model"])
    except (KeyError, TypeError, ArgumentError) as e:
        raise CheckpointError(f"invalid model spec in {path}: {e}") from None
    if spec is not None and spec != saved_spec:
        raise CheckpointError(f"checkpoint {path} model {saved_spec} does not match {spec}")
    _check_shapes(groups, saved_spec, path)
    params = ParamStore(
        saved_spec,
        groups["param"],
        AdamState(groups["adam.m"], groups["adam.v"], int(manifest["step"])),
    )
    params.state = manifest.get("state") or {}
    params.extras = groups["extra"]
    return params


def _read_manifest(data: bytes, path: str):
    header_end = len(MAGIC) + _HEADER.size
    if len(data) < header_end or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, manifest_len = _HEADER.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} in {path} "
            f"(expected {FORMAT_VERSION})"
        )
    end = header_end + manifest_len
    if end > len(data):
        raise CheckpointError(f"truncated checkpoint manifest in {path}")
    try:
        manifest = json.loads(data[header_end:end].decode())
    except ValueError as e:
        raise CheckpointError(f"invalid checkpoint manifest in {path}: {e}") from None
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CheckpointError(f"invalid checkpoint manifest in {path}")
    return manifest, end


def _read_tensor(entry: Dict[str, Any], data: bytes, offset: int, path: str):
    if entry.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {entry.get('dtype')} in {path}")
    shape = tuple(entry["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + count * 8
    if end > len(data):
        raise CheckpointError(
            f"truncated checkpoint {path}: tensor '{entry['name']}' needs bytes "
            f"{offset}-{end} but file has {len(data)}"
        )
    t = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    return t.astype(np.float64).reshape(shape), end


def _check_shapes(groups: Dict[str, Dict[str, np.ndarray]], spec: ModelSpec, path: str):
    expected = param_shapes(spec)
    for group in ("param", "adam.m", "adam.v"):
        tensors = groups[group]
        if set(tensors) != set(expected):
            raise CheckpointError(
                f"checkpoint {path} tensors ({group}) do not match model spec"
            )
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise CheckpointError(
                    f"checkpoint {path} tensor '{name}' has shape {t.shape}, "
                    f"expected {expected[name]}"
                )
