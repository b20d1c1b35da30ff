# SPDX-License-Identifier: Apache-2.0

"""Stochastic transforms used to generate correlated sample views.

A pipeline is described by a transform string, one transform per `;`
with `name=value` options:

    gaussian-noise sigma=0.1; feature-mask fraction=0.2 p=0.5

Each transform fires with probability `p` (default 1). Every transform
consumes one uniform draw for its gate whether or not it fires, so a
pipeline's random stream depends only on the pipeline and the input
shape.
"""

from __future__ import annotations

from typing import *

import logging
import re

import numpy as np
from scipy import ndimage

from . import ArgumentError
from . import ShapeError

from .numcore import Rng

__all__ = [
    "DEFAULT_ROUTING",
    "Transform",
    "TransformSpec",
    "apply",
    "batch_views",
    "decode_routing",
    "decode_transforms",
    "default_transforms",
    "make_views",
    "routed_views",
]

log = logging.getLogger(__name__)

VECTOR = "vector"

RASTER = "raster"

RAW = "raw"

AUG = "aug"

DEFAULT_ROUTING = (RAW, AUG, AUG)

DEFAULT_VECTOR_TRANSFORMS = (
    "gaussian-noise sigma=0.1; feature-mask fraction=0.2; "
    "random-scale low=0.8 high=1.25"
)

# No blur for small rasters - it washes out most of the signal.
DEFAULT_RASTER_TRANSFORMS = (
    "crop-resize min_area=0.5; horizontal-flip p=0.5; "
    "color-jitter strength=0.4 p=0.8; grayscale p=0.2"
)

_KIND_DEFAULTS: Dict[str, Tuple[str, Dict[str, float]]] = {
    "gaussian-noise": (VECTOR, {"sigma": 0.1}),
    "feature-mask": (VECTOR, {"fraction": 0.2}),
    "random-scale": (VECTOR, {"low": 0.8, "high": 1.25}),
    "crop-resize": (RASTER, {"min_area": 0.5}),
    "horizontal-flip": (RASTER, {}),
    "color-jitter": (RASTER, {"strength": 0.4}),
    "grayscale": (RASTER, {}),
}


class Transform:
    def __init__(self, kind: str, p: float = 1.0, **params: float):
        try:
            modality, defaults = _KIND_DEFAULTS[kind]
        except KeyError:
            raise ArgumentError(f"unknown transform '{kind}'") from None
        unknown = set(params) - set(defaults)
        if unknown:
            raise ArgumentError(
                f"unknown options for {kind}: {', '.join(sorted(unknown))}"
            )
        self.kind = kind
        self.modality = modality
        self.p = float(p)
        self.params = {**defaults, **{name: float(val) for name, val in params.items()}}
        _check_transform(self)

    def encode(self):
        opts = [f"{name}={val:g}" for name, val in self.params.items()]
        if self.p != 1.0:
            opts.append(f"p={self.p:g}")
        return " ".join([self.kind, *opts])

    def __repr__(self):
        return f"<Transform {self.encode()}>"


def _check_transform(t: Transform):
    if not 0.0 <= t.p <= 1.0:
        raise ArgumentError(f"{t.kind}: probability must be in [0, 1] (got {t.p})")
    params = t.params
    if t.kind == "gaussian-noise" and params["sigma"] < 0:
        raise ArgumentError("gaussian-noise: sigma must be non-negative")
    if t.kind == "feature-mask" and not 0.0 <= params["fraction"] <= 1.0:
        raise ArgumentError("feature-mask: fraction must be in [0, 1]")
    if t.kind == "random-scale" and not 0.0 < params["low"] <= params["high"]:
        raise ArgumentError("random-scale: expected 0 < low <= high")
    if t.kind == "crop-resize" and not 0.0 < params["min_area"] <= 1.0:
        raise ArgumentError("crop-resize: min_area must be in (0, 1]")
    if t.kind == "color-jitter" and not 0.0 <= params["strength"] <= 1.0:
        raise ArgumentError("color-jitter: strength must be in [0, 1]")


class TransformSpec:
    def __init__(
        self,
        transforms: Sequence[Transform] = (),
        modality: str = VECTOR,
        raster_shape: Optional[Sequence[int]] = None,
    ):
        if modality not in (VECTOR, RASTER):
            raise ArgumentError(f"unknown modality '{modality}'")
        for t in transforms:
            if t.modality != modality:
                raise ArgumentError(
                    f"transform {t.kind} applies to {t.modality} samples, "
                    f"not {modality}"
                )
        if modality == RASTER and (not raster_shape or len(raster_shape) != 3):
            raise ArgumentError("raster transforms require a (height, width, channels) shape")
        self.transforms = list(transforms)
        self.modality = modality
        self.raster_shape = tuple(raster_shape) if raster_shape else None

    def encode(self):
        return "; ".join(t.encode() for t in self.transforms)

    def __len__(self):
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __repr__(self):
        return f"<TransformSpec {self.modality} '{self.encode()}'>"


_OPTION_P = re.compile(r"([\w\-]+)\s*=\s*([^\s;]+)")


def decode_transforms(
    s: str,
    modality: str = VECTOR,
    raster_shape: Optional[Sequence[int]] = None,
):
    """Returns a transform spec for a transform string.

    `auto` selects the default pipeline for modality. An empty string
    or `none` selects the identity pipeline.
    """
    s = s.strip()
    if s == "auto":
        s = default_transforms(modality)
    elif s.lower() == "none":
        s = ""
    transforms: List[Transform] = []
    for part in filter(None, (part.strip() for part in s.split(";"))):
        kind, _, rest = part.partition(" ")
        opts = {name: _option_val(name, val, part) for name, val in _OPTION_P.findall(rest)}
        leftover = _OPTION_P.sub("", rest).strip()
        if leftover:
            raise ArgumentError(f"cannot parse transform options '{leftover}' in '{part}'")
        transforms.append(Transform(kind, **opts))
    return TransformSpec(transforms, modality, raster_shape)


def _option_val(name: str, val: str, part: str):
    try:
        return float(val)
    except ValueError:
        raise ArgumentError(f"invalid value for {name} in '{part}': {val}") from None


def default_transforms(modality: str):
    return DEFAULT_RASTER_TRANSFORMS if modality == RASTER else DEFAULT_VECTOR_TRANSFORMS


def decode_routing(s: Union[str, Sequence[str]]) -> Tuple[str, str, str]:
    text = s if isinstance(s, str) else ",".join(s)
    parts = text.split(",")
    routing = tuple(part.strip().lower() for part in parts)
    if len(routing) != 3 or any(r not in (RAW, AUG) for r in routing):
        raise ArgumentError(
            f"inputs must be three comma separated values of raw or aug (got '{text}')"
        )
    return cast(Tuple[str, str, str], routing)


# =============================================================
# Apply
# =============================================================


def apply(spec: TransformSpec, rng: Rng, x: Any) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_sample(spec, x)
    out = x.copy()
    for t in spec.transforms:
        if rng.random() >= t.p:
            continue
        out = _TRANSFORMS[t.kind](out, rng, t.params)
    if spec.modality == RASTER:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def _check_sample(spec: TransformSpec, x: np.ndarray):
    if spec.modality == VECTOR and x.ndim != 1:
        raise ShapeError(f"vector transforms expect a 1-D sample (got {x.shape})")
    if spec.modality == RASTER and x.shape != spec.raster_shape:
        raise ShapeError(
            f"raster transforms expect shape {spec.raster_shape} (got {x.shape})"
        )


def make_views(spec: TransformSpec, rng: Rng, x: Any):
    """Returns (x0, x1, x2) where x0 is x and x1, x2 are independent views."""
    x = np.asarray(x, dtype=np.float64)
    return x.copy(), apply(spec, rng, x), apply(spec, rng, x)


def routed_views(
    spec: TransformSpec,
    rng: Rng,
    x: Any,
    routing: Sequence[str] = DEFAULT_ROUTING,
):
    if tuple(routing) == DEFAULT_ROUTING:
        return make_views(spec, rng, x)
    x = np.asarray(x, dtype=np.float64)
    return tuple(x.copy() if r == RAW else apply(spec, rng, x) for r in routing)


def batch_views(
    spec: TransformSpec,
    rng: Rng,
    samples: np.ndarray,
    routing: Sequence[str] = DEFAULT_ROUTING,
):
    """Returns routed views for each row of a flattened sample matrix."""
    shape = spec.raster_shape if spec.modality == RASTER else None
    slots: Tuple[List[np.ndarray], ...] = ([], [], [])
    for row in samples:
        x = row.reshape(shape) if shape else row
        for slot, view in zip(slots, routed_views(spec, rng, x, routing)):
            slot.append(view.reshape(-1))
    width = samples.shape[1]
    return tuple(
        np.vstack(slot) if slot else np.zeros((0, width)) for slot in slots
    )


# =============================================================
# Transforms
# =============================================================


def _gaussian_noise(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    return x + rng.normal(0.0, params["sigma"], x.shape)


def _feature_mask(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    count = int(round(params["fraction"] * x.size))
    masked = rng.permutation(x.size)[:count]
    x[masked] = 0.0
    return x


def _random_scale(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    return x * rng.uniform(params["low"], params["high"])


def _crop_resize(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    h, w, c = x.shape
    side = np.sqrt(rng.uniform(params["min_area"], 1.0))
    ch = max(1, int(round(h * side)))
    cw = max(1, int(round(w * side)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = x[y0 : y0 + ch, x0 : x0 + cw]
    yy, xx = np.meshgrid(
        np.linspace(0.0, ch - 1.0, h),
        np.linspace(0.0, cw - 1.0, w),
        indexing="ij",
    )
    return np.stack(
        [
            ndimage.map_coordinates(crop[:, :, i], [yy, xx], order=1, mode="nearest")
            for i in range(c)
        ],
        axis=-1,
    )


def _horizontal_flip(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    return x[:, ::-1, :].copy()


def _color_jitter(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    s = params["strength"]
    brightness = rng.uniform(1.0 - s, 1.0 + s)
    contrast = rng.uniform(1.0 - s, 1.0 + s)
    x = x * brightness
    m = x.mean()
    return np.clip((x - m) * contrast + m, 0.0, 1.0)


_LUMA = np.array([0.299, 0.587, 0.114])


def _grayscale(x: np.ndarray, rng: Rng, params: Dict[str, float]):
    c = x.shape[2]
    luma = x @ _LUMA if c == 3 else x.mean(axis=2)
    return np.repeat(luma[:, :, None], c, axis=2)


_TRANSFORMS: Dict[str, Callable[[np.ndarray, Rng, Dict[str, float]], np.ndarray]] = {
    "gaussian-noise": _gaussian_noise,
    "feature-mask": _feature_mask,
    "random-scale": _random_scale,
    "crop-resize": _crop_resize,
    "horizontal-flip": _horizontal_flip,
    "color-jitter": _color_jitter,
    "grayscale": _grayscale,
}
