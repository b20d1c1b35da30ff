# SPDX-License-Identifier: Apache-2.0

"""Joint training of the encoder, instance head and centroids.

A run proceeds in two phases. Warm-up trains the encoder and instance
head with the instance loss alone, after which k-means over the
embeddings of the raw dataset initializes the centroids. The joint
phase then minimizes the weighted sum of the instance, cluster and
anchor losses with one Adam step per minibatch.

Warm-up epochs are not counted in `epochs`. Metrics rows are numbered
by joint epoch, starting with a row for epoch 0 right after centroid
initialization.
"""

from __future__ import annotations

from typing import *

import csv
import logging
import os

import numpy as np

from . import ConfigError
from . import EndOfEpoch
from . import TrainingDivergence

from . import augment as augmentlib
from . import cluster
from . import losses
from . import metrics
from . import model as modellib

from .data import BatchPlan
from .data import Dataset
from .data import Minibatch
from .data import next_batch
from .model import AdamState
from .model import ParamStore
from .numcore import EVAL_STREAM
from .numcore import GradientTape
from .numcore import Rng
from .numcore import TRAIN_STREAM
from .numcore import backward
from .numcore import make_rng
from .numcore import restore_rng
from .numcore import rng_state
from .numcore import scalar

__all__ = [
    "AdamState",
    "EvalResult",
    "METRICS_HEADER",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "evaluate",
    "model_spec_for",
    "read_metrics",
    "train",
    "warmup_and_init",
]

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "step",
    "l_inst",
    "l_clus",
    "l_anch",
    "l_total",
    "nmi",
    "acc",
    "ari",
    "icd",
)

CLUSTER_MODE = "cluster"

REPRESENTATION_MODE = "representation"

EVAL_MODES = (CLUSTER_MODE, REPRESENTATION_MODE)

CHECKPOINT_NAME = "model.ckpt"

METRICS_NAME = "metrics.csv"


class TrainConfig:
    def __init__(
        self,
        k: int = 4,
        epochs: int = 200,
        batch_size: int = 64,
        tau: float = 0.5,
        nu: float = 1.0,
        alpha: float = 20.0,
        beta: float = 0.1,
        gamma: float = 0.1,
        lr: float = 0.0003,
        adam_beta1: float = 0.9,
        adam_beta2: float = 0.999,
        adam_eps: float = 1e-8,
        anchor_variant: str = "kl-anchor",
        detach_anchor: bool = False,
        target_interval: int = 1,
        warmup_epochs: int = 10,
        eval_interval: int = 10,
        seed: int = 0,
        inputs: Sequence[str] = augmentlib.DEFAULT_ROUTING,
        augment: str = "auto",
        encoder_kind: str = "auto",
        encoder_hidden: Sequence[int] = (128, 64),
        embedding_dim: int = 32,
        head_hidden: int = 0,
        proj_dim: int = 16,
        conv_channels: Sequence[int] = (8, 16),
        kmeans_restarts: int = cluster.KMEANS_RESTARTS,
        kmeans_max_iters: int = cluster.KMEANS_MAX_ITERS,
        drop_last: bool = False,
        snapshot_interval: int = 0,
    ):
        self.k = int(k)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.tau = float(tau)
        self.nu = float(nu)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.lr = float(lr)
        self.adam_beta1 = float(adam_beta1)
        self.adam_beta2 = float(adam_beta2)
        self.adam_eps = float(adam_eps)
        self.anchor_variant = anchor_variant
        self.detach_anchor = bool(detach_anchor)
        self.target_interval = int(target_interval)
        self.warmup_epochs = int(warmup_epochs)
        self.eval_interval = int(eval_interval)
        self.seed = int(seed)
        if isinstance(inputs, str):
            inputs = inputs.split(",")
        self.inputs = tuple(part.strip() for part in inputs)
        self.augment = augment
        self.encoder_kind = encoder_kind
        self.encoder_hidden = tuple(int(w) for w in encoder_hidden)
        self.embedding_dim = int(embedding_dim)
        self.head_hidden = int(head_hidden)
        self.proj_dim = int(proj_dim)
        self.conv_channels = tuple(int(c) for c in conv_channels)
        self.kmeans_restarts = int(kmeans_restarts)
        self.kmeans_max_iters = int(kmeans_max_iters)
        self.drop_last = bool(drop_last)
        self.snapshot_interval = int(snapshot_interval)

    def validate(self):
        checks = [
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.lr > 0, "lr must be positive"),
            (self.tau > 0, "tau must be positive"),
            (self.nu > 0, "nu must be positive"),
            (self.k >= 2, "k must be at least 2"),
            (0 <= self.adam_beta1 < 1, "adam_beta1 must be in [0, 1)"),
            (0 <= self.adam_beta2 < 1, "adam_beta2 must be in [0, 1)"),
            (self.adam_eps > 0, "adam_eps must be positive"),
            (self.target_interval >= 1, "target_interval must be at least 1"),
            (self.warmup_epochs >= 0, "warmup_epochs must be non-negative"),
            (self.eval_interval >= 1, "eval_interval must be at least 1"),
            (self.snapshot_interval >= 0, "snapshot_interval must be non-negative"),
            (self.seed >= 0, "seed must be non-negative"),
            (
                self.anchor_variant in losses.ANCHOR_VARIANTS,
                f"anchor_variant must be one of {', '.join(losses.ANCHOR_VARIANTS)}",
            ),
            (
                self.encoder_kind in ("auto", *modellib.ENCODER_KINDS),
                "encoder_kind must be auto, mlp or conv",
            ),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            augmentlib.decode_routing(self.inputs)
            losses.LossWeights(self.alpha, self.beta, self.gamma)
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(str(e)) from None
        return self

    @property
    def weights(self):
        return losses.LossWeights(self.alpha, self.beta, self.gamma)

    def as_dict(self) -> Dict[str, Any]:
        return {
            name: list(val) if isinstance(val, tuple) else val
            for name, val in vars(self).items()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid trainer config: {e}") from None

    def __repr__(self):
        return (
            f"<TrainConfig k={self.k} epochs={self.epochs} "
            f"anchor={self.anchor_variant} seed={self.seed}>"
        )


class EvalResult:
    def __init__(
        self,
        mode: str,
        labels: np.ndarray,
        scores: Optional[Dict[str, float]],
        icd: float,
    ):
        self.mode = mode
        self.labels = labels
        self.scores = scores
        self.icd = icd

    def __repr__(self):
        scores = (
            " ".join(f"{name}={val:.4f}" for name, val in self.scores.items())
            if self.scores
            else "no labels"
        )
        return f"<EvalResult {self.mode} {scores}>"


class TrainResult:
    def __init__(self, params: ParamStore, rows: List[Dict[str, Any]]):
        self.params = params
        self.rows = rows

    @property
    def final(self):
        return self.rows[-1]


# =============================================================
# Model setup
# =============================================================


def model_spec_for(config: TrainConfig, dataset: Dataset) -> modellib.ModelSpec:
    kind = config.encoder_kind
    if kind == "auto":
        kind = "conv" if dataset.modality == augmentlib.RASTER else "mlp"
    encoder = modellib.EncoderSpec(
        [dataset.dim, *config.encoder_hidden, config.embedding_dim],
        kind,
        dataset.raster_shape if kind == "conv" else None,
        config.conv_channels,
    )
    head = modellib.InstanceHeadSpec(
        config.embedding_dim,
        config.head_hidden or config.embedding_dim,
        config.proj_dim,
    )
    return modellib.ModelSpec(encoder, head, config.k)


def _transform_spec(config: TrainConfig, dataset: Dataset):
    return augmentlib.decode_transforms(
        config.augment, dataset.modality, dataset.raster_shape
    )


# =============================================================
# Adam
# =============================================================


def adam_step(
    state: AdamState,
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Applies one bias-corrected Adam update to params in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for '{name}'", name)
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# =============================================================
# Steps
# =============================================================


class _StepLosses:
    def __init__(self):
        self.sums = {"l_inst": 0.0, "l_clus": 0.0, "l_anch": 0.0, "l_total": 0.0}
        self.count = 0

    def add(self, vals: Dict[str, float]):
        for name, val in vals.items():
            self.sums[name] += val
        self.count += 1

    def means(self) -> Dict[str, Optional[float]]:
        if not self.count:
            return {name: None for name in self.sums}
        return {name: total / self.count for name, total in self.sums.items()}


def _apply_step(
    config: TrainConfig,
    params: ParamStore,
    tape: GradientTape,
    loss: Any,
    where: str,
):
    val = scalar(loss)
    if not np.isfinite(val):
        raise TrainingDivergence(f"non-finite loss {where}")
    params.set_grads(backward(tape, loss))
    adam_step(
        params.adam,
        params,
        params.grads,
        config.lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )
    return val


def _check_embeddings(h: np.ndarray, where: str):
    if not np.all(np.isfinite(h)):
        raise TrainingDivergence(f"non-finite embeddings {where}")


def _warmup_step(config: TrainConfig, params: ParamStore, batch: Minibatch):
    tape = GradientTape()
    z1 = modellib.project_instance(params, modellib.encode(params, batch.x1, tape), tape)
    z2 = modellib.project_instance(params, modellib.encode(params, batch.x2, tape), tape)
    l_inst = losses.instance_loss(z1, z2, config.tau)
    # Instance-only weights; alpha may be 0 in a joint-phase ablation
    weights = losses.LossWeights(config.alpha or 1.0, 0.0, 0.0)
    _apply_step(
        config,
        params,
        tape,
        losses.total_loss(weights, l_inst),
        f"in warm-up step {params.adam.step + 1}",
    )
    return scalar(l_inst)


def _joint_step(
    config: TrainConfig,
    params: ParamStore,
    batch: Minibatch,
    target: Optional[np.ndarray],
):
    tape = GradientTape()
    h0 = modellib.encode(params, batch.x0, tape)
    h1 = modellib.encode(params, batch.x1, tape)
    h2 = modellib.encode(params, batch.x2, tape)
    z1 = modellib.project_instance(params, h1, tape)
    z2 = modellib.project_instance(params, h2, tape)
    mu = modellib.centroids(params, tape)
    q0 = cluster.soft_assign(h0, mu, config.nu)
    q1 = cluster.soft_assign(h1, mu, config.nu)
    q2 = cluster.soft_assign(h2, mu, config.nu)
    p0 = target[batch.indices] if target is not None else cluster.compute_target(q0)
    p1 = p2 = None
    if config.anchor_variant == losses.CROSS_KL:
        p1, p2 = cluster.compute_target(q1), cluster.compute_target(q2)
    l_inst = losses.instance_loss(z1, z2, config.tau)
    l_clus = losses.cluster_loss(p0, q0)
    l_anch = losses.anchor_loss(
        config.anchor_variant,
        q0,
        q1,
        q2,
        p0,
        p1,
        p2,
        detach_anchor=config.detach_anchor,
    )
    total = losses.total_loss(config.weights, l_inst, l_clus, l_anch)
    step = params.adam.step + 1
    l_total = _apply_step(config, params, tape, total, f"at step {step}")
    vals = {
        "l_inst": scalar(l_inst),
        "l_clus": scalar(l_clus),
        "l_anch": scalar(l_anch),
        "l_total": l_total,
    }
    log.debug(
        "step %i: inst %.6f clus %.6f anch %.6f total %.6f",
        step,
        vals["l_inst"],
        vals["l_clus"],
        vals["l_anch"],
        l_total,
    )
    return vals


def _dataset_target(config: TrainConfig, params: ParamStore, dataset: Dataset):
    h = modellib.encode(params, dataset.samples)
    q = cluster.soft_assign(h, modellib.centroids(params), config.nu)
    return cluster.compute_target(q)


# =============================================================
# Warm-up
# =============================================================


def warmup_and_init(
    config: TrainConfig,
    dataset: Dataset,
    params: ParamStore,
    rng: Optional[Rng] = None,
) -> np.ndarray:
    """Runs instance-only warm-up then initializes centroids by k-means.

    Returns the initialized centroids, which are also assigned to
    params.
    """
    rng = rng if rng is not None else make_rng(config.seed, TRAIN_STREAM)
    spec = _transform_spec(config, dataset)
    routing = augmentlib.decode_routing(config.inputs)
    for epoch in range(1, config.warmup_epochs + 1):
        plan = BatchPlan(len(dataset), config.batch_size, rng, config.drop_last)
        epoch_losses = _StepLosses()
        while True:
            try:
                batch = next_batch(plan, dataset, spec, rng, routing)
            except EndOfEpoch:
                break
            l_inst = _warmup_step(config, params, batch)
            epoch_losses.add({"l_inst": l_inst})
        log.info(
            "warm-up epoch %i/%i: instance loss %.6f",
            epoch,
            config.warmup_epochs,
            epoch_losses.means()["l_inst"] or 0.0,
        )
    h = modellib.encode(params, dataset.samples)
    _check_embeddings(h, "before centroid initialization")
    km = cluster.kmeans_init(
        h,
        config.k,
        rng,
        max_iters=config.kmeans_max_iters,
        restarts=config.kmeans_restarts,
    )
    log.info("initialized %i centroids (inertia %.6g)", config.k, km.inertia)
    params.assign("centroids", km.centroids)
    params.adam.reset("centroids")
    return params["centroids"]


# =============================================================
# Evaluate
# =============================================================


def evaluate(
    params: ParamStore,
    dataset: Dataset,
    mode: str = CLUSTER_MODE,
    nu: float = 1.0,
    seed: int = 0,
    kmeans_restarts: int = cluster.KMEANS_RESTARTS,
) -> EvalResult:
    """Assigns every sample of dataset to a cluster and scores it.

    Cluster mode assigns by the centroids. Representation mode runs
    k-means on instance head features, seeded from the evaluation
    stream of `seed`.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode '{mode}'")
    h = modellib.encode(params, dataset.samples)
    if mode == CLUSTER_MODE:
        q = cluster.soft_assign(h, modellib.centroids(params), nu)
        labels = cluster.hard_assign(q)
    else:
        z = modellib.project_instance(params, h)
        labels = cluster.kmeans_init(
            z,
            params.spec.k,
            make_rng(seed, EVAL_STREAM),
            restarts=kmeans_restarts,
        ).labels
    scores = (
        metrics.score_all(labels, dataset.labels)
        if dataset.labels is not None and len(dataset) >= 2
        else None
    )
    icd = cluster.inter_cluster_distance(modellib.centroids(params))
    return EvalResult(mode, labels, scores, icd)


# =============================================================
# Train
# =============================================================


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: Optional[str] = None,
    resume: Optional[ParamStore] = None,
    eval_mode: str = CLUSTER_MODE,
) -> TrainResult:
    """Trains a model on dataset and returns it with its metrics rows.

    When `resume` is given, training continues from its saved epoch
    and random state for `config.epochs` additional epochs. When
    `out_dir` is given, metrics are written (appended on resume) to
    `metrics.csv` and the model to `model.ckpt` at every metrics row.

    A non-finite loss, gradient or embedding raises TrainingDivergence
    naming the last checkpoint written to `out_dir`.
    """
    config.validate()
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME) if out_dir else None
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return _train(config, dataset, out_dir, ckpt_path, resume, eval_mode)
    except TrainingDivergence as e:
        e.checkpoint = ckpt_path if ckpt_path and os.path.exists(ckpt_path) else None
        raise


def _train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: Optional[str],
    ckpt_path: Optional[str],
    resume: Optional[ParamStore],
    eval_mode: str,
):
    spec = _transform_spec(config, dataset)
    routing = augmentlib.decode_routing(config.inputs)
    if resume is not None:
        params = resume
        if not params.state.get("initialized") or "rng" not in params.state:
            raise ConfigError("cannot resume from a checkpoint taken before initialization")
        rng = restore_rng(params.state["rng"])
        start_epoch = int(params.state.get("epoch", 0))
    else:
        rng = make_rng(config.seed, TRAIN_STREAM)
        params = modellib.init_params(model_spec_for(config, dataset), rng)
        warmup_and_init(config, dataset, params, rng)
        params.state["initialized"] = True
        start_epoch = 0
    writer = _MetricsWriter(out_dir, append=resume is not None)
    rows: List[Dict[str, Any]] = []

    def record(epoch: int, step_losses: Optional[_StepLosses]):
        _check_embeddings(modellib.encode(params, dataset.samples), f"at epoch {epoch}")
        result = evaluate(
            params, dataset, eval_mode, config.nu, config.seed, config.kmeans_restarts
        )
        row = _metrics_row(epoch, params.adam.step, step_losses, result)
        _log_row(row)
        rows.append(row)
        writer.write(row)
        _save_state(params, rng, epoch, config)
        if ckpt_path:
            modellib.save_checkpoint(params, ckpt_path)

    if resume is None:
        record(0, None)
    end_epoch = start_epoch + config.epochs
    for epoch in range(start_epoch + 1, end_epoch + 1):
        plan = BatchPlan(len(dataset), config.batch_size, rng, config.drop_last)
        step_losses = _StepLosses()
        while True:
            try:
                batch = next_batch(plan, dataset, spec, rng, routing)
            except EndOfEpoch:
                break
            target = None
            if config.target_interval > 1:
                if params.adam.step % config.target_interval == 0 or "target" not in params.extras:
                    params.extras["target"] = _dataset_target(config, params, dataset)
                target = params.extras["target"]
            step_losses.add(_joint_step(config, params, batch, target))
        if epoch % config.eval_interval == 0 or epoch == end_epoch:
            record(epoch, step_losses)
        if out_dir and config.snapshot_interval and epoch % config.snapshot_interval == 0:
            _save_state(params, rng, epoch, config)
            modellib.save_checkpoint(
                params, os.path.join(out_dir, f"model-e{epoch}.ckpt")
            )
    return TrainResult(params, rows)


def _save_state(params: ParamStore, rng: Rng, epoch: int, config: TrainConfig):
    params.state.update(
        {
            "epoch": epoch,
            "rng": rng_state(rng),
            "config": config.as_dict(),
            "initialized": True,
        }
    )


def _metrics_row(
    epoch: int,
    step: int,
    step_losses: Optional[_StepLosses],
    result: EvalResult,
) -> Dict[str, Any]:
    row: Dict[str, Any] = {"epoch": epoch, "step": step}
    row.update(step_losses.means() if step_losses else dict.fromkeys(METRICS_HEADER[2:6]))
    scores = result.scores or {}
    for name in ("nmi", "acc", "ari"):
        row[name] = scores.get(name)
    row["icd"] = result.icd
    return row


def _log_row(row: Dict[str, Any]):
    log.info(
        "epoch %i step %i: %s",
        row["epoch"],
        row["step"],
        " ".join(
            f"{name}={_fmt_val(row[name])}"
            for name in METRICS_HEADER[2:]
            if row[name] is not None
        ),
    )


def _fmt_val(val: float):
    return f"{val:.4f}"


class _MetricsWriter:
    def __init__(self, out_dir: Optional[str], append: bool):
        self.path = os.path.join(out_dir, METRICS_NAME) if out_dir else None
        if not self.path:
            return
        os.makedirs(out_dir or ".", exist_ok=True)
        if append and os.path.exists(self.path):
            return
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def write(self, row: Dict[str, Any]):
        if not self.path:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([format_cell(row[name]) for name in METRICS_HEADER])


def format_cell(val: Any) -> str:
    if val is None:
        return ""
    if isinstance(val, float):
        return repr(val)
    return str(val)


def read_metrics(path: str) -> List[Dict[str, Any]]:
    """Returns metrics rows written by `train`.

    Empty cells read as None.
    """
    with open(path, newline="") as f:
        rows = []
        for raw in csv.DictReader(f):
            row: Dict[str, Any] = {}
            for name, val in raw.items():
                if val == "":
                    row[name] = None
                elif name in ("epoch", "step"):
                    row[name] = int(val)
                else:
                    row[name] = float(val)
            rows.append(row)
        return rows
