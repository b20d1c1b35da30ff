# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import argparse
import csv
import logging
import os
import queue
import re
import statistics
import sys
import threading

import yaml

from . import __version__
from . import ArgumentError
from . import ConfigError
from . import Error
from . import TrainingDivergence

from . import config as configlib
from . import data as datalib
from . import model as modellib
from . import projection
from . import trainer

from .numcore import DATA_STREAM
from .numcore import make_rng

# Defer init to `_init_logging()`
log: logging.Logger = cast(logging.Logger, None)

EXIT_FAILED = 1
EXIT_USAGE = 2

OVERLAP_SEPARATION = 3.0

MODES = (trainer.CLUSTER_MODE, trainer.REPRESENTATION_MODE, "both")

stdout_lock = threading.Lock()


def _safe_print(s: str = ""):
    with stdout_lock:
        sys.stdout.write(s)
        sys.stdout.write("\n")
        sys.stdout.flush()


print = _safe_print


def main(args: Any = None):
    raise SystemExit(run(args if args is not None else sys.argv[1:]))


def run(argv: Sequence[str]) -> int:
    p = _init_parser()
    args = p.parse_args(list(argv))
    if args.version:
        print(f"embedcluster {__version__}")
        return 0
    if not args.cmd:
        p.print_usage(sys.stderr)
        return EXIT_USAGE
    _init_logging(args)
    try:
        return args.handler(args)
    except ArgumentError as e:
        _print_error(str(e))
        return EXIT_USAGE
    except Error as e:
        if log.getEffectiveLevel() <= logging.DEBUG:
            log.exception(args.cmd)
        _print_error(str(e))
        return EXIT_FAILED


def cmd_train(argv: Sequence[str]) -> int:
    return run(["train", *argv])


def cmd_eval(argv: Sequence[str]) -> int:
    return run(["eval", *argv])


def cmd_project(argv: Sequence[str]) -> int:
    return run(["project", *argv])


def cmd_bench(argv: Sequence[str]) -> int:
    return run(["bench", *argv])


def _print_error(msg: str):
    sys.stderr.write(f"embedcluster: {msg}\n")


# =============================================================
# Train
# =============================================================


def _train(args: Any):
    run_config = _run_config(args)
    config = run_config.train_config()
    dataset = _dataset(run_config)
    out = run_config["run.out"]
    configlib.write_config(run_config, out)
    resume = modellib.load_checkpoint(args.resume) if args.resume else None
    try:
        result = trainer.train(config, dataset, out, resume)
    except TrainingDivergence as e:
        _print_error(f"training diverged: {e}")
        if e.checkpoint:
            sys.stderr.write(f"last checkpoint: {e.checkpoint}\n")
        else:
            sys.stderr.write("no checkpoint was saved\n")
        return EXIT_FAILED
    print(_summary_line(result.final))
    print(
        f"wrote {os.path.join(out, trainer.METRICS_NAME)} and "
        f"{os.path.join(out, trainer.CHECKPOINT_NAME)}"
    )
    return 0


def _summary_line(row: Dict[str, Any]):
    if row.get("nmi") is None:
        return "final NMI/ACC/ARI unavailable (dataset has no labels)"
    return f"final NMI {row['nmi']:.4f} ACC {row['acc']:.4f} ARI {row['ari']:.4f}"


# =============================================================
# Eval
# =============================================================


def _eval(args: Any):
    run_config, params = _checkpoint_and_config(args)
    dataset = _dataset(run_config)
    state_config = _checkpoint_train_config(params, run_config)
    modes = (
        [trainer.CLUSTER_MODE, trainer.REPRESENTATION_MODE]
        if args.mode == "both"
        else [args.mode]
    )
    results = [
        trainer.evaluate(
            params,
            dataset,
            mode,
            state_config.nu,
            state_config.seed,
            state_config.kmeans_restarts,
        )
        for mode in modes
    ]
    print(f"{'mode':<16}{'nmi':>8}{'acc':>8}{'ari':>8}{'icd':>10}")
    for result in results:
        print(_eval_line(result))
    if args.out:
        _write_eval(args.out, dataset, results)
    return 0


def _eval_line(result: trainer.EvalResult):
    scores = result.scores
    cells = (
        [f"{scores[name]:>8.4f}" for name in ("nmi", "acc", "ari")]
        if scores
        else [f"{'-':>8}"] * 3
    )
    return f"{result.mode:<16}{''.join(cells)}{result.icd:>10.4f}"


def _write_eval(out: str, dataset: datalib.Dataset, results: List[trainer.EvalResult]):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "nmi", "acc", "ari", "icd"])
        for result in results:
            scores = result.scores or {}
            w.writerow(
                [result.mode]
                + [trainer.format_cell(scores.get(name)) for name in ("nmi", "acc", "ari")]
                + [trainer.format_cell(result.icd)]
            )
    with open(os.path.join(out, "assignments.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", *(result.mode for result in results), "label"])
        for i in range(len(dataset)):
            label = "" if dataset.labels is None else int(dataset.labels[i])
            w.writerow([i, *(int(result.labels[i]) for result in results), label])


# =============================================================
# Project
# =============================================================


def _project(args: Any):
    run_config, params = _checkpoint_and_config(args)
    dataset = _dataset(run_config)
    state_config = _checkpoint_train_config(params, run_config)
    clusters = trainer.evaluate(
        params, dataset, trainer.CLUSTER_MODE, state_config.nu
    ).labels
    features = modellib.project_instance(params, modellib.encode(params, dataset.samples))
    coords = projection.pca_2d(features)
    out = args.out or os.path.dirname(args.checkpoint) or "."
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "projection.csv")
    projection.write_projection(csv_path, coords, clusters, dataset.labels)
    print(f"wrote {len(coords)} rows to {csv_path}")
    if args.svg:
        svg_path = os.path.join(out, "projection.svg")
        projection.write_svg(svg_path, coords, clusters)
        print(f"wrote {svg_path}")
    return 0


def _checkpoint_and_config(args: Any):
    config_path = args.config or _config_beside(args.checkpoint)
    run_config = configlib.load_run_config(config_path, _arg_overrides(args))
    return run_config, modellib.load_checkpoint(args.checkpoint)


def _config_beside(checkpoint: str):
    path = os.path.join(os.path.dirname(checkpoint), configlib.CONFIG_NAME)
    return path if os.path.exists(path) else None


def _checkpoint_train_config(params: modellib.ParamStore, run_config: configlib.RunConfig):
    saved = params.state.get("config")
    if saved:
        return trainer.TrainConfig.from_dict(saved)
    return run_config.train_config()


# =============================================================
# Bench
# =============================================================

BUILTIN_GRIDS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "losses": {
        "Instance": {"trainer.beta": 0.0, "trainer.gamma": 0.0},
        "Instance+Cluster": {"trainer.gamma": 0.0},
        "Instance+Cluster+Anchor": {},
    },
    "anchors": {
        "KL[q0|q1]+KL[q0|q2]": {"trainer.anchor_variant": "kl-anchor"},
        "JSD[q1|q2]": {"trainer.anchor_variant": "jsd"},
        "KL[p0|q1]+KL[p0|q2]": {"trainer.anchor_variant": "kl-target"},
        "KL[p1|q2]+KL[p2|q1]": {"trainer.anchor_variant": "cross-kl"},
    },
    "inputs": {
        "x+x+x": {"augment.inputs": "raw,raw,raw"},
        "T(x)+T(x)+T(x)": {"augment.inputs": "aug,aug,aug"},
        "x+T(x)+T(x)": {"augment.inputs": "raw,aug,aug"},
    },
}


class BenchCell:
    def __init__(self, name: str, overrides: Dict[str, Any]):
        self.name = name
        overrides = dict(overrides)
        self.eval_mode = overrides.pop("eval_mode", trainer.CLUSTER_MODE)
        self.overrides = overrides
        self.rows: List[Dict[str, Any]] = []
        self.errors: List[str] = []

    @property
    def failed(self):
        return bool(self.errors)

    def median(self, name: str):
        vals = [row[name] for row in self.rows if row.get(name) is not None]
        return statistics.median(vals) if vals else None

    def __repr__(self):
        return f"<BenchCell {self.name}>"


class BenchRun:
    def __init__(self, cell: BenchCell, seed: int):
        self.cell = cell
        self.seed = seed


class BenchQueue(queue.Queue):
    def __init__(self, runs: List[BenchRun]):
        super().__init__()
        for run in runs:
            self.put(run)


class BenchRunner(threading.Thread):
    def __init__(self, queue: BenchQueue, base: configlib.RunConfig, out: str):
        super().__init__()
        self.queue = queue
        self.base = base
        self.out = out
        self.start()

    def run(self):
        while True:
            try:
                bench_run = self.queue.get(block=False)
            except queue.Empty:
                break
            else:
                _run_bench_cell(bench_run, self.base, self.out)


_cell_lock = threading.Lock()


def _run_bench_cell(bench_run: BenchRun, base: configlib.RunConfig, out: str):
    cell = bench_run.cell
    cell_config = configlib.RunConfig(base.values)
    try:
        cell_config.update({**cell.overrides, "run.seed": bench_run.seed}, cell.name)
        config = cell_config.train_config()
        dataset = _dataset(cell_config)
        cell_out = os.path.join(out, _slug(cell.name), f"seed-{bench_run.seed}")
        configlib.write_config(cell_config, cell_out)
        result = trainer.train(config, dataset, cell_out, eval_mode=cell.eval_mode)
    except Exception as e:
        if not isinstance(e, Error) and log.getEffectiveLevel() <= logging.DEBUG:
            log.exception(cell.name)
        log.warning("bench cell %s (seed %i) failed: %s", cell.name, bench_run.seed, e)
        with _cell_lock:
            cell.errors.append(str(e))
    else:
        log.info("bench cell %s (seed %i) finished", cell.name, bench_run.seed)
        with _cell_lock:
            cell.rows.append(result.final)


def _slug(name: str):
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower() or "cell"


def _bench(args: Any):
    base = _run_config(args)
    cells = [BenchCell(name, overrides) for name, overrides in _grid(args).items()]
    for cell in cells:
        # Fail early on invalid overrides
        configlib.RunConfig(base.values).update(cell.overrides, cell.name)
    seed0 = base["run.seed"]
    runs = [BenchRun(cell, seed0 + i) for cell in cells for i in range(args.seeds)]
    out = base["run.out"]
    os.makedirs(out, exist_ok=True)
    q = BenchQueue(runs)
    runners = [BenchRunner(q, base, out) for _ in range(max(1, args.concurrency or 1))]
    for runner in runners:
        runner.join()
    _print_bench_table(cells)
    _write_bench_csv(os.path.join(out, "bench.csv"), cells, args.seeds)
    return EXIT_FAILED if any(cell.failed for cell in cells) else 0


def _grid(args: Any) -> Dict[str, Dict[str, Any]]:
    if args.grid_file:
        try:
            with open(args.grid_file) as f:
                data = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read grid file {args.grid_file}: {e}") from None
        if not isinstance(data, dict) or not all(
            isinstance(val, dict) or val is None for val in data.values()
        ):
            raise ConfigError(
                f"grid file {args.grid_file} must map cell names to config overrides"
            )
        return {str(name): val or {} for name, val in data.items()}
    return BUILTIN_GRIDS[args.grid]


def _print_bench_table(cells: List[BenchCell]):
    width = max(len("cell"), *(len(cell.name) for cell in cells)) + 2
    print(f"{'cell':<{width}}{'nmi':>8}{'acc':>8}{'ari':>8}")
    for cell in cells:
        if cell.failed:
            print(
                f"{cell.name:<{width}}  failed ({len(cell.errors)} of "
                f"{len(cell.errors) + len(cell.rows)} seeds)"
            )
            continue
        vals = [cell.median(name) for name in ("nmi", "acc", "ari")]
        cols = "".join(f"{'-':>8}" if val is None else f"{val:>8.4f}" for val in vals)
        print(f"{cell.name:<{width}}{cols}")


def _write_bench_csv(path: str, cells: List[BenchCell], seeds: int):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "seeds", "nmi", "acc", "ari", "status"])
        for cell in cells:
            w.writerow(
                [cell.name, seeds]
                + [trainer.format_cell(cell.median(name)) for name in ("nmi", "acc", "ari")]
                + ["failed" if cell.failed else "ok"]
            )


# =============================================================
# Config and data
# =============================================================

_FLAG_KEYS = {
    "dataset": "data.dataset",
    "data_path": "data.path",
    "format": "data.format",
    "k": "trainer.k",
    "epochs": "trainer.epochs",
    "batch_size": "trainer.batch_size",
    "lr": "trainer.lr",
    "tau": "trainer.tau",
    "nu": "trainer.nu",
    "alpha": "trainer.alpha",
    "beta": "trainer.beta",
    "gamma": "trainer.gamma",
    "anchor_variant": "trainer.anchor_variant",
    "detach_anchor": "trainer.detach_anchor",
    "target_interval": "trainer.target_interval",
    "warmup_epochs": "trainer.warmup_epochs",
    "eval_interval": "trainer.eval_interval",
    "snapshot_interval": "trainer.snapshot_interval",
    "inputs": "augment.inputs",
    "augment": "augment.transforms",
    "seed": "run.seed",
    "out": "run.out",
}


def _arg_overrides(args: Any) -> Dict[str, Any]:
    overrides = {
        key: getattr(args, name)
        for name, key in _FLAG_KEYS.items()
        if getattr(args, name, None) is not None
    }
    if "data.path" in overrides and "data.dataset" not in overrides:
        overrides["data.dataset"] = "file"
    return overrides


def _run_config(args: Any):
    return configlib.load_run_config(args.config, _arg_overrides(args))


def _dataset(run_config: configlib.RunConfig) -> datalib.Dataset:
    kind = run_config["data.dataset"]
    rng = make_rng(run_config["run.seed"], DATA_STREAM)
    k = run_config["trainer.k"]
    if kind == "file":
        if not run_config["data.path"]:
            raise ConfigError("data.path is required for dataset 'file'")
        return datalib.load_dataset(run_config["data.path"], run_config["data.format"])
    if kind in ("blobs", "overlap"):
        sigma = run_config["data.sigma"]
        separation = (
            OVERLAP_SEPARATION * sigma if kind == "overlap" else run_config["data.separation"]
        )
        return datalib.synth_blobs(
            k, run_config["data.per_cluster"], run_config["data.dim"], separation, sigma, rng
        )
    if kind == "rings":
        return datalib.synth_rings(
            k, run_config["data.per_cluster"], run_config["data.noise"], rng
        )
    raise ConfigError(
        f"unknown dataset '{kind}' (expected blobs, overlap, rings, or file)"
    )


# =============================================================
# Parser
# =============================================================


def _init_logging(args: Any):
    logging.basicConfig(
        level=(
            logging.DEBUG
            if args.debug
            else logging.INFO
            if args.verbose
            else logging.WARNING
        ),
        format="%(levelname)s: [%(name)s] %(message)s",
    )
    globals()["log"] = logging.getLogger("embedcluster")


def _init_parser():
    p = argparse.ArgumentParser(prog="embedcluster")
    p.add_argument(
        "--version",
        action="store_true",
        help="Show version and exit.",
    )
    sub = p.add_subparsers(dest="cmd", metavar="COMMAND")

    train = sub.add_parser("train", help="Train a model.")
    _add_common_args(train)
    _add_config_args(train)
    train.add_argument(
        "--resume",
        metavar="CHECKPOINT",
        help="Continue training from CHECKPOINT for --epochs more epochs.",
    )
    train.set_defaults(handler=_train)

    eval_ = sub.add_parser("eval", help="Evaluate a checkpoint.")
    _add_common_args(eval_)
    _add_data_args(eval_)
    _add_checkpoint_arg(eval_)
    eval_.add_argument(
        "--mode",
        choices=MODES,
        default="both",
        help="Evaluation mode (default is both).",
    )
    eval_.add_argument("--out", metavar="DIR", help="Write eval.csv and assignments.csv to DIR.")
    eval_.set_defaults(handler=_eval)

    project = sub.add_parser("project", help="Export a 2-D PCA projection.")
    _add_common_args(project)
    _add_data_args(project)
    _add_checkpoint_arg(project)
    project.add_argument(
        "--out",
        metavar="DIR",
        help="Output directory (default is the checkpoint directory).",
    )
    project.add_argument(
        "--svg",
        action="store_true",
        help="Also write a static SVG scatter plot (requires matplotlib).",
    )
    project.set_defaults(handler=_project)

    bench = sub.add_parser("bench", help="Run an ablation grid over seeds.")
    _add_common_args(bench)
    _add_config_args(bench)
    bench.add_argument(
        "--grid",
        choices=sorted(BUILTIN_GRIDS),
        default="losses",
        help="Built-in grid (default is losses).",
    )
    bench.add_argument(
        "--grid-file",
        metavar="PATH",
        help="YAML file mapping cell names to config overrides.",
    )
    bench.add_argument(
        "--seeds",
        metavar="N",
        type=_positive_int,
        default=3,
        help="Number of seeds per cell (default is 3).",
    )
    bench.add_argument(
        "-C",
        "--concurrency",
        metavar="N",
        type=_positive_int,
        help="Max number of concurrent runs.",
    )
    bench.set_defaults(handler=_bench)
    return p


def _positive_int(s: str):
    try:
        val = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid int value: '{s}'") from None
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive value (got {val})")
    return val


def _add_common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="Config file (JSON, TOML, or YAML).")
    p.add_argument("--verbose", action="store_true", help="Show progress.")
    p.add_argument("--debug", action="store_true", help="Show debug info.")


def _add_data_args(p: argparse.ArgumentParser):
    p.add_argument(
        "--dataset",
        choices=("blobs", "overlap", "rings", "file"),
        help="Dataset source (default is blobs).",
    )
    p.add_argument("--data-path", metavar="PATH", help="Dataset file or directory.")
    p.add_argument(
        "--format",
        choices=datalib.FORMATS,
        help="Dataset file format (default is auto).",
    )
    p.add_argument("--k", type=int, metavar="K", help="Number of clusters.")
    p.add_argument("--seed", type=int, metavar="N", help="Random seed.")


def _add_checkpoint_arg(p: argparse.ArgumentParser):
    p.add_argument(
        "--checkpoint",
        metavar="PATH",
        required=True,
        help="Model checkpoint.",
    )


def _add_config_args(p: argparse.ArgumentParser):
    _add_data_args(p)
    p.add_argument("--epochs", type=int, metavar="N", help="Joint training epochs.")
    p.add_argument("--batch-size", type=int, metavar="N", help="Minibatch size.")
    p.add_argument("--lr", type=float, help="Adam learning rate.")
    p.add_argument("--tau", type=float, help="Contrastive temperature.")
    p.add_argument("--nu", type=float, help="Student-t degrees of freedom.")
    p.add_argument("--alpha", type=float, help="Instance loss weight.")
    p.add_argument("--beta", type=float, help="Cluster loss weight.")
    p.add_argument("--gamma", type=float, help="Anchor loss weight.")
    p.add_argument(
        "--anchor-variant",
        choices=("kl-anchor", "jsd", "kl-target", "cross-kl"),
        help="Anchor objective (default is kl-anchor).",
    )
    p.add_argument(
        "--detach-anchor",
        action="store_const",
        const=True,
        help="Treat the raw-sample assignments as a fixed anchor target.",
    )
    p.add_argument(
        "--inputs",
        metavar="R,R,R",
        help="View routing, each of raw or aug (default is raw,aug,aug).",
    )
    p.add_argument("--augment", metavar="TRANSFORMS", help="Transform pipeline.")
    p.add_argument("--warmup-epochs", type=int, metavar="N", help="Instance-only warm-up epochs.")
    p.add_argument("--eval-interval", type=int, metavar="N", help="Epochs between metrics rows.")
    p.add_argument(
        "--target-interval",
        type=int,
        metavar="N",
        help="Steps between full-dataset target updates (1 updates per batch).",
    )
    p.add_argument(
        "--snapshot-interval",
        type=int,
        metavar="N",
        help="Epochs between snapshot checkpoints (0 disables).",
    )
    p.add_argument("--out", metavar="DIR", help="Output directory (default is run).")


if __name__ == "__main__":
    main()
