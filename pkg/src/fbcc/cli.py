"""Command-line harness: dataset generation, training, evaluation, ablations.

Every command resolves its config against the defaults, writes its artifacts
into ``--out``, and finishes with a ``manifest.json`` listing each artifact
with a sha256 content hash; a run is replayable from the manifest alone.
Exit codes: 0 success, 1 invariant or assertion failure, 2 usage/IO error.
The ``FBCC_SEED`` environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config_file, resolve_config, \
    train_config_from_resolved
from .data import (DatasetFormatError, export_csv, generate_stream,
                   load_dataset, save_dataset, subsample_imbalanced)
from .engine import (ABLATION_DEFAULT, ABLATION_NO_KD,
                     ABLATION_NO_PROTOTYPES, ABLATION_SINGLE_FROZEN,
                     EngineError, assign_clusters, config_to_dict, run_stream)
from .metrics import (AccMatrix, DistillationRecord, acc_hat, average_acc,
                      average_forgetting, clustering_accuracy,
                      distillation_score)

log = logging.getLogger("fbcc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(RuntimeError):
    pass


class InvariantError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(out_dir: Path, command: str, cfg: dict,
                    config_path: str | None, artifacts: list[Path]) -> Path:
    entries = []
    for artifact in artifacts:
        if not artifact.exists():
            raise InvariantError(f"artifact missing at run end: {artifact}")
        entries.append({"name": artifact.name,
                        "path": str(artifact),
                        "sha256": _sha256(artifact)})
    manifest = {
        "schema": "fbcc-manifest-v1",
        "command": command,
        "config_path": config_path,
        "config": cfg,
        "seed": cfg["seed"],
        "output_dir": str(out_dir),
        "artifacts": entries,
    }
    path = out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def _load_or_default_config(path: str | None) -> dict:
    if path is None:
        return resolve_config(None)
    return load_config_file(path)


def _make_stream(cfg: dict):
    data = cfg["data"]
    stream = generate_stream(
        n_tasks=data["n_tasks"],
        clusters_per_task=list(data["clusters_per_task"]),
        input_dim=data["input_dim"],
        seed=cfg["seed"],
        samples_per_cluster=data["samples_per_cluster"],
        stddev=data["stddev"],
        separation_factor=data["separation_factor"],
    )
    if data["imbalance"] is not None:
        stream = subsample_imbalanced(stream, data["imbalance"]["p_first"],
                                      data["imbalance"]["p_last"])
    return stream


def _export_acc_matrix(matrix: AccMatrix, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "after_task", "acc"])
        for i in range(1, matrix.n_tasks + 1):
            for j in range(i, matrix.n_tasks + 1):
                value = matrix.get(i, j)
                if not np.isnan(value):
                    writer.writerow([i, j, f"{value:.17g}"])


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _load_or_default_config(args.config)
    if args.heterogeneous:
        counts = [int(v) for v in args.heterogeneous.split(",")]
        cfg["data"]["n_tasks"] = len(counts)
        cfg["data"]["clusters_per_task"] = counts
    if args.imbalanced:
        first, last = (float(v) for v in args.imbalanced.split(":"))
        cfg["data"]["imbalance"] = {"p_first": first, "p_last": last}
    cfg = resolve_config(cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = _make_stream(cfg)
    dataset_path = out_dir / "dataset.fbcd"
    csv_path = out_dir / "dataset.csv"
    save_dataset(stream, dataset_path)
    export_csv(stream, csv_path)
    _write_manifest(out_dir, "generate", cfg, args.config,
                    [dataset_path, csv_path])
    print(f"wrote {dataset_path} "
          f"({stream.n_tasks} tasks, clusters {stream.clusters_per_task})")
    return EXIT_OK


def _apply_train_overrides(cfg: dict, args) -> dict:
    train = cfg["train"]
    if args.no_prototypes:
        train["no_prototypes"] = True
    if args.no_kd:
        train["no_kd"] = True
    if args.single_frozen_teacher:
        train["single_frozen_teacher"] = True
    if args.students is not None:
        train["students"] = args.students
    return resolve_config(cfg)


def _check_compat(cfg: dict, stream) -> None:
    if stream.input_dim != cfg["data"]["input_dim"]:
        raise UsageError(
            f"dataset has {stream.input_dim}-dim samples but the config "
            f"expects {cfg['data']['input_dim']}")
    if stream.n_tasks != cfg["data"]["n_tasks"]:
        raise UsageError(
            f"dataset has {stream.n_tasks} tasks but the config expects "
            f"{cfg['data']['n_tasks']}")


def _train_once(cfg: dict, stream, out_dir: Path) -> tuple[dict, list[Path]]:
    # The dataset is authoritative for per-task cluster counts (it may have
    # been generated with heterogeneous sizes).
    train_cfg = train_config_from_resolved(cfg, stream.n_tasks,
                                           stream.clusters_per_task)
    report, state = run_stream(train_cfg, stream)
    report_dict = report.to_dict()

    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    _write_json(report_path, report_dict)
    matrix_path = out_dir / "acc_matrix.csv"
    _export_acc_matrix(report.acc_matrix, matrix_path)
    checkpoint_path = out_dir / "checkpoint.fbcc"
    save_checkpoint(state, checkpoint_path, history={
        "acc_matrix": report.acc_matrix.to_lists(),
        "teacher_task_acc": report.metrics["teacher_task_acc"],
        "student_task_acc": report.metrics["student_task_acc"],
        "ablation": report.ablation,
    })
    return report_dict, [report_path, matrix_path, checkpoint_path]


def cmd_train(args) -> int:
    cfg = _apply_train_overrides(_load_or_default_config(args.config), args)
    try:
        stream = load_dataset(args.dataset)
    except FileNotFoundError as err:
        raise UsageError(f"dataset not found: {args.dataset}") from err
    _check_compat(cfg, stream)

    out_dir = Path(args.out)
    report_dict, artifacts = _train_once(cfg, stream, out_dir)
    _write_manifest(out_dir, "train", cfg, args.config, artifacts)
    metrics = report_dict["metrics"]
    print(f"{report_dict['ablation']}: "
          f"average_acc={metrics['average_acc']:.4f} "
          f"average_forgetting={_fmt(metrics['average_forgetting'])}")
    return EXIT_OK


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def cmd_eval(args) -> int:
    try:
        state, history = load_checkpoint(args.checkpoint)
    except FileNotFoundError as err:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from err
    try:
        stream = load_dataset(args.dataset)
    except FileNotFoundError as err:
        raise UsageError(f"dataset not found: {args.dataset}") from err

    cfg = state.cfg
    if stream.input_dim != cfg.sizes.input_dim:
        raise UsageError(
            f"dataset has {stream.input_dim}-dim samples but the checkpoint "
            f"was trained on {cfg.sizes.input_dim}")
    if stream.n_tasks != cfg.n_tasks:
        raise UsageError(
            f"dataset has {stream.n_tasks} tasks but the checkpoint was "
            f"trained on {cfg.n_tasks}")

    matrix = AccMatrix.from_lists(history["acc_matrix"]) if history else \
        AccMatrix(cfg.n_tasks)
    for task in stream.tasks:
        preds, _ = assign_clusters(state, task.samples)
        acc = clustering_accuracy(preds, stream.eval_labels(task.task_id))
        matrix.set(task.task_id, cfg.n_tasks, acc)

    metrics: dict = {"average_acc": average_acc(matrix)}
    metrics["average_forgetting"] = (average_forgetting(matrix)
                                     if cfg.n_tasks > 1 else None)
    teacher_diag = history.get("teacher_task_acc") if history else None
    student_diag = history.get("student_task_acc") if history else None
    if teacher_diag and student_diag:
        record = DistillationRecord(
            teacher_acc=teacher_diag, student_acc=student_diag,
            param_count_student=cfg.sizes.param_count_student,
            param_count_teacher=cfg.sizes.param_count_teacher)
        metrics["acc_hat"] = acc_hat(record)
        metrics["distillation_score"] = distillation_score(record)
    else:
        metrics["acc_hat"] = None
        metrics["distillation_score"] = None

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.json"
    _write_json(metrics_path, metrics)
    artifacts = [metrics_path]
    matrix_path = out_dir / "acc_matrix.csv"
    _export_acc_matrix(matrix, matrix_path)
    artifacts.append(matrix_path)
    if args.export_plot:
        plot_path = out_dir / "acc_curves.csv"
        _export_acc_matrix(matrix, plot_path)
        artifacts.append(plot_path)
    _write_manifest(out_dir, "eval",
                    {"seed": cfg.seed, "train_config": config_to_dict(cfg)},
                    None, artifacts)
    print(f"average_acc={metrics['average_acc']:.4f} "
          f"average_forgetting={_fmt(metrics['average_forgetting'])}")
    return EXIT_OK


_ABLATION_ROWS = [
    (ABLATION_NO_PROTOTYPES, "no_pro", {"no_prototypes": True}),
    (ABLATION_NO_KD, "no_kd", {"no_kd": True}),
    (ABLATION_SINGLE_FROZEN, "single_frozen", {"single_frozen_teacher": True}),
    (ABLATION_DEFAULT, "default", {}),
]


def cmd_ablate(args) -> int:
    base_cfg = _load_or_default_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = _make_stream(base_cfg)
    dataset_path = out_dir / "dataset.fbcd"
    save_dataset(stream, dataset_path)

    rows = []
    artifacts = [dataset_path]
    failure: Exception | None = None
    for label, slug, flags in _ABLATION_ROWS:
        cfg = json.loads(json.dumps(base_cfg))  # deep copy
        for key in ("no_prototypes", "no_kd", "single_frozen_teacher"):
            cfg["train"][key] = flags.get(key, False)
        cfg = resolve_config(cfg)
        sub_dir = out_dir / slug
        try:
            report_dict, sub_artifacts = _train_once(cfg, stream, sub_dir)
        except Exception as err:  # keep partial results
            failure = err
            log.error("run %s failed: %s", label, err)
            break
        artifacts.extend(sub_artifacts)
        rows.append({
            "ablation": label,
            "seed": cfg["seed"],
            "average_acc": report_dict["metrics"]["average_acc"],
            "average_forgetting": report_dict["metrics"]["average_forgetting"],
        })

    comparison = {"schema": "fbcc-ablation-v1", "rows": rows,
                  "complete": failure is None}
    comparison_path = out_dir / "comparison.json"
    _write_json(comparison_path, comparison)
    table_path = out_dir / "comparison.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ablation", "seed", "average_acc",
                         "average_forgetting"])
        for row in rows:
            writer.writerow([row["ablation"], row["seed"],
                             f"{row['average_acc']:.17g}",
                             f"{row['average_forgetting']:.17g}"])
    artifacts.extend([comparison_path, table_path])
    _write_manifest(out_dir, "ablate", base_cfg, args.config, artifacts)

    for row in rows:
        print(f"{row['ablation']:>16}: "
              f"average_acc={row['average_acc']:.4f} "
              f"average_forgetting={row['average_forgetting']:.4f}")
    if failure is not None:
        raise InvariantError(f"ablation aborted: {failure}")

    if args.assert_directional:
        by_label = {r["ablation"]: r for r in rows}
        default_f = by_label[ABLATION_DEFAULT]["average_forgetting"]
        no_kd_f = by_label[ABLATION_NO_KD]["average_forgetting"]
        if default_f > no_kd_f:
            raise InvariantError(
                f"directional check failed: default forgetting {default_f:.4f} "
                f"exceeds the no-distillation run's {no_kd_f:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbcc",
        description="Continual clustering with teacher-student distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic task stream")
    p_gen.add_argument("--config", default=None, help="JSON config file")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--imbalanced", metavar="P_FIRST:P_LAST", default=None,
                       help="linear per-task keep probabilities, e.g. 0.1:1.0")
    p_gen.add_argument("--heterogeneous", metavar="K1,K2,...", default=None,
                       help="per-task cluster counts, e.g. 6,2,2,2")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train on a generated stream")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--no-prototypes", action="store_true",
                         dest="no_prototypes")
    p_train.add_argument("--no-kd", action="store_true", dest="no_kd")
    p_train.add_argument("--single-frozen-teacher", action="store_true",
                         dest="single_frozen_teacher")
    p_train.add_argument("--students", type=int, default=None,
                         help="student pool capacity")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--export-plot", action="store_true",
                        dest="export_plot",
                        help="write per-task accuracy curves as CSV")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate",
                           help="run the default and the three ablations")
    p_abl.add_argument("--config", default=None)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--assert-directional", action="store_true",
                       dest="assert_directional",
                       help="fail unless distillation beats its removal "
                            "on forgetting")
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetFormatError,
            CheckpointFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, EngineError, ValueError) as err:
        print(f"failure: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
