"""JSON run configuration: defaults, schema validation, resolution.

A config file may specify any subset of the keys below; everything else
takes the documented default, and the fully resolved snapshot is echoed into
the run manifest.  Unknown keys are rejected rather than ignored so typos
fail loudly.
"""

from __future__ import annotations

import json
import math
import os
from typing import Any

from .data import AugmentationConfig
from .engine import TrainConfig
from .nets import ModelSizes

ENV_SEED = "FBCC_SEED"


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "n_tasks": 5,
        "clusters_per_task": 2,       # int, or one entry per task
        "input_dim": 16,
        "samples_per_cluster": 200,
        "stddev": 1.0,
        "separation_factor": 6.0,
        "imbalance": None,            # or {"p_first": .., "p_last": ..}
    },
    "model": {
        "teacher_hidden": 128,
        "latent_dim": 64,
        "student_hidden": 24,
        "projector_hidden": 64,
        "projector_out": 32,
        "predictor_hidden": 32,
        "cluster_hidden": 64,
    },
    "train": {
        "epochs": 50,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "students": None,             # defaults to ceil(n_tasks / 2)
        "temperature": 1.0,
        "argmax_mode": "raw_logits",
        "no_prototypes": False,
        "no_kd": False,
        "single_frozen_teacher": False,
    },
    "augment": {
        "noise_sigma": 0.15,
        "coord_dropout_prob": 0.1,
        "scale_jitter": 0.05,
    },
}


def _merge_section(name: str, defaults: dict, override: Any) -> dict:
    if override is None:
        return dict(defaults)
    if not isinstance(override, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(override) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(override)
    return merged


def resolve_config(raw: dict | None) -> dict:
    """Merge a partial config over the defaults and validate everything."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    cfg = {
        "seed": raw.get("seed", DEFAULTS["seed"]),
        "data": _merge_section("data", DEFAULTS["data"], raw.get("data")),
        "model": _merge_section("model", DEFAULTS["model"], raw.get("model")),
        "train": _merge_section("train", DEFAULTS["train"], raw.get("train")),
        "augment": _merge_section("augment", DEFAULTS["augment"],
                                  raw.get("augment")),
    }
    if ENV_SEED in os.environ:
        try:
            cfg["seed"] = int(os.environ[ENV_SEED])
        except ValueError as err:
            raise ConfigError(f"{ENV_SEED} must be an integer") from err

    _validate(cfg)
    data = cfg["data"]
    if isinstance(data["clusters_per_task"], int):
        data["clusters_per_task"] = [data["clusters_per_task"]] * data["n_tasks"]
    if cfg["train"]["students"] is None:
        cfg["train"]["students"] = max(2, math.ceil(data["n_tasks"] / 2))
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: dict) -> None:
    _require(isinstance(cfg["seed"], int), "seed must be an integer")
    data = cfg["data"]
    _require(isinstance(data["n_tasks"], int) and data["n_tasks"] >= 1,
             "data.n_tasks must be a positive integer")
    clusters = data["clusters_per_task"]
    if isinstance(clusters, list):
        _require(len(clusters) == data["n_tasks"],
                 "data.clusters_per_task must have one entry per task")
        _require(all(isinstance(c, int) and c >= 2 for c in clusters),
                 "every task needs at least 2 clusters")
    else:
        _require(isinstance(clusters, int) and clusters >= 2,
                 "data.clusters_per_task must be an int >= 2 or a list")
    _require(isinstance(data["input_dim"], int) and data["input_dim"] >= 1,
             "data.input_dim must be a positive integer")
    _require(data["samples_per_cluster"] >= 2,
             "data.samples_per_cluster must be at least 2")
    _require(data["stddev"] > 0, "data.stddev must be positive")
    _require(data["separation_factor"] > 0,
             "data.separation_factor must be positive")
    imbalance = data["imbalance"]
    if imbalance is not None:
        _require(isinstance(imbalance, dict)
                 and set(imbalance) == {"p_first", "p_last"},
                 "data.imbalance needs exactly p_first and p_last")
        _require(0 < imbalance["p_first"] <= imbalance["p_last"] <= 1,
                 "data.imbalance needs 0 < p_first <= p_last <= 1")

    train = cfg["train"]
    _require(train["epochs"] >= 1, "train.epochs must be at least 1")
    _require(train["batch_size"] >= 2, "train.batch_size must be at least 2")
    _require(train["learning_rate"] > 0, "train.learning_rate must be positive")
    _require(train["temperature"] > 0, "train.temperature must be positive")
    _require(train["argmax_mode"] in ("raw_logits", "per_head_softmax"),
             "train.argmax_mode must be raw_logits or per_head_softmax")
    students = train["students"]
    if students is not None:
        _require(isinstance(students, int) and students >= 2,
                 "train.students must be an int >= 2")
        _require(data["n_tasks"] == 1 or students <= data["n_tasks"],
                 "train.students cannot exceed data.n_tasks")
    for flag in ("no_prototypes", "no_kd", "single_frozen_teacher"):
        _require(isinstance(train[flag], bool), f"train.{flag} must be boolean")
    _require(not (train["no_kd"] and train["single_frozen_teacher"]),
             "no_kd and single_frozen_teacher are mutually exclusive")

    aug = cfg["augment"]
    _require(aug["noise_sigma"] >= 0, "augment.noise_sigma must be >= 0")
    _require(0 <= aug["coord_dropout_prob"] < 1,
             "augment.coord_dropout_prob must lie in [0, 1)")
    _require(aug["scale_jitter"] >= 0, "augment.scale_jitter must be >= 0")

    model = cfg["model"]
    for key, value in model.items():
        _require(isinstance(value, int) and value >= 1,
                 f"model.{key} must be a positive integer")


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    return resolve_config(raw)


def train_config_from_resolved(cfg: dict, n_tasks: int,
                               clusters_per_task: list[int]) -> TrainConfig:
    """Build the engine config for a given stream structure."""
    train = cfg["train"]
    return TrainConfig(
        n_tasks=n_tasks,
        clusters_per_task=list(clusters_per_task),
        n_students=train["students"],
        epochs=train["epochs"],
        batch_size=train["batch_size"],
        learning_rate=train["learning_rate"],
        seed=cfg["seed"],
        temperature=train["temperature"],
        argmax_mode=train["argmax_mode"],
        no_prototypes=train["no_prototypes"],
        no_kd=train["no_kd"],
        single_frozen_teacher=train["single_frozen_teacher"],
        sizes=ModelSizes(input_dim=cfg["data"]["input_dim"], **cfg["model"]),
        augment=AugmentationConfig(**cfg["augment"]),
    )
