"""Versioned binary checkpoints.

Layout: magic ``FBCC``, format version (u32, little-endian), a u64-length
JSON manifest describing every network's layer structure, the pool, the
stored heads, prototypes, accuracy history and the random-stream scheme,
followed by the raw little-endian float64 arrays in manifest order.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .engine import (ContinualState, PoolEntry, Prototype, TrainConfig,
                     config_from_dict, config_to_dict)
from .nets import Layer, MlpParams
from .tensor import Tensor

MAGIC = b"FBCC"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def _describe_mlp(params: MlpParams) -> dict:
    return {
        "frozen": params.frozen,
        "layers": [{"out": l.weight.shape[0], "in": l.weight.shape[1],
                    "activation": l.activation} for l in params.layers],
    }


def _mlp_arrays(params: MlpParams) -> list[np.ndarray]:
    out = []
    for layer in params.layers:
        out.append(layer.weight.values)
        out.append(layer.bias.values)
    return out


def _rebuild_mlp(desc: dict, arrays: list[np.ndarray]) -> MlpParams:
    layers = []
    it = iter(arrays)
    for layer_desc in desc["layers"]:
        w = next(it)
        b = next(it)
        layers.append(Layer(Tensor(w, requires_grad=True),
                            Tensor(b, requires_grad=True),
                            layer_desc["activation"]))
    return MlpParams(layers, frozen=desc["frozen"])


def save_checkpoint(state: ContinualState, path,
                    history: dict | None = None) -> None:
    """Serialize the full training state; ``history`` carries the accuracy
    records needed to recompute forgetting and distillation scores."""
    bundles: list[tuple[str, MlpParams]] = [("teacher", state.teacher),
                                            ("cluster_first",
                                             state.cluster_projector.shared_first)]
    for i, head in enumerate(state.cluster_projector.heads):
        bundles.append((f"head_{i}", head))
    for i, entry in enumerate(state.pool.entries):
        bundles.append((f"student_{i}", entry.student))
        bundles.append((f"student_projector_{i}", entry.projector))
    for i, g in enumerate(state.predictors):
        bundles.append((f"predictor_{i}", g))
    if state._teacher_projector is not None:
        bundles.append(("teacher_projector", state._teacher_projector))
    if state.frozen_source is not None:
        bundles.append(("frozen_source_encoder", state.frozen_source[0]))
        bundles.append(("frozen_source_projector", state.frozen_source[1]))

    manifest = {
        "version": FORMAT_VERSION,
        "config": config_to_dict(state.cfg),
        "current_task": state.current_task,
        "pool_task_ids": state.pool.task_ids,
        "has_teacher_projector": state._teacher_projector is not None,
        "has_frozen_source": state.frozen_source is not None,
        "n_predictors": len(state.predictors),
        "n_heads": len(state.cluster_projector.heads),
        "bundles": [{"name": name, **_describe_mlp(params)}
                    for name, params in bundles],
        "prototypes": [{"task_id": p.task_id, "cluster_index": p.cluster_index,
                        "dim": int(p.vector.shape[0])}
                       for p in state.prototypes.prototypes],
        # Random streams are pure functions of (seed, purpose, task), so the
        # seed plus the task counter is the complete generator state.
        "rng": {"scheme": "seed-derived", "seed": state.cfg.seed,
                "current_task": state.current_task},
        "history": history or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, params in bundles:
            for arr in _mlp_arrays(params):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for proto in state.prototypes.prototypes:
            fh.write(np.ascontiguousarray(proto.vector, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ContinualState, dict]:
    """Rebuild a state for evaluation; returns (state, history)."""
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:4] != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    (blob_len,) = struct.unpack("<Q", payload[8:16])
    manifest = json.loads(payload[16:16 + blob_len].decode("utf-8"))
    cursor = 16 + blob_len

    def take(shape) -> np.ndarray:
        nonlocal cursor
        count = int(np.prod(shape))
        nbytes = count * 8
        if cursor + nbytes > len(payload):
            raise CheckpointFormatError("truncated payload")
        arr = np.frombuffer(payload[cursor:cursor + nbytes],
                            dtype="<f8").copy().reshape(shape)
        cursor += nbytes
        return arr

    cfg = config_from_dict(manifest["config"])
    state = ContinualState(cfg)
    rebuilt: dict[str, MlpParams] = {}
    for desc in manifest["bundles"]:
        arrays = []
        for layer_desc in desc["layers"]:
            arrays.append(take((layer_desc["out"], layer_desc["in"])))
            arrays.append(take((layer_desc["out"],)))
        rebuilt[desc["name"]] = _rebuild_mlp(desc, arrays)

    state.teacher = rebuilt["teacher"]
    state.cluster_projector.shared_first = rebuilt["cluster_first"]
    state.cluster_projector.heads = [rebuilt[f"head_{i}"]
                                     for i in range(manifest["n_heads"])]
    state.pool.entries = [
        PoolEntry(student=rebuilt[f"student_{i}"],
                  projector=rebuilt[f"student_projector_{i}"],
                  task_id=task_id)
        for i, task_id in enumerate(manifest["pool_task_ids"])
    ]
    state.predictors = [rebuilt[f"predictor_{i}"]
                        for i in range(manifest["n_predictors"])]
    if manifest["has_teacher_projector"]:
        state._teacher_projector = rebuilt["teacher_projector"]
    if manifest["has_frozen_source"]:
        state.frozen_source = (rebuilt["frozen_source_encoder"],
                               rebuilt["frozen_source_projector"])
    for proto_desc in manifest["prototypes"]:
        vector = take((proto_desc["dim"],))
        state.prototypes.prototypes.append(
            Prototype(vector=vector, task_id=proto_desc["task_id"],
                      cluster_index=proto_desc["cluster_index"]))
    if cursor != len(payload):
        raise CheckpointFormatError("trailing bytes after payload")
    state.current_task = manifest["current_task"]
    return state, manifest.get("history", {})
