"""Synthetic task streams, vector augmentations, and dataset persistence.

A stream is a sequence of tasks, each a Gaussian-blob mixture whose means are
kept at least ``separation_factor * stddev`` apart from every mean of every
task, so tasks never share a cluster.  Training code only ever sees
``TaskData`` (samples, no label field); ground-truth labels live in the
stream's evaluation sidecar.

Binary persistence uses magic ``FBCD`` with little-endian 64-bit floats; a
CSV export (``task_id,label,feat_0..feat_{d-1}``) round-trips through 17
significant digits.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"FBCD"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Corrupt or incompatible dataset file."""


class GenerationError(ValueError):
    """Stream generation could not satisfy its constraints."""


@dataclass
class TaskSpec:
    task_id: int
    n_clusters: int
    means: np.ndarray  # n_clusters x input_dim
    stddev: float
    samples_per_cluster: int
    subsample_prob: float = 1.0


@dataclass
class TaskData:
    """Training view of one task: samples only, no labels."""

    spec: TaskSpec
    samples: np.ndarray  # n x input_dim

    @property
    def task_id(self) -> int:
        return self.spec.task_id


@dataclass
class TaskStream:
    tasks: list[TaskData]
    input_dim: int
    seed: int
    _labels: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def clusters_per_task(self) -> list[int]:
        return [t.spec.n_clusters for t in self.tasks]

    def label_offset(self, task_id: int) -> int:
        return sum(self.clusters_per_task[: task_id - 1])

    def eval_labels(self, task_id: int) -> np.ndarray:
        """Global ground-truth cluster ids; evaluation interface only."""
        return self._labels[task_id - 1]


@dataclass
class AugmentationConfig:
    noise_sigma: float = 0.15
    coord_dropout_prob: float = 0.1
    scale_jitter: float = 0.05

    def validate(self) -> None:
        if self.noise_sigma < 0 or self.scale_jitter < 0:
            raise ValueError("noise_sigma and scale_jitter must be nonnegative")
        if not 0 <= self.coord_dropout_prob < 1:
            raise ValueError("coord_dropout_prob must lie in [0, 1)")


def _task_rng(seed: int, task_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, task_id]))


def _place_means(total: int, dims: int, stddev: float, separation: float,
                 rng: np.random.Generator, max_attempts: int = 10_000) -> np.ndarray:
    """Rejection-sample cluster means with a minimum pairwise distance."""
    min_dist = separation * stddev
    # Box big enough that the packing is easy at desk scale.
    half_width = max(10.0 * stddev, min_dist * total ** (1.0 / dims))
    means: list[np.ndarray] = []
    attempts = 0
    while len(means) < total:
        candidate = rng.uniform(-half_width, half_width, size=dims)
        if all(np.linalg.norm(candidate - m) >= min_dist for m in means):
            means.append(candidate)
            attempts = 0
            continue
        attempts += 1
        if attempts >= max_attempts:
            raise GenerationError(
                f"could not place {total} cluster means {min_dist:.3g} apart "
                f"in {dims} dimensions; use more dimensions or fewer clusters")
    return np.stack(means)


def generate_stream(n_tasks: int, clusters_per_task: list[int] | int,
                    input_dim: int, seed: int,
                    samples_per_cluster: int = 200, stddev: float = 1.0,
                    separation_factor: float = 6.0) -> TaskStream:
    """Deterministic Gaussian-blob stream with globally disjoint clusters."""
    if isinstance(clusters_per_task, int):
        clusters_per_task = [clusters_per_task] * n_tasks
    if len(clusters_per_task) != n_tasks:
        raise GenerationError(
            f"{len(clusters_per_task)} cluster counts for {n_tasks} tasks")
    if any(c < 1 for c in clusters_per_task):
        raise GenerationError("every task needs at least one cluster")

    mean_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    all_means = _place_means(sum(clusters_per_task), input_dim, stddev,
                             separation_factor, mean_rng)

    tasks: list[TaskData] = []
    labels: list[np.ndarray] = []
    offset = 0
    for task_id, n_clusters in enumerate(clusters_per_task, start=1):
        means = all_means[offset:offset + n_clusters]
        rng = _task_rng(seed, task_id)
        samples = np.concatenate([
            m + stddev * rng.standard_normal((samples_per_cluster, input_dim))
            for m in means
        ])
        task_labels = offset + np.repeat(np.arange(n_clusters),
                                         samples_per_cluster)
        spec = TaskSpec(task_id=task_id, n_clusters=n_clusters, means=means,
                        stddev=stddev, samples_per_cluster=samples_per_cluster)
        tasks.append(TaskData(spec=spec, samples=samples))
        labels.append(task_labels)
        offset += n_clusters
    return TaskStream(tasks=tasks, input_dim=input_dim, seed=seed,
                      _labels=labels)


def imbalance_schedule(n_tasks: int, p_first: float, p_last: float) -> list[float]:
    """Per-task keep probabilities rising linearly from p_first to p_last."""
    if not 0 < p_first <= p_last <= 1:
        raise ValueError(f"need 0 < p_first <= p_last <= 1, "
                         f"got {p_first} and {p_last}")
    if n_tasks == 1:
        if p_first != p_last:
            raise ValueError("a single task cannot interpolate probabilities")
        return [p_first]
    return [p_first + (p_last - p_first) * (t - 1) / (n_tasks - 1)
            for t in range(1, n_tasks + 1)]


def subsample_imbalanced(stream: TaskStream, p_first: float,
                         p_last: float) -> TaskStream:
    """Independently keep each sample of task t with the schedule probability."""
    probs = imbalance_schedule(stream.n_tasks, p_first, p_last)
    tasks: list[TaskData] = []
    labels: list[np.ndarray] = []
    for task, p in zip(stream.tasks, probs):
        rng = np.random.default_rng(
            np.random.SeedSequence([stream.seed, task.task_id, 1]))
        keep = rng.random(task.samples.shape[0]) < p
        tasks.append(TaskData(spec=replace(task.spec, subsample_prob=p),
                              samples=task.samples[keep]))
        labels.append(stream.eval_labels(task.task_id)[keep])
    return TaskStream(tasks=tasks, input_dim=stream.input_dim,
                      seed=stream.seed, _labels=labels)


# ------------------------------------------------------------- augmentation

def augment_batch(batch: np.ndarray, cfg: AugmentationConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of a batch; draws happen in a fixed order
    (per-sample scale, additive noise, coordinate dropout)."""
    cfg.validate()
    out = np.array(batch, dtype=np.float64)
    n, d = out.shape
    if cfg.scale_jitter > 0:
        scales = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter,
                             size=(n, 1))
        out = out * scales
    if cfg.noise_sigma > 0:
        out = out + cfg.noise_sigma * rng.standard_normal((n, d))
    if cfg.coord_dropout_prob > 0:
        keep = rng.random((n, d)) >= cfg.coord_dropout_prob
        out = out * keep
    return out


def augment_pair(x: np.ndarray, cfg: AugmentationConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of one sample (view a drawn first)."""
    batch = np.asarray(x, dtype=np.float64)[None, :]
    view_a = augment_batch(batch, cfg, rng)[0]
    view_b = augment_batch(batch, cfg, rng)[0]
    return view_a, view_b


# -------------------------------------------------------------- persistence

def save_dataset(stream: TaskStream, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "n_tasks": stream.n_tasks,
        "input_dim": stream.input_dim,
        "seed": stream.seed,
        "tasks": [
            {
                "task_id": t.spec.task_id,
                "n_clusters": t.spec.n_clusters,
                "n_samples": int(t.samples.shape[0]),
                "stddev": t.spec.stddev,
                "samples_per_cluster": t.spec.samples_per_cluster,
                "subsample_prob": t.spec.subsample_prob,
            }
            for t in stream.tasks
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for task in stream.tasks:
            fh.write(np.ascontiguousarray(task.spec.means, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(task.samples, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(
                stream.eval_labels(task.task_id), dtype="<i8").tobytes())


def load_dataset(path) -> TaskStream:
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    (blob_len,) = struct.unpack("<Q", payload[8:16])
    header = json.loads(payload[16:16 + blob_len].decode("utf-8"))
    cursor = 16 + blob_len
    dim = header["input_dim"]

    def take(count, dtype):
        nonlocal cursor
        nbytes = count * 8
        if cursor + nbytes > len(payload):
            raise DatasetFormatError("truncated payload")
        arr = np.frombuffer(payload[cursor:cursor + nbytes], dtype=dtype).copy()
        cursor += nbytes
        return arr

    tasks: list[TaskData] = []
    labels: list[np.ndarray] = []
    for info in header["tasks"]:
        k, n = info["n_clusters"], info["n_samples"]
        means = take(k * dim, "<f8").reshape(k, dim)
        samples = take(n * dim, "<f8").reshape(n, dim)
        labels.append(take(n, "<i8"))
        spec = TaskSpec(task_id=info["task_id"], n_clusters=k, means=means,
                        stddev=info["stddev"],
                        samples_per_cluster=info["samples_per_cluster"],
                        subsample_prob=info["subsample_prob"])
        tasks.append(TaskData(spec=spec, samples=samples))
    if cursor != len(payload):
        raise DatasetFormatError("trailing bytes after payload")
    return TaskStream(tasks=tasks, input_dim=dim, seed=header["seed"],
                      _labels=labels)


def export_csv(stream: TaskStream, path) -> None:
    """Flat table with header ``task_id,label,feat_0..feat_{d-1}``."""
    dim = stream.input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "label"] + [f"feat_{j}" for j in range(dim)])
        for task in stream.tasks:
            task_labels = stream.eval_labels(task.task_id)
            for row, label in zip(task.samples, task_labels):
                writer.writerow([task.task_id, int(label)]
                                + [f"{v:.17g}" for v in row])


def import_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read an exported table back as (task_ids, labels, features)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["task_id", "label"]:
            raise DatasetFormatError(f"unexpected CSV header {header[:2]}")
        task_ids, labels, feats = [], [], []
        for row in reader:
            task_ids.append(int(row[0]))
            labels.append(int(row[1]))
            feats.append([float(v) for v in row[2:]])
    return (np.asarray(task_ids, dtype=np.int64),
            np.asarray(labels, dtype=np.int64),
            np.asarray(feats, dtype=np.float64))
