"""Task-loop orchestration: forward and backward distillation phases, the
student pool, prototype maintenance, and test-time cluster assignment.

Each batch is consumed twice.  First the teacher phase updates the teacher,
the shared instance projector, the active cluster head, and the predictors,
with every stored student frozen.  Then the student phase flips the freeze
pattern and trains only the newest student to imitate the teacher on the
very same batch.  At a task boundary the oldest pool entry is evicted once
the pool is full, a fresh student/projector pair is spawned, predictors are
re-initialized, and a new cluster head is appended.

Everything is deterministic given the config seed: every random stream is
derived from (seed, purpose, task) and consumed in a fixed order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import losses as L
from .data import AugmentationConfig, TaskStream, augment_batch
from .metrics import (AccMatrix, DistillationRecord, acc_hat, average_acc,
                      average_forgetting, clustering_accuracy,
                      distillation_score)
from .nets import (ClusterProjector, MlpParams, ModelSizes, cluster_logits_np,
                   cluster_project, encoder_forward, make_cluster_projector,
                   make_mlp, mlp_apply, set_frozen, spawn_task_head)
from .optim import Adam

log = logging.getLogger(__name__)

ABLATION_DEFAULT = "FBCC"
ABLATION_NO_PROTOTYPES = "FBCC w/o Pro"
ABLATION_NO_KD = "FBCC w/o KD"
ABLATION_SINGLE_FROZEN = "FBCC + CaSSLe"

# Purpose tags for derived random streams.
_RNG_INIT, _RNG_STUDENT, _RNG_PROJECTOR, _RNG_PREDICTOR = 1, 2, 3, 4
_RNG_HEAD, _RNG_SHUFFLE, _RNG_AUGMENT, _RNG_PROTO = 5, 6, 7, 8


class EngineError(RuntimeError):
    """A training-phase failure, tagged with task/epoch/batch context."""


def student_count(task_id: int, capacity: int) -> int:
    """Number of students alive at a task: the task index, capped at the
    pool capacity."""
    if task_id < 1 or capacity < 2:
        raise ValueError(f"need task_id >= 1 and capacity >= 2, "
                         f"got {task_id}, {capacity}")
    return task_id if task_id < capacity else capacity


@dataclass
class TrainConfig:
    n_tasks: int
    clusters_per_task: list[int]
    n_students: int
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    temperature: float = 1.0
    argmax_mode: str = "raw_logits"  # or "per_head_softmax"
    no_prototypes: bool = False
    no_kd: bool = False
    single_frozen_teacher: bool = False
    sizes: ModelSizes = field(default_factory=ModelSizes)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def validate(self) -> None:
        if self.n_tasks < 1:
            raise ValueError("need at least one task")
        if len(self.clusters_per_task) != self.n_tasks:
            raise ValueError(
                f"{len(self.clusters_per_task)} cluster counts for "
                f"{self.n_tasks} tasks")
        if any(c < 2 for c in self.clusters_per_task):
            raise ValueError("every task needs at least 2 clusters")
        if self.n_students < 2:
            raise ValueError("the student pool needs capacity of at least 2")
        if self.n_tasks > 1 and self.n_students > self.n_tasks:
            raise ValueError("pool capacity cannot exceed the task count")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.epochs < 1:
            raise ValueError("need at least one epoch per task")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning rate and temperature must be positive")
        if self.argmax_mode not in ("raw_logits", "per_head_softmax"):
            raise ValueError(f"unknown argmax mode {self.argmax_mode!r}")
        if self.no_kd and self.single_frozen_teacher:
            raise ValueError(
                "no_kd and single_frozen_teacher are mutually exclusive")
        self.augment.validate()

    @property
    def ablation_label(self) -> str:
        if self.single_frozen_teacher:
            return ABLATION_SINGLE_FROZEN
        if self.no_kd:
            return ABLATION_NO_KD
        if self.no_prototypes:
            return ABLATION_NO_PROTOTYPES
        return ABLATION_DEFAULT


@dataclass
class Prototype:
    vector: np.ndarray
    task_id: int
    cluster_index: int


@dataclass
class PrototypeSet:
    prototypes: list[Prototype] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.prototypes)

    def as_matrix(self) -> np.ndarray | None:
        if not self.prototypes:
            return None
        return np.stack([p.vector for p in self.prototypes])


@dataclass
class PoolEntry:
    student: MlpParams
    projector: MlpParams
    task_id: int


@dataclass
class StudentPool:
    capacity: int
    entries: list[PoolEntry] = field(default_factory=list)

    def evict_oldest_if_full(self) -> PoolEntry | None:
        if len(self.entries) == self.capacity:
            return self.entries.pop(0)
        return None

    @property
    def task_ids(self) -> list[int]:
        return [e.task_id for e in self.entries]


def _rng(seed: int, purpose: int, task_id: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, task_id]))


def _seed_int(seed: int, purpose: int, task_id: int) -> int:
    return int(np.random.SeedSequence([seed, purpose, task_id]).generate_state(1)[0])


class ContinualState:
    """All live networks plus the cross-task memories (pool, prototypes,
    stored heads)."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        sizes = cfg.sizes
        self.size_warnings = sizes.validate(cfg.n_students)
        for message in self.size_warnings:
            log.warning(message)
        init_rng = _rng(cfg.seed, _RNG_INIT)
        self.teacher = make_mlp(sizes.teacher_dims, init_rng)
        self.cluster_projector: ClusterProjector = make_cluster_projector(
            sizes.latent_dim, sizes.cluster_hidden, init_rng)
        self.pool = StudentPool(capacity=cfg.n_students)
        self.prototypes = PrototypeSet()
        self.predictors: list[MlpParams] = []
        self.current_task = 0
        # Distillation source when a frozen prior teacher replaces the pool.
        self.frozen_source: tuple[MlpParams, MlpParams] | None = None
        self._teacher_projector: MlpParams | None = None
        self._fwd_opt: Adam | None = None
        self._bwd_opt: Adam | None = None
        self._shuffle_rng: np.random.Generator | None = None
        self._augment_rng: np.random.Generator | None = None

    # ------------------------------------------------------------ plumbing

    @property
    def current_projector(self) -> MlpParams:
        if self.cfg.single_frozen_teacher:
            assert self._teacher_projector is not None
            return self._teacher_projector
        return self.pool.entries[-1].projector

    @property
    def current_student(self) -> MlpParams | None:
        if self.cfg.single_frozen_teacher or not self.pool.entries:
            return None
        return self.pool.entries[-1].student

    def all_parameter_bundles(self) -> list[MlpParams]:
        bundles = [self.teacher, self.cluster_projector.shared_first]
        bundles.extend(self.cluster_projector.heads)
        for entry in self.pool.entries:
            bundles.extend((entry.student, entry.projector))
        bundles.extend(self.predictors)
        if self._teacher_projector is not None:
            bundles.append(self._teacher_projector)
        if self.frozen_source is not None:
            bundles.extend(self.frozen_source)
        return bundles

    def zero_all_grads(self) -> None:
        for bundle in self.all_parameter_bundles():
            T.zero_grads(bundle.parameters())

    def _distillation_sources(self) -> list[tuple[MlpParams, MlpParams]]:
        """Frozen (encoder, projector) pairs feeding the teacher phase."""
        if self.cfg.single_frozen_teacher:
            return [self.frozen_source] if self.frozen_source else []
        return [(e.student, e.projector) for e in self.pool.entries[:-1]]


def begin_task(state: ContinualState, task_id: int, n_clusters: int) -> ContinualState:
    """Advance the state to a new task: evict/spawn students, reset
    predictors, append a cluster head, rebuild optimizers."""
    cfg = state.cfg
    if task_id != state.current_task + 1:
        raise EngineError(
            f"begin_task({task_id}) after task {state.current_task}; tasks "
            f"must advance one at a time and may not restart")
    if n_clusters < 2:
        raise EngineError("every task needs at least 2 clusters")

    for entry in state.pool.entries:
        set_frozen(entry.student, True)
        set_frozen(entry.projector, True)
    for head in state.cluster_projector.heads:
        set_frozen(head, True)

    sizes = cfg.sizes
    if cfg.single_frozen_teacher:
        if task_id > 1:
            prior_teacher = state.teacher.copy()
            prior_projector = state.current_projector.copy()
            set_frozen(prior_teacher, True)
            set_frozen(prior_projector, True)
            state.frozen_source = (prior_teacher, prior_projector)
        state._teacher_projector = make_mlp(
            sizes.projector_dims, _rng(cfg.seed, _RNG_PROJECTOR, task_id))
    else:
        state.pool.evict_oldest_if_full()
        student = make_mlp(sizes.student_dims,
                           _rng(cfg.seed, _RNG_STUDENT, task_id))
        projector = make_mlp(sizes.projector_dims,
                             _rng(cfg.seed, _RNG_PROJECTOR, task_id))
        state.pool.entries.append(
            PoolEntry(student=student, projector=projector, task_id=task_id))

    n_sources = len(state._distillation_sources())
    predictor_rng = _rng(cfg.seed, _RNG_PREDICTOR, task_id)
    state.predictors = [make_mlp(sizes.predictor_dims, predictor_rng)
                        for _ in range(n_sources)]

    spawn_task_head(state.cluster_projector, n_clusters,
                    _seed_int(cfg.seed, _RNG_HEAD, task_id))

    fwd_params = (state.teacher.parameters()
                  + state.current_projector.parameters()
                  + state.cluster_projector.shared_first.parameters()
                  + state.cluster_projector.heads[-1].parameters()
                  + [p for g in state.predictors for p in g.parameters()])
    state._fwd_opt = Adam(fwd_params, learning_rate=cfg.learning_rate)
    if state.current_student is not None:
        state._bwd_opt = Adam(state.current_student.parameters(),
                              learning_rate=cfg.learning_rate)
    else:
        state._bwd_opt = None

    state._shuffle_rng = _rng(cfg.seed, _RNG_SHUFFLE, task_id)
    state._augment_rng = _rng(cfg.seed, _RNG_AUGMENT, task_id)
    state.current_task = task_id
    return state


def forward_kd_step(state: ContinualState, batch_a: np.ndarray,
                    batch_b: np.ndarray) -> float:
    """One teacher-phase optimizer step on the combined loss; returns the
    loss value."""
    cfg = state.cfg
    t = state.current_task
    for entry in state.pool.entries:
        set_frozen(entry.student, True)
    for entry in state.pool.entries[:-1]:
        set_frozen(entry.projector, True)
    set_frozen(state.teacher, False)
    set_frozen(state.current_projector, False)
    set_frozen(state.cluster_projector.shared_first, False)
    set_frozen(state.cluster_projector.heads[-1], False)

    view_a, view_b = Tensor(batch_a), Tensor(batch_b)
    h_a = encoder_forward(state.teacher, view_a)
    h_b = encoder_forward(state.teacher, view_b)
    z_a = encoder_forward(state.current_projector, h_a)
    z_b = encoder_forward(state.current_projector, h_b)
    probs_a = cluster_project(state.cluster_projector, h_a, t)
    probs_b = cluster_project(state.cluster_projector, h_b, t)

    prototypes = None
    if not cfg.no_prototypes:
        prototypes = state.prototypes.as_matrix()
    loss_con = L.instance_contrastive_loss(z_a, z_b, prototypes=prototypes,
                                           temperature=cfg.temperature)

    sources = [] if cfg.no_kd else state._distillation_sources()
    student_pairs = []
    for encoder, projector in sources:
        s_a = encoder_forward(projector, encoder_forward(encoder, view_a))
        s_b = encoder_forward(projector, encoder_forward(encoder, view_b))
        student_pairs.append((s_a.detach(), s_b.detach()))
    predictors = [partial(encoder_forward, g) for g in state.predictors]
    loss_dis = L.forward_distillation_loss(z_a, z_b, student_pairs,
                                           predictors[:len(student_pairs)],
                                           temperature=cfg.temperature)
    loss_clu = L.cluster_contrastive_loss(probs_a, probs_b,
                                          temperature=cfg.temperature)

    total = L.combined_forward_loss(loss_con, loss_dis, loss_clu)
    value = total.item()
    if not np.isfinite(value):
        raise EngineError(f"non-finite teacher-phase loss {value}")
    state.zero_all_grads()
    T.backward(total)
    state._fwd_opt.step()
    return value


def backward_kd_step(state: ContinualState, batch_a: np.ndarray,
                     batch_b: np.ndarray) -> float:
    """One student-phase optimizer step on the imitation loss; returns the
    loss value."""
    student = state.current_student
    if student is None:
        raise EngineError("no trainable student in this configuration")
    set_frozen(state.teacher, True)
    set_frozen(state.current_projector, True)
    set_frozen(student, False)

    view_a, view_b = Tensor(batch_a), Tensor(batch_b)
    h_s_a = encoder_forward(student, view_a)
    h_s_b = encoder_forward(student, view_b)
    z_s_a = encoder_forward(state.current_projector, h_s_a)
    z_s_b = encoder_forward(state.current_projector, h_s_b)

    h_t_a = encoder_forward(state.teacher, view_a).detach()
    h_t_b = encoder_forward(state.teacher, view_b).detach()
    z_t_a = encoder_forward(state.current_projector, h_t_a).detach()
    z_t_b = encoder_forward(state.current_projector, h_t_b).detach()

    loss = L.student_imitation_loss(h_s_a, h_s_b, z_s_a, z_s_b,
                                    h_t_a, h_t_b, z_t_a, z_t_b,
                                    temperature=state.cfg.temperature)
    value = loss.item()
    if not np.isfinite(value):
        raise EngineError(f"non-finite student-phase loss {value}")
    state.zero_all_grads()
    T.backward(loss)
    state._bwd_opt.step()
    # Teacher and projector stay frozen only within this phase.
    set_frozen(state.teacher, False)
    set_frozen(state.current_projector, False)
    return value


def prototypes_from_projections(z_a: np.ndarray, z_b: np.ndarray,
                                assign_a: np.ndarray, assign_b: np.ndarray,
                                n_clusters: int) -> dict[int, np.ndarray]:
    """Per-cluster mean of both projections over reliable samples.

    A sample is reliable when both of its views land in the same cluster;
    clusters with no reliable samples are omitted.
    """
    reliable = assign_a == assign_b
    out: dict[int, np.ndarray] = {}
    for v in range(n_clusters):
        mask = reliable & (assign_a == v)
        count = int(mask.sum())
        if count == 0:
            continue
        out[v] = (z_a[mask].sum(axis=0) + z_b[mask].sum(axis=0)) / (2 * count)
    return out


def update_prototypes(state: ContinualState,
                      task_samples: np.ndarray) -> list[Prototype]:
    """Compute and store the finished task's prototypes over its full
    dataset, accumulated in batches with a fixed augmentation seed."""
    cfg = state.cfg
    t = state.current_task
    n_clusters = state.cluster_projector.head_sizes[t - 1]
    rng = _rng(cfg.seed, _RNG_PROTO, t)

    dim = cfg.sizes.projector_out
    sums = np.zeros((n_clusters, dim))
    counts = np.zeros(n_clusters, dtype=np.int64)
    for start in range(0, task_samples.shape[0], cfg.batch_size):
        batch = task_samples[start:start + cfg.batch_size]
        view_a = augment_batch(batch, cfg.augment, rng)
        view_b = augment_batch(batch, cfg.augment, rng)
        h_a = mlp_apply(state.teacher, view_a)
        h_b = mlp_apply(state.teacher, view_b)
        z_a = mlp_apply(state.current_projector, h_a)
        z_b = mlp_apply(state.current_projector, h_b)
        assign_a = cluster_logits_np(state.cluster_projector, h_a, t).argmax(axis=1)
        assign_b = cluster_logits_np(state.cluster_projector, h_b, t).argmax(axis=1)
        reliable = assign_a == assign_b
        for v in range(n_clusters):
            mask = reliable & (assign_a == v)
            if mask.any():
                sums[v] += z_a[mask].sum(axis=0) + z_b[mask].sum(axis=0)
                counts[v] += int(mask.sum())

    added: list[Prototype] = []
    for v in range(n_clusters):
        if counts[v] == 0:
            log.warning("task %d cluster %d has no reliable samples; "
                        "prototype skipped", t, v)
            continue
        vector = sums[v] / (2 * counts[v])
        proto = Prototype(vector=vector, task_id=t, cluster_index=v)
        state.prototypes.prototypes.append(proto)
        added.append(proto)
    return added


def assign_clusters(state: ContinualState,
                    samples: np.ndarray) -> tuple[np.ndarray, list[dict]]:
    """Global cluster ids for raw samples (no augmentation), scored across
    every stored head; ties break toward the lowest id.

    Also returns the (global id <-> task, local cluster) mapping.
    """
    cp = state.cluster_projector
    if not cp.heads:
        raise EngineError("no trained cluster heads to assign with")
    latent = mlp_apply(state.teacher, np.asarray(samples, dtype=np.float64))
    feats = mlp_apply(cp.shared_first, latent)
    blocks = []
    for head in cp.heads:
        logits = mlp_apply(head, feats)
        if state.cfg.argmax_mode == "per_head_softmax":
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            logits = e / e.sum(axis=1, keepdims=True)
        blocks.append(logits)
    scores = np.concatenate(blocks, axis=1)
    ids = scores.argmax(axis=1)
    mapping = cluster_id_map(state)
    return ids, mapping


def cluster_id_map(state: ContinualState) -> list[dict]:
    mapping = []
    global_id = 0
    for task_idx, size in enumerate(state.cluster_projector.head_sizes, start=1):
        for v in range(size):
            mapping.append({"global_id": global_id, "task_id": task_idx,
                            "cluster_index": v})
            global_id += 1
    return mapping


def _task_accuracy(state: ContinualState, stream: TaskStream,
                   task_id: int) -> float:
    preds, _ = assign_clusters(state, stream.tasks[task_id - 1].samples)
    return clustering_accuracy(preds, stream.eval_labels(task_id))


def _diagonal_accuracies(state: ContinualState, stream: TaskStream,
                         task_id: int) -> tuple[float, float | None]:
    """Teacher and current-student accuracy on the finished task, scored
    through the task's own head only."""
    samples = stream.tasks[task_id - 1].samples
    truth = stream.eval_labels(task_id)
    latent_t = mlp_apply(state.teacher, samples)
    teacher_pred = cluster_logits_np(
        state.cluster_projector, latent_t, task_id).argmax(axis=1)
    teacher_acc = clustering_accuracy(teacher_pred, truth)
    student = state.current_student
    if student is None:
        return teacher_acc, None
    latent_s = mlp_apply(student, samples)
    student_pred = cluster_logits_np(
        state.cluster_projector, latent_s, task_id).argmax(axis=1)
    return teacher_acc, clustering_accuracy(student_pred, truth)


def _epoch_batches(n_samples: int, batch_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_samples)
    chunks = [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@dataclass
class TaskRecord:
    task_id: int
    n_clusters: int
    forward_loss_per_epoch: list[float]
    backward_loss_per_epoch: list[float]
    prototypes_added: int
    prototypes_skipped: int
    teacher_task_acc: float
    student_task_acc: float | None


@dataclass
class Report:
    ablation: str
    config: dict
    param_counts: dict
    tasks: list[TaskRecord]
    acc_matrix: AccMatrix
    metrics: dict
    cluster_id_map: list[dict]

    def to_dict(self) -> dict:
        return {
            "schema": "fbcc-report-v1",
            "ablation": self.ablation,
            "config": self.config,
            "param_counts": self.param_counts,
            "tasks": [{
                "task_id": r.task_id,
                "n_clusters": r.n_clusters,
                "forward_loss_per_epoch": r.forward_loss_per_epoch,
                "backward_loss_per_epoch": r.backward_loss_per_epoch,
                "prototypes_added": r.prototypes_added,
                "prototypes_skipped": r.prototypes_skipped,
                "teacher_task_acc": r.teacher_task_acc,
                "student_task_acc": r.student_task_acc,
            } for r in self.tasks],
            "acc_matrix": self.acc_matrix.to_lists(),
            "metrics": self.metrics,
            "cluster_id_map": self.cluster_id_map,
        }


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "n_tasks": cfg.n_tasks,
        "clusters_per_task": list(cfg.clusters_per_task),
        "n_students": cfg.n_students,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "temperature": cfg.temperature,
        "argmax_mode": cfg.argmax_mode,
        "no_prototypes": cfg.no_prototypes,
        "no_kd": cfg.no_kd,
        "single_frozen_teacher": cfg.single_frozen_teacher,
        "sizes": {
            "input_dim": cfg.sizes.input_dim,
            "teacher_hidden": cfg.sizes.teacher_hidden,
            "latent_dim": cfg.sizes.latent_dim,
            "student_hidden": cfg.sizes.student_hidden,
            "projector_hidden": cfg.sizes.projector_hidden,
            "projector_out": cfg.sizes.projector_out,
            "predictor_hidden": cfg.sizes.predictor_hidden,
            "cluster_hidden": cfg.sizes.cluster_hidden,
        },
        "augment": {
            "noise_sigma": cfg.augment.noise_sigma,
            "coord_dropout_prob": cfg.augment.coord_dropout_prob,
            "scale_jitter": cfg.augment.scale_jitter,
        },
    }


def config_from_dict(data: dict) -> TrainConfig:
    sizes = ModelSizes(**data.get("sizes", {}))
    augment = AugmentationConfig(**data.get("augment", {}))
    fields = {k: v for k, v in data.items() if k not in ("sizes", "augment")}
    return TrainConfig(sizes=sizes, augment=augment, **fields)


def run_stream(cfg: TrainConfig, stream: TaskStream) -> tuple[Report, ContinualState]:
    """Train through the whole stream and assemble the report.

    Returns the report together with the final state (for checkpointing)."""
    cfg.validate()
    if stream.n_tasks != cfg.n_tasks:
        raise EngineError(f"config expects {cfg.n_tasks} tasks, "
                          f"dataset has {stream.n_tasks}")
    if stream.clusters_per_task != list(cfg.clusters_per_task):
        raise EngineError(
            f"cluster counts differ: config {cfg.clusters_per_task}, "
            f"dataset {stream.clusters_per_task}")
    if stream.input_dim != cfg.sizes.input_dim:
        raise EngineError(f"config expects {cfg.sizes.input_dim}-dim inputs, "
                          f"dataset has {stream.input_dim}")

    state = ContinualState(cfg)
    acc_matrix = AccMatrix(cfg.n_tasks)
    records: list[TaskRecord] = []
    teacher_diag: list[float] = []
    student_diag: list[float] = []

    for task in stream.tasks:
        t = task.task_id
        n = task.samples.shape[0]
        if n < 2:
            raise EngineError(f"task {t} has {n} samples; need at least 2")
        begin_task(state, t, task.spec.n_clusters)
        fwd_curve: list[float] = []
        bwd_curve: list[float] = []
        for epoch in range(cfg.epochs):
            fwd_losses: list[float] = []
            bwd_losses: list[float] = []
            for batch_no, idx in enumerate(
                    _epoch_batches(n, cfg.batch_size, state._shuffle_rng)):
                batch = task.samples[idx]
                view_a = augment_batch(batch, cfg.augment, state._augment_rng)
                view_b = augment_batch(batch, cfg.augment, state._augment_rng)
                try:
                    fwd_losses.append(forward_kd_step(state, view_a, view_b))
                    if state.current_student is not None:
                        bwd_losses.append(
                            backward_kd_step(state, view_a, view_b))
                except Exception as err:
                    raise EngineError(
                        f"task {t} epoch {epoch + 1} batch {batch_no + 1}: "
                        f"{err}") from err
            fwd_curve.append(float(np.mean(fwd_losses)))
            if bwd_losses:
                bwd_curve.append(float(np.mean(bwd_losses)))

        added = update_prototypes(state, task.samples)
        skipped = task.spec.n_clusters - len(added)
        t_acc, s_acc = _diagonal_accuracies(state, stream, t)
        teacher_diag.append(t_acc)
        if s_acc is not None:
            student_diag.append(s_acc)
        for earlier in range(1, t + 1):
            acc_matrix.set(earlier, t, _task_accuracy(state, stream, earlier))
        records.append(TaskRecord(
            task_id=t, n_clusters=task.spec.n_clusters,
            forward_loss_per_epoch=fwd_curve,
            backward_loss_per_epoch=bwd_curve,
            prototypes_added=len(added), prototypes_skipped=skipped,
            teacher_task_acc=t_acc, student_task_acc=s_acc))

    report = Report(
        ablation=cfg.ablation_label,
        config=config_to_dict(cfg),
        param_counts=_param_count_block(cfg, state),
        tasks=records,
        acc_matrix=acc_matrix,
        metrics=compute_metrics(cfg, acc_matrix, teacher_diag, student_diag),
        cluster_id_map=cluster_id_map(state),
    )
    return report, state


def compute_metrics(cfg: TrainConfig, acc_matrix: AccMatrix,
                    teacher_diag: list[float],
                    student_diag: list[float]) -> dict:
    metrics: dict = {"average_acc": average_acc(acc_matrix)}
    metrics["average_forgetting"] = (
        average_forgetting(acc_matrix) if cfg.n_tasks > 1 else None)
    if student_diag and len(student_diag) == len(teacher_diag):
        record = DistillationRecord(
            teacher_acc=teacher_diag, student_acc=student_diag,
            param_count_student=cfg.sizes.param_count_student,
            param_count_teacher=cfg.sizes.param_count_teacher)
        metrics["acc_hat"] = acc_hat(record)
        try:
            metrics["distillation_score"] = distillation_score(record)
        except ValueError:
            metrics["distillation_score"] = None
    else:
        metrics["acc_hat"] = None
        metrics["distillation_score"] = None
    metrics["teacher_task_acc"] = list(teacher_diag)
    metrics["student_task_acc"] = list(student_diag) if student_diag else None
    return metrics


def _param_count_block(cfg: TrainConfig, state: ContinualState) -> dict:
    sizes = cfg.sizes
    return {
        "teacher": sizes.param_count_teacher,
        "student": sizes.param_count_student,
        "pool_capacity": cfg.n_students,
        "pool_total": cfg.n_students * sizes.param_count_student,
        "pool_within_teacher_budget":
            cfg.n_students * sizes.param_count_student < sizes.param_count_teacher,
        "warnings": list(state.size_warnings),
    }
