"""Parameterized networks: encoders, projectors, predictors, cluster heads.

All networks are plain fully connected stacks described by ``MlpParams``.
The cluster projector keeps one shared first layer plus an ordered list of
per-task output heads; heads of finished tasks are retained verbatim so test
time can score a sample against every task ever seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatchError, Tensor


@dataclass
class Layer:
    weight: Tensor  # out x in
    bias: Tensor    # (out,)
    activation: str  # "relu" or "none"


@dataclass
class MlpParams:
    """An ordered stack of linear layers with optional relu activations."""

    layers: list[Layer]
    frozen: bool = False

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeMismatchError(
                    f"layer dims do not chain: {prev.weight.shape} then "
                    f"{nxt.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpParams":
        layers = [Layer(Tensor(l.weight.values.copy(), requires_grad=True),
                        Tensor(l.bias.values.copy(), requires_grad=True),
                        l.activation)
                  for l in self.layers]
        return MlpParams(layers, frozen=self.frozen)

    def checksum(self) -> float:
        return float(sum(p.values.sum() for p in self.parameters()))


def set_frozen(params: MlpParams, frozen: bool) -> None:
    """Frozen nets are detached at use and skipped by the optimizer."""
    params.frozen = frozen


def _init_layer(rng: np.random.Generator, out_dim: int, in_dim: int,
                activation: str) -> Layer:
    # Uniform +-sqrt(6 / (fan_in + fan_out)).
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = np.zeros(out_dim)
    return Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                 activation)


def make_mlp(dims: list[int], rng: np.random.Generator,
             hidden_activation: str = "relu",
             output_activation: str = "none") -> MlpParams:
    """Build an MLP with the given layer widths, e.g. [16, 128, 64]."""
    if len(dims) < 2:
        raise ValueError("make_mlp needs at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        act = output_activation if i == len(dims) - 2 else hidden_activation
        layers.append(_init_layer(rng, dims[i + 1], dims[i], act))
    return MlpParams(layers)


def encoder_forward(params: MlpParams, batch: Tensor) -> Tensor:
    """Apply the stack to a (batch x in_dim) tensor.

    Frozen parameters are detached at use, so gradient still flows to the
    *input* (needed when a trainable net feeds a frozen one) but never into
    the frozen weights.
    """
    if batch.values.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ShapeMismatchError(
            f"encoder_forward: batch {batch.shape} vs in_dim {params.in_dim}")
    x = batch
    for layer in params.layers:
        w = layer.weight.detach() if params.frozen else layer.weight
        b = layer.bias.detach() if params.frozen else layer.bias
        x = T.add(T.matmul(x, T.transpose(w)), b)
        if layer.activation == "relu":
            x = T.relu(x)
    return x


def mlp_apply(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    """Gradient-free numpy forward pass for evaluation loops."""
    x = np.asarray(batch, dtype=np.float64)
    for layer in params.layers:
        x = x @ layer.weight.values.T + layer.bias.values
        if layer.activation == "relu":
            x = np.maximum(x, 0.0)
    return x


# ------------------------------------------------------ cluster projector

@dataclass
class ClusterProjector:
    """Shared first layer plus one softmax head per task.

    The first layer is trained continuously across tasks; each task appends a
    fresh head sized to its cluster count, and earlier heads are never
    touched again.
    """

    shared_first: MlpParams
    heads: list[MlpParams] = field(default_factory=list)

    @property
    def head_sizes(self) -> list[int]:
        return [h.out_dim for h in self.heads]

    def head_parameters(self, head_index: int) -> list[Tensor]:
        return self.heads[head_index - 1].parameters()


def make_cluster_projector(latent_dim: int, hidden_dim: int,
                           rng: np.random.Generator) -> ClusterProjector:
    first = make_mlp([latent_dim, hidden_dim], rng, output_activation="relu")
    return ClusterProjector(shared_first=first)


def spawn_task_head(cp: ClusterProjector, n_clusters: int,
                    rng_seed: int) -> ClusterProjector:
    """Append a freshly initialized head; the shared first layer and all
    previous heads are carried over unchanged."""
    if n_clusters < 1:
        raise ValueError(f"head needs at least 1 unit, got {n_clusters}")
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    head = make_mlp([cp.shared_first.out_dim, n_clusters], rng)
    cp.heads.append(head)
    return cp


def shared_features(cp: ClusterProjector, h: Tensor) -> Tensor:
    return encoder_forward(cp.shared_first, h)


def head_logits(cp: ClusterProjector, h: Tensor, head_index: int) -> Tensor:
    """Raw logits of one task head (1-based index) on latent rows ``h``."""
    if not 1 <= head_index <= len(cp.heads):
        raise IndexError(
            f"head {head_index} out of range (have {len(cp.heads)})")
    return encoder_forward(cp.heads[head_index - 1], shared_features(cp, h))


def cluster_project(cp: ClusterProjector, h: Tensor,
                    head_index: int) -> Tensor:
    """Row-stochastic cluster-assignment probabilities for one task head."""
    return T.softmax_rows(head_logits(cp, h, head_index))


def cluster_logits_np(cp: ClusterProjector, h: np.ndarray,
                      head_index: int) -> np.ndarray:
    """Gradient-free head logits for evaluation."""
    feats = mlp_apply(cp.shared_first, h)
    return mlp_apply(cp.heads[head_index - 1], feats)


# --------------------------------------------------------------- sizing

@dataclass
class ModelSizes:
    """Layer widths for every network plus derived parameter counts.

    The student must be strictly smaller than the teacher; whether the whole
    student pool stays under the teacher's budget is reported, not enforced.
    """

    input_dim: int = 16
    teacher_hidden: int = 128
    latent_dim: int = 64
    student_hidden: int = 24
    projector_hidden: int = 64
    projector_out: int = 32
    predictor_hidden: int = 32
    cluster_hidden: int = 64

    @property
    def teacher_dims(self) -> list[int]:
        return [self.input_dim, self.teacher_hidden, self.latent_dim]

    @property
    def student_dims(self) -> list[int]:
        return [self.input_dim, self.student_hidden, self.latent_dim]

    @property
    def projector_dims(self) -> list[int]:
        return [self.latent_dim, self.projector_hidden, self.projector_out]

    @property
    def predictor_dims(self) -> list[int]:
        return [self.projector_out, self.predictor_hidden, self.projector_out]

    @staticmethod
    def _count(dims: list[int]) -> int:
        return sum(dims[i + 1] * dims[i] + dims[i + 1]
                   for i in range(len(dims) - 1))

    @property
    def param_count_teacher(self) -> int:
        return self._count(self.teacher_dims)

    @property
    def param_count_student(self) -> int:
        return self._count(self.student_dims)

    def validate(self, n_students: int) -> list[str]:
        """Returns advisory warnings; raises if the student is not lighter
        than the teacher."""
        if self.param_count_student >= self.param_count_teacher:
            raise ValueError(
                f"student ({self.param_count_student} params) must be smaller "
                f"than teacher ({self.param_count_teacher})")
        warnings = []
        pool = n_students * self.param_count_student
        if pool >= self.param_count_teacher:
            warnings.append(
                f"student pool holds {pool} params, not below the teacher's "
                f"{self.param_count_teacher}")
        return warnings
