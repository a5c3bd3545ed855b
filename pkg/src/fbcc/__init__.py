"""Continual clustering with forward-backward teacher-student distillation.

A single continually trained teacher encoder clusters a stream of disjoint
tasks.  A pool of lightweight students preserves earlier tasks: frozen
students distill their task back into the teacher while it learns new
clusters, and after each task a fresh student is trained to imitate the
teacher, becoming the memory of that task.
"""

from .data import (AugmentationConfig, TaskStream, augment_pair,
                   generate_stream, load_dataset, save_dataset,
                   subsample_imbalanced)
from .engine import (ContinualState, Report, TrainConfig, assign_clusters,
                     backward_kd_step, begin_task, forward_kd_step,
                     run_stream, student_count, update_prototypes)
from .losses import (assignment_entropy, cluster_contrastive_loss,
                     combined_forward_loss, forward_distillation_loss,
                     instance_contrastive_loss, student_imitation_loss)
from .metrics import (AccMatrix, DistillationRecord, acc_hat, average_acc,
                      average_forgetting, clustering_accuracy,
                      distillation_score)
from .nets import (ClusterProjector, MlpParams, ModelSizes, cluster_project,
                   encoder_forward, make_mlp, set_frozen, spawn_task_head)
from .tensor import Tensor, backward, cosine_sim, detach, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "AccMatrix", "AugmentationConfig", "ClusterProjector", "ContinualState",
    "DistillationRecord", "MlpParams", "ModelSizes", "Report", "TaskStream",
    "Tensor", "TrainConfig", "acc_hat", "assign_clusters",
    "assignment_entropy", "augment_pair", "average_acc",
    "average_forgetting", "backward", "backward_kd_step", "begin_task",
    "cluster_contrastive_loss", "cluster_project", "clustering_accuracy",
    "combined_forward_loss", "cosine_sim", "detach", "distillation_score",
    "encoder_forward", "finite_diff_check", "forward_distillation_loss",
    "forward_kd_step", "generate_stream", "instance_contrastive_loss",
    "load_dataset", "make_mlp", "run_stream", "save_dataset", "set_frozen",
    "spawn_task_head", "student_count", "student_imitation_loss",
    "subsample_imbalanced", "update_prototypes",
]
