"""GNN-to-Transformer structural knowledge distillation, desk scale.

Teachers (GCN / GraphSAGE / GAT) are trained on node classification; their
per-layer embeddings and logits are frozen and a Transformer student is
trained against a four-part objective: supervised NLL, edge-wise micro KL,
graph-level macro KL, and a multi-scale edge-consistency term.
"""

from .config import ExperimentConfig, MlpConfig, StudentConfig, TeacherConfig
from .graphs import Graph, NormalizedAdjacency, load_graph, normalize_adjacency, \
    save_graph, synth_graph
from .losses import DistillConfig, LossBreakdown, cls_loss, kl_div, macro_loss, \
    micro_loss, multiscale_loss, total_loss
from .optim import Adam, adam_step
from .student import StudentOutput, StudentParams, init_student_params, \
    mlp_baseline_forward, multi_head, scaled_dot_attention, student_forward
from .teachers import TeacherArtifacts, TeacherParams, gat_layer, gcn_layer, \
    load_artifacts, sage_layer, save_artifacts, teacher_forward, train_teacher
from .tensor import Tensor, no_grad
from .train import EpochRecord, ReportRow, distill_train, emit_report, evaluate, \
    grad_check, run_experiment

__version__ = "0.1.0"
