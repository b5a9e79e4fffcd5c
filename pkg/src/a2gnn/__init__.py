"""Affinity-attention graph neural network for turning sparse, noisy seed
labels plus bounding boxes into dense pixel pseudo-labels."""

from a2gnn.labels import (
    UNKNOWN,
    BACKGROUND,
    Box,
    PairLabelSet,
    affinity_pairs,
    assemble_box_seeds,
    downsample,
    fuse_seeds,
    select_confident,
)
from a2gnn.affinity import (
    Embedder,
    PixelGraph,
    affinity_class_loss,
    affinity_reg_loss,
    build_graph,
    gaussian_bandwidth,
    pair_affinity,
    train_embedder,
)
from a2gnn.gnn import ForwardTrace, GnnParams, forward, init_params
from a2gnn.losses import (
    LossReport,
    MpSelection,
    ce_loss,
    consistency_check,
    joint_loss,
    mp_loss,
    reg_loss,
    select_mp_nodes,
)
from a2gnn.trainer import TrainConfig, grad_check, infer, train
from a2gnn.refine import CrfConfig, crf_refine, miou, to_instances, to_labels, upsample

__version__ = "0.1.0"
