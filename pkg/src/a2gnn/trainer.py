"""Two-stage Adam training of the GNN, numerical gradient checking and inference."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from a2gnn.affinity import bandwidth_matrix
from a2gnn.gnn import GnnParams, forward, init_params
from a2gnn.labels import UNKNOWN
from a2gnn.losses import joint_loss
from a2gnn.optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    stage_split: int = 50
    learning_rate: float = 0.03
    weight_decay: float = 5e-4
    dropout: float = 0.5
    lambda1: float = 0.01
    beta: float = 1.0
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 256
    layers: int = 3
    n_classes: int | None = None
    use_mp: bool = True
    use_reg: bool = True
    use_cc: bool = True
    tau_cc: float = 0.0
    strict_eq28: bool = False
    train_beta: bool = False

    def __post_init__(self):
        if not 0 <= self.stage_split <= self.epochs:
            raise ValueError("need 0 <= stage_split <= epochs")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.layers < 1:
            raise ValueError("need at least one attention layer")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def node_boxes(boxes, graph):
    """Scale image-resolution boxes onto the graph's node grid."""
    return [b.scaled(graph.stride, graph.grid) for b in boxes]


def _n_classes(corpus) -> int:
    top = 1
    for _, labels, boxes in corpus:
        lab = np.asarray(labels)
        known = lab[lab != UNKNOWN]
        if known.size:
            top = max(top, int(known.max()))
        for b in boxes:
            top = max(top, b.cls)
    return top + 1


def train(corpus, cfg: TrainConfig, callback=None, params: GnnParams | None = None):
    """Fit shared parameters over ``corpus`` = [(graph, node_labels, boxes), ...].

    ``boxes`` are in image pixels. One optimiser step per graph per epoch, in
    an order reshuffled every epoch. Epochs ``1..stage_split`` use the stage-1
    loss. ``callback(epoch, params)`` runs after every epoch.

    Returns ``(params, log)`` where ``log`` holds one dict per epoch.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.n_classes or _n_classes(corpus)
    in_dim = corpus[0][0].X.shape[1]
    if params is None:
        params = init_params(in_dim, n_classes, cfg.hidden, cfg.layers, cfg.beta, rng)
    opt = Adam(cfg.learning_rate, (cfg.adam_b1, cfg.adam_b2), cfg.adam_eps,
               cfg.weight_decay, decay=("W0", "WL1"))
    boxes = [node_boxes(b, g) for g, _, b in corpus]
    kernels = [bandwidth_matrix(g.coords, g.colors) if cfg.use_reg else None for g, _, _ in corpus]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stage = 1 if epoch <= cfg.stage_split else 2
        sums = dict(ce=0.0, mp=0.0, reg=0.0, total=0.0)
        removed = 0
        for k in rng.permutation(len(corpus)):
            graph, labels, _ = corpus[k]
            trace = forward(graph, params, train=True, dropout=cfg.dropout, rng=rng)
            rep = joint_loss(trace, graph, labels, boxes[k], params, stage, cfg.lambda1,
                             cfg.use_mp, cfg.use_reg, cfg.use_cc, cfg.tau_cc, cfg.strict_eq28,
                             G=kernels[k])
            if not np.isfinite(rep.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, graph {k}")
            for key in sums:
                sums[key] += getattr(rep, key)
            removed += rep.removed_seeds
            arrays = params.arrays()
            grads = rep.grads.arrays()
            if not cfg.train_beta:
                arrays.pop("beta")
            new = opt.step(arrays, grads)
            new.setdefault("beta", params.beta)
            params = GnnParams.from_arrays(new)
        n = len(corpus)
        record = {"epoch": epoch, "stage": stage}
        record.update({key: v / n for key, v in sums.items()})
        record["removed_seeds"] = removed
        history.append(record)
        log.debug("epoch %d stage %d total %.5g", epoch, stage, record["total"])
        if callback is not None:
            callback(epoch, params)
    return params, history


def infer(graphs, params: GnnParams) -> list:
    """Eval-mode class probabilities ``(n_nodes, C)`` for every graph."""
    return [forward(g, params, train=False).O for g in graphs]


def _joint_total(graph, labels, boxes, params, stage, lambda1, sel, cc_labels, G):
    trace = forward(graph, params, train=False)
    return joint_loss(trace, graph, labels, boxes, params, stage, lambda1,
                      selection=sel, cc_labels=cc_labels, G=G).total


def grad_check(graph, labels, boxes, params: GnnParams, step: float = 1e-5, stage: int = 2,
               lambda1: float = 0.01, max_entries: int = 10_000, seed: int = 0,
               floor: float = 1e-6, analytic=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Dropout is off. The MP selection and consistency-checked labels from the
    unperturbed pass are held fixed, matching the stop-gradient the analytic
    path uses. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    Above ``max_entries`` parameters a seeded random subset is checked.
    ``analytic`` may replace the analytic gradient (a callable returning a
    :class:`GnnParams`), e.g. for fault injection.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    boxes = node_boxes(boxes, graph)
    G = bandwidth_matrix(graph.coords, graph.colors)
    trace = forward(graph, params, train=False)
    rep = joint_loss(trace, graph, labels, boxes, params, stage, lambda1, G=G)
    grads = analytic(graph, labels, boxes, params) if analytic is not None else rep.grads
    ga = grads.arrays()
    base = params.arrays()
    entries = [(name, idx) for name, arr in base.items() for idx in np.ndindex(arr.shape)]
    if len(entries) > max_entries:
        pick = np.random.default_rng(seed).choice(len(entries), max_entries, replace=False)
        entries = [entries[i] for i in np.sort(pick)]
    worst = 0.0
    for name, idx in entries:
        vals = []
        for sign in (1.0, -1.0):
            pert = {k: np.array(v, np.float64, copy=True) for k, v in base.items()}
            pert[name][idx] += sign * step
            vals.append(_joint_total(graph, labels, boxes, GnnParams.from_arrays(pert), stage,
                                     lambda1, rep.selection, rep.labels, G))
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float(np.asarray(ga[name])[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
