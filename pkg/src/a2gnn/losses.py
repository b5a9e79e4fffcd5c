"""Training objective for the GNN: cross-entropy on seed nodes, colour/position
regularisation, the multi-point (MP) box loss and per-box consistency checking.

Every loss returns its value together with gradients w.r.t. the quantities it
reads (``O`` and, for MP, the final features ``H``); :func:`joint_loss`
routes those through :func:`a2gnn.gnn.backward`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from a2gnn.affinity import SIGMA_RGB, SIGMA_XY, bandwidth_matrix
from a2gnn.gnn import ForwardTrace, GnnParams, backward
from a2gnn.labels import UNKNOWN

log = logging.getLogger(__name__)

EPS = 1e-12
COS_TOL = 1e-9


@dataclass
class MpGroup:
    box_index: int
    box: object
    nodes: np.ndarray


@dataclass
class MpSelection:
    """Per box, the selected node of every box row followed by every box column."""

    groups: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)


@dataclass
class LossReport:
    ce: float
    mp: float
    reg: float
    total: float
    grads: GnnParams
    lambda1: float = 0.01
    removed_seeds: int = 0
    selection: MpSelection | None = None
    labels: np.ndarray | None = None


def _log_clamped(p, eps=EPS):
    live = p > eps
    return np.log(np.maximum(p, eps)), np.where(live, 1.0 / np.where(live, p, 1.0), 0.0)


def ce_loss(O: np.ndarray, labels: np.ndarray, eps=EPS):
    """Mean negative log-likelihood over nodes whose label is not 255."""
    O = np.asarray(O, np.float64)
    lab = np.asarray(labels).ravel()
    if lab.shape[0] != O.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {O.shape[0]} nodes")
    known = np.flatnonzero(lab != UNKNOWN)
    grad = np.zeros_like(O)
    if known.size == 0:
        return 0.0, grad
    cls = lab[known].astype(np.int64)
    if cls.max() >= O.shape[1]:
        raise ValueError(f"label {cls.max()} outside {O.shape[1]} classes")
    logp, inv = _log_clamped(O[known, cls], eps)
    grad[known, cls] = -inv / known.size
    return float(-logp.mean()), grad


def reg_loss(O: np.ndarray, coords=None, colors=None, sigma_xy=SIGMA_XY, sigma_rgb=SIGMA_RGB, G=None):
    """Kernel-weighted probability of disagreeing class pairs over all node pairs.

    Equals ``sum_ab G_ab sum_{c != c'} O_a[c] O_b[c']``. Pass a precomputed
    kernel ``G`` to skip rebuilding it.
    """
    O = np.asarray(O, np.float64)
    if G is None:
        G = bandwidth_matrix(coords, colors, sigma_xy, sigma_rgb)
    S = O.sum(axis=1)
    GS = G @ S
    GO = G @ O
    loss = float((G * (np.outer(S, S) - O @ O.T)).sum())
    grad = (GS + G.T @ S)[:, None] - GO - G.T @ O
    return loss, grad


def select_mp_nodes(O: np.ndarray, boxes, grid) -> MpSelection:
    """Row- and column-wise argmax of the box-class probability inside each box.

    ``boxes`` must already be on the node grid ``grid = (h, w)``. Ties go to
    the lowest node index.
    """
    h, w = grid
    O = np.asarray(O, np.float64)
    prob = O.reshape(h, w, -1)
    sel = MpSelection()
    for k, box in enumerate(boxes):
        y0, y1 = max(box.y0, 0), min(box.y1, h)
        x0, x1 = max(box.x0, 0), min(box.x1, w)
        if y1 <= y0 or x1 <= x0:
            log.warning("box %d is empty on the %dx%d node grid; skipped", k, h, w)
            continue
        p = prob[y0:y1, x0:x1, box.cls]
        rows = [(y0 + r) * w + x0 + int(np.argmax(p[r])) for r in range(y1 - y0)]
        cols = [(y0 + int(np.argmax(p[:, c]))) * w + x0 + c for c in range(x1 - x0)]
        sel.groups.append(MpGroup(k, box, np.array(rows + cols, dtype=np.int64)))
    return sel


def cosine_pairs(H: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Cosine similarity of rows ``a`` and ``b`` of ``H`` plus its gradients.

    Zero vectors give cosine 0 and zero gradient.
    """
    Ha, Hb = H[a], H[b]
    na, nb = np.linalg.norm(Ha, axis=1), np.linalg.norm(Hb, axis=1)
    live = (na > 0) & (nb > 0)
    sa, sb = np.where(live, na, 1.0), np.where(live, nb, 1.0)
    cos = np.where(live, (Ha * Hb).sum(1) / (sa * sb), 0.0)
    ga = np.where(live[:, None], Hb / (sa * sb)[:, None] - cos[:, None] * Ha / (sa**2)[:, None], 0.0)
    gb = np.where(live[:, None], Ha / (sa * sb)[:, None] - cos[:, None] * Hb / (sb**2)[:, None], 0.0)
    return cos, ga, gb


def _ordered_pairs(nodes: np.ndarray):
    m, n = np.meshgrid(np.arange(len(nodes)), np.arange(len(nodes)), indexing="ij")
    keep = nodes[m] != nodes[n]
    return nodes[m[keep]], nodes[n[keep]]


def mp_loss(O: np.ndarray, H: np.ndarray, sel: MpSelection, eps=EPS):
    """MP loss: box-class likelihood of selected nodes plus their feature spread.

    Returns ``(loss, dO, dH)``. The spread term averages ``1 - cos`` over
    ordered pairs of selected entries whose node indices differ.
    """
    O = np.asarray(O, np.float64)
    H = np.asarray(H, np.float64)
    dO = np.zeros_like(O)
    dH = np.zeros_like(H)
    idx = [g.nodes for g in sel]
    if not idx:
        return 0.0, dO, dH
    nodes = np.concatenate(idx)
    cls = np.concatenate([np.full(len(g.nodes), g.box.cls) for g in sel])
    logp, inv = _log_clamped(O[nodes, cls], eps)
    n_p = len(nodes)
    loss = float(-logp.sum() / n_p)
    np.add.at(dO, (nodes, cls), -inv / n_p)

    pa, pb = zip(*(_ordered_pairs(g.nodes) for g in sel))
    a, b = np.concatenate(pa), np.concatenate(pb)
    n_f = len(a)
    if n_f:
        cos, ga, gb = cosine_pairs(H, a, b)
        loss += float((1.0 - cos).sum() / n_f)
        np.add.at(dH, a, -ga / n_f)
        np.add.at(dH, b, -gb / n_f)
    return loss, dO, dH


def consistency_check(H: np.ndarray, sel: MpSelection, labels: np.ndarray, grid,
                      tau: float = 0.0, strict: bool = False) -> np.ndarray:
    """Drop box-class seeds that point away from the box's MP prototype.

    A seed inside a box with the box's class survives iff its cosine
    similarity to the mean selected feature exceeds ``tau`` (by more than
    ``COS_TOL``, which absorbs rounding in the dot product). With
    ``strict`` the keep rule is instead ``1 - cos > 0``. Other labels are
    never touched, so the output only ever replaces labels with 255.
    """
    h, w = grid
    H = np.asarray(H, np.float64)
    lab = np.asarray(labels, dtype=np.uint8).reshape(h, w)
    out = lab.copy()
    for g in sel:
        if len(g.nodes) == 0:
            continue
        proto = H[g.nodes].mean(axis=0)
        box = g.box
        ys, xs = np.mgrid[box.y0:box.y1, box.x0:box.x1]
        flat = (ys * w + xs).ravel()
        cand = flat[lab.ravel()[flat] == box.cls]
        if cand.size == 0:
            continue
        pn = np.linalg.norm(proto)
        hn = np.linalg.norm(H[cand], axis=1)
        denom = hn * pn
        cos = np.where(denom > 0, H[cand] @ proto / np.where(denom > 0, denom, 1.0), 0.0)
        # cosines within rounding of tau count as tau, so orthogonal features are dropped reliably
        keep = (1.0 - cos > 0) if strict else (cos > tau + COS_TOL)
        drop = cand[~keep]
        out.reshape(-1)[drop] = UNKNOWN
    return out.reshape(np.shape(labels))


def joint_loss(trace: ForwardTrace, graph, labels, boxes, params: GnnParams, stage: int = 1,
               lambda1: float = 0.01, use_mp: bool = True, use_reg: bool = True, use_cc: bool = True,
               tau: float = 0.0, strict: bool = False, selection: MpSelection | None = None,
               cc_labels=None, G=None) -> LossReport:
    """Total loss ``ce + mp + lambda1 * reg`` and its gradient w.r.t. ``params``.

    Stage 1 uses only ce + mp. Stage 2 adds the regulariser and runs the
    consistency check on ``labels`` before the cross-entropy. ``boxes`` live
    on the node grid. ``selection`` and ``cc_labels`` pin the MP selection
    and checked labels (used when differentiating numerically).
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    O, H = trace.O, trace.H_out
    grid = graph.grid
    labels = np.asarray(labels).ravel()
    dO = np.zeros_like(O)
    dH = np.zeros_like(H)
    mp = reg = 0.0
    sel = selection
    if sel is None and (use_mp or (stage == 2 and use_cc)):
        sel = select_mp_nodes(O, boxes, grid)

    used = labels
    removed = 0
    if stage == 2 and use_cc:
        used = cc_labels if cc_labels is not None else consistency_check(H, sel, labels, grid, tau, strict)
        used = np.asarray(used).ravel()
        removed = int(((labels != UNKNOWN) & (used == UNKNOWN)).sum())
    ce, g = ce_loss(O, used)
    dO += g
    if use_mp:
        mp, g_o, g_h = mp_loss(O, H, sel)
        dO += g_o
        dH += g_h
    if stage == 2 and use_reg:
        if G is None:
            G = bandwidth_matrix(graph.coords, graph.colors)
        reg, g = reg_loss(O, G=G)
        dO += lambda1 * g
    total = ce + mp + (lambda1 * reg if stage == 2 else 0.0)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite joint loss {total}")
    grads = backward(trace, params, dO, dH)
    return LossReport(ce, mp, reg, total, grads, lambda1, removed, sel, used)
