"""Pixel affinities, the affinity-trained feature embedder, and image-to-graph
conversion.

Feature maps are ``(H, W, d)`` float arrays. Nodes are pixels of the feature
grid in row-major order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from a2gnn.labels import PairLabelSet, radius_pairs
from a2gnn.optim import Adam

log = logging.getLogger(__name__)

EPS = 1e-12
SIGMA_XY = 6.0
SIGMA_RGB = 0.1


def _flat(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f.reshape(-1, f.shape[-1])


def grid_coords(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)


def pair_affinity(f: np.ndarray, i: int, j: int) -> float:
    """exp(-L1(F_i - F_j) / d) for two flat node indices."""
    F = _flat(f)
    return float(np.exp(-np.abs(F[i] - F[j]).sum() / F.shape[1]))


def gaussian_bandwidth(pos_i, pos_j, col_i, col_j, sigma_xy=SIGMA_XY, sigma_rgb=SIGMA_RGB):
    """Colour/position kernel between two pixels; zero for a pixel with itself.

    The exponent uses plain (unsquared) Euclidean norms. Colours are expected
    on a [0, 1] scale. Works elementwise on stacked ``(..., 2)`` / ``(..., 3)``
    inputs as well.
    """
    dpos = np.linalg.norm(np.asarray(pos_i, float) - np.asarray(pos_j, float), axis=-1)
    dcol = np.linalg.norm(np.asarray(col_i, float) - np.asarray(col_j, float), axis=-1)
    g = np.exp(-dpos / (2 * sigma_xy**2) - dcol / (2 * sigma_rgb**2))
    g = np.where(dpos > 0, g, 0.0)
    return float(g) if np.ndim(g) == 0 else g


def bandwidth_matrix(coords, colors, sigma_xy=SIGMA_XY, sigma_rgb=SIGMA_RGB) -> np.ndarray:
    """Dense ``(N, N)`` kernel over all node pairs (zero diagonal)."""
    coords = np.asarray(coords, float)
    colors = np.asarray(colors, float)
    dpos = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    dcol = np.sqrt(((colors[:, None, :] - colors[None, :, :]) ** 2).sum(-1))
    g = np.exp(-dpos / (2 * sigma_xy**2) - dcol / (2 * sigma_rgb**2))
    np.fill_diagonal(g, 0.0)
    return g


def _incidence(i, j, n) -> sp.csr_matrix:
    """(n_pairs, n) matrix with +1 at column i and -1 at column j of each row."""
    m = len(i)
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([i, j])
    vals = np.concatenate([np.ones(m), -np.ones(m)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))


class _PairTerms:
    """Precomputed pair bookkeeping reused across optimisation steps."""

    def __init__(self, i, j, n):
        self.i = np.asarray(i, np.int64)
        self.j = np.asarray(j, np.int64)
        self.inc = _incidence(self.i, self.j, n)

    def diffs(self, F):
        diff = F[self.i] - F[self.j]
        return diff, np.abs(diff).sum(1) / F.shape[1]

    def scatter(self, coef, diff, d):
        """Gradient w.r.t. F of sum_k phi_k(dist_k), given coef = phi'(dist)."""
        return self.inc.T @ (coef[:, None] * np.sign(diff) / d)


def _class_loss(F, pos: _PairTerms | None, neg: _PairTerms | None, eps=EPS):
    loss = 0.0
    grad = np.zeros_like(F)
    d = F.shape[1]
    if pos is not None and len(pos.i):
        diff, dist = pos.diffs(F)
        D = np.exp(-dist)
        live = D > eps
        loss += -np.log(np.maximum(D, eps)).mean()
        grad += pos.scatter(live / len(pos.i), diff, d)
    if neg is not None and len(neg.i):
        diff, dist = neg.diffs(F)
        D = np.exp(-dist)
        one_minus = 1.0 - D
        live = one_minus > eps
        loss += -np.log(np.maximum(one_minus, eps)).mean()
        coef = np.where(live, -D / np.where(live, one_minus, 1.0), 0.0) / len(neg.i)
        grad += neg.scatter(coef, diff, d)
    return loss, grad


def _reg_loss(F, terms: _PairTerms, g):
    diff, dist = terms.diffs(F)
    return float((g * dist).sum()), terms.scatter(g, diff, F.shape[1])


def affinity_class_loss(f: np.ndarray, pairs: PairLabelSet, eps=EPS):
    """Cross-entropy of pair affinities against same/different-class labels.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``f``. Positive and
    negative pairs are averaged separately; an absent group contributes 0.
    """
    f = np.asarray(f, dtype=np.float64)
    F = _flat(f)
    lab = np.asarray(pairs.label)
    pos = _PairTerms(pairs.i[lab == 1], pairs.j[lab == 1], len(F))
    neg = _PairTerms(pairs.i[lab == 0], pairs.j[lab == 0], len(F))
    loss, grad = _class_loss(F, pos, neg, eps)
    return float(loss), grad.reshape(f.shape)


def affinity_reg_loss(f: np.ndarray, colors: np.ndarray, r: float = 5,
                      sigma_xy=SIGMA_XY, sigma_rgb=SIGMA_RGB, coords=None):
    """Kernel-weighted L1 feature spread over every unordered pair within ``r``.

    ``f`` is ``(H, W, d)`` and ``colors`` ``(H, W, 3)``; pairs are taken on the
    grid, with positions from ``coords`` (``(N, 2)``) if given, else the grid.
    """
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape[:2]
    F = _flat(f)
    i, j = radius_pairs(h, w, r)
    pos = grid_coords(h, w) if coords is None else np.asarray(coords, float)
    col = np.asarray(colors, float).reshape(-1, 3)
    g = gaussian_bandwidth(pos[i], pos[j], col[i], col[j], sigma_xy, sigma_rgb)
    loss, grad = _reg_loss(F, _PairTerms(i, j, len(F)), np.atleast_1d(g))
    return loss, grad.reshape(f.shape)


# ---------------------------------------------------------------- embedder


def pixel_descriptors(image: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel input vector: RGB in [0, 1], normalised (row, col), extras."""
    img = np.asarray(image, dtype=np.float64)
    if img.max(initial=0) > 1.0:
        img = img / 255.0
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys /= max(h - 1, 1)
    xs /= max(w - 1, 1)
    parts = [img, ys[..., None], xs[..., None]]
    if extra is not None:
        parts.append(np.asarray(extra, np.float64).reshape(h, w, -1))
    return np.concatenate(parts, axis=2)


@dataclass
class Embedder:
    """Two rectified affine stages mapping descriptors to non-negative features."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int = 32, out_dim: int = 64, seed: int = 0) -> "Embedder":
        rng = np.random.default_rng(seed)
        a1, a2 = 1 / np.sqrt(in_dim), 1 / np.sqrt(hidden)
        return cls(rng.uniform(-a1, a1, (in_dim, hidden)), rng.uniform(0, a1, hidden),
                   rng.uniform(-a2, a2, (hidden, out_dim)), rng.uniform(0, a2, out_dim))

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def arrays(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def _forward(self, X):
        z1 = X @ self.W1 + self.b1
        a1 = np.maximum(z1, 0)
        z2 = a1 @ self.W2 + self.b2
        return np.maximum(z2, 0), (X, z1, a1, z2)

    def __call__(self, descriptors: np.ndarray) -> np.ndarray:
        d = np.asarray(descriptors, np.float64)
        F, _ = self._forward(d.reshape(-1, d.shape[-1]))
        return F.reshape(*d.shape[:-1], self.out_dim)

    def node_features(self, descriptors: np.ndarray) -> np.ndarray:
        """Every level of the embedder side by side: input, hidden activations, output.

        Non-negative whenever the descriptors are.
        """
        d = np.asarray(descriptors, np.float64)
        X = d.reshape(-1, d.shape[-1])
        F, (_, _, a1, _) = self._forward(X)
        return np.concatenate([X, a1, F], axis=1).reshape(*d.shape[:-1], -1)

    def _backward(self, cache, dF):
        X, z1, a1, z2 = cache
        dz2 = dF * (z2 > 0)
        da1 = dz2 @ self.W2.T
        dz1 = da1 * (z1 > 0)
        return {"W1": X.T @ dz1, "b1": dz1.sum(0), "W2": a1.T @ dz2, "b2": dz2.sum(0)}


@dataclass
class EmbedderResult:
    embedder: Embedder
    trace: list = field(default_factory=list)


def train_embedder(descriptors: np.ndarray, pairs: PairLabelSet, lam: float = 3.0, r: float = 5,
                   steps: int = 200, lr: float = 0.01, hidden: int = 32, out_dim: int = 64,
                   seed: int = 0, sigma_xy=SIGMA_XY, sigma_rgb=SIGMA_RGB) -> EmbedderResult:
    """Fit an :class:`Embedder` to minimise class loss + ``lam`` * reg loss with Adam.

    ``descriptors`` is ``(H, W, D)`` whose first three channels are the
    colours used by the regularisation kernel. The trace holds the total loss
    before each step.
    """
    if len(pairs) == 0:
        raise ValueError("train_embedder needs at least one labelled pair")
    desc = np.asarray(descriptors, np.float64)
    h, w, in_dim = desc.shape
    n = h * w
    X = desc.reshape(n, in_dim)
    lab = np.asarray(pairs.label)
    pos = _PairTerms(pairs.i[lab == 1], pairs.j[lab == 1], n)
    neg = _PairTerms(pairs.i[lab == 0], pairs.j[lab == 0], n)
    ri, rj = radius_pairs(h, w, r)
    coords = grid_coords(h, w)
    cols = X[:, :3]
    reg_terms = _PairTerms(ri, rj, n)
    g = np.atleast_1d(gaussian_bandwidth(coords[ri], coords[rj], cols[ri], cols[rj], sigma_xy, sigma_rgb))

    emb = Embedder.init(in_dim, hidden, out_dim, seed)
    opt = Adam(lr=lr)
    trace = []
    for step in range(steps):
        F, cache = emb._forward(X)
        l_c, g_c = _class_loss(F, pos, neg)
        l_r, g_r = _reg_loss(F, reg_terms, g) if lam else (0.0, 0.0)
        total = l_c + lam * l_r
        if not np.isfinite(total):
            raise FloatingPointError(f"embedder loss diverged at step {step}: {total}")
        trace.append(float(total))
        grads = emb._backward(cache, g_c + lam * g_r)
        emb = Embedder(**opt.step(emb.arrays(), grads))
    log.debug("embedder loss %.4g -> %.4g", trace[0] if trace else float("nan"),
              trace[-1] if trace else float("nan"))
    return EmbedderResult(emb, trace)


# ---------------------------------------------------------------- graph


@dataclass
class PixelGraph:
    """Nodes of a feature grid with normalised features and soft edges.

    ``E`` is a symmetric CSR matrix with unit diagonal; ``coords`` are grid
    (row, col) positions and ``colors`` per-node RGB on [0, 1].
    """

    grid: tuple
    X: np.ndarray
    E: sp.csr_matrix
    coords: np.ndarray
    colors: np.ndarray
    stride: int = 1
    image_dims: tuple | None = None

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def to_sections(self) -> dict:
        coo = self.E.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return {
            "grid": np.array(self.grid, np.float64),
            "stride": np.array(self.stride, np.float64),
            "image_dims": np.array(self.image_dims or self.grid, np.float64),
            "X": self.X,
            "E_row": coo.row[order].astype(np.float64),
            "E_col": coo.col[order].astype(np.float64),
            "E_val": coo.data[order],
            "coords": self.coords,
            "colors": self.colors,
        }

    @classmethod
    def from_sections(cls, s: dict) -> "PixelGraph":
        n = s["X"].shape[0]
        E = sp.csr_matrix((s["E_val"], (s["E_row"].astype(np.int64), s["E_col"].astype(np.int64))),
                          shape=(n, n))
        return cls(tuple(int(v) for v in s["grid"]), s["X"], E, s["coords"], s["colors"],
                   int(s["stride"]), tuple(int(v) for v in s["image_dims"]))


def normalize_rows(F: np.ndarray, eps=EPS) -> np.ndarray:
    """Divide each row by its sum; rows summing to (near) zero become uniform."""
    F = np.asarray(F, np.float64)
    s = F.sum(axis=1, keepdims=True)
    dead = np.abs(s[:, 0]) <= eps
    out = F / np.where(dead[:, None], 1.0, s)
    out[dead] = 1.0 / F.shape[1]
    return out


def build_graph(f: np.ndarray, colors: np.ndarray, r: float = 5, sigma_edge: float = 1e-3,
                global_edges: bool = False, stride: int = 1, image_dims=None,
                node_features: np.ndarray | None = None) -> PixelGraph:
    """Turn a feature map into a :class:`PixelGraph`.

    Edges carry the pair affinity of ``f`` where it exceeds ``sigma_edge``
    and are restricted to grid distance ``r`` unless ``global_edges`` is set
    (allowed up to 4096 nodes). Node features are the row-normalised
    ``node_features`` (``(H, W, D_g)``, non-negative), defaulting to ``f``.
    """
    f = np.asarray(f, np.float64)
    if (f < 0).any():
        raise ValueError("build_graph needs non-negative features")
    h, w, d = f.shape
    n = h * w
    F = f.reshape(n, d)
    if global_edges:
        if n > 4096:
            raise ValueError(f"global edges limited to 4096 nodes, got {n}")
        i, j = np.triu_indices(n, k=1)
    else:
        i, j = radius_pairs(h, w, r)
    D = np.exp(-np.abs(F[i] - F[j]).sum(1) / d)
    keep = D > sigma_edge
    i, j, D = i[keep], j[keep], D[keep]
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([D, D, np.ones(n)])
    E = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    E.sort_indices()
    col = np.asarray(colors, np.float64).reshape(n, -1)
    if col.max(initial=0) > 1.0:
        col = col / 255.0
    X = F if node_features is None else np.asarray(node_features, np.float64).reshape(n, -1)
    if (X < 0).any():
        raise ValueError("node features must be non-negative")
    return PixelGraph((h, w), normalize_rows(X), E, grid_coords(h, w), col, stride,
                      tuple(image_dims) if image_dims is not None else (h, w))
