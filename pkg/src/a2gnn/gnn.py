"""Forward and backward passes of the affinity-attention GNN.

Layers: ``H1 = relu(X W0)`` (dropout on H1 in training), then ``L``
attention layers ``H_{l+1} = P_l H_l`` and a softmax output head
``O = softmax(H_{L+1} WL1)``.

Attention is evaluated densely over ``N x N`` node pairs and masked to each
node's neighbourhood ``S(i) = {j : E_ij > 0} + {i}``; that is cheap at the
graph sizes this package targets (a few thousand nodes at most).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass
class GnnParams:
    W0: np.ndarray
    w: np.ndarray
    WL1: np.ndarray
    beta: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.w)

    def arrays(self) -> dict:
        return {"W0": self.W0, "w": self.w, "WL1": self.WL1, "beta": np.asarray(self.beta, np.float64)}

    @classmethod
    def from_arrays(cls, a: dict) -> "GnnParams":
        return cls(np.asarray(a["W0"], np.float64), np.asarray(a["w"], np.float64),
                   np.asarray(a["WL1"], np.float64), float(a["beta"]))

    def to_sections(self) -> dict:
        out = {"W0": self.W0}
        for l, wl in enumerate(self.w, start=1):
            out[f"w{l}"] = np.asarray(wl, np.float64)
        out["WL1"] = self.WL1
        out["beta"] = np.asarray(self.beta, np.float64)
        return out

    @classmethod
    def from_sections(cls, s: dict) -> "GnnParams":
        n_layers = sum(1 for k in s if k[:1] == "w" and k[1:].isdigit())
        w = np.array([np.asarray(s[f"w{l}"]).item() for l in range(1, n_layers + 1)])
        return cls(s["W0"], w, s["WL1"], np.asarray(s["beta"]).item())


def init_params(in_dim: int, n_classes: int, hidden: int = 256, n_layers: int = 3,
                beta: float = 1.0, rng: np.random.Generator | int = 0) -> GnnParams:
    """Uniform fan-in init for the weight matrices; attention scalars start at 1."""
    if n_layers < 1:
        raise ValueError("need at least one attention layer")
    rng = np.random.default_rng(rng)
    a0, a1 = 1 / np.sqrt(in_dim), 1 / np.sqrt(hidden)
    W0 = rng.uniform(-a0, a0, (in_dim, hidden))
    WL1 = rng.uniform(-a1, a1, (hidden, n_classes))
    return GnnParams(W0, np.ones(n_layers), WL1, float(beta))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _unit_rows(H: np.ndarray):
    norms = np.linalg.norm(H, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return H / safe[:, None], norms


@dataclass
class AttentionCache:
    H: np.ndarray
    Hn: np.ndarray
    norms: np.ndarray
    cos: np.ndarray
    gate: np.ndarray
    P: np.ndarray


@dataclass
class ForwardTrace:
    X: np.ndarray
    Z0: np.ndarray
    H1: np.ndarray
    layers: list
    H_out: np.ndarray
    O: np.ndarray
    E_dense: np.ndarray
    mask: np.ndarray
    dropout: np.ndarray | None = None

    @property
    def P(self) -> list:
        return [c.P for c in self.layers]

    @property
    def H(self) -> list:
        return [c.H for c in self.layers] + [self.H_out]


def neighbourhood(E) -> tuple:
    """Dense edge weights and the boolean ``S(i)`` mask (always includes i)."""
    Ed = E.toarray() if sp.issparse(E) else np.asarray(E, np.float64)
    mask = Ed > 0
    np.fill_diagonal(mask, True)
    return Ed, mask


def embed_forward(X: np.ndarray, W0: np.ndarray) -> np.ndarray:
    X, W0 = np.asarray(X, np.float64), np.asarray(W0, np.float64)
    if X.shape[1] != W0.shape[0]:
        raise ValueError(f"X has {X.shape[1]} features, W0 expects {W0.shape[0]}")
    return np.maximum(X @ W0, 0.0)


def attention_scores(H: np.ndarray, Ed: np.ndarray, mask: np.ndarray, wl: float, beta: float):
    Hn, norms = _unit_rows(H)
    cos = Hn @ Hn.T
    gate = (cos > 0).astype(np.float64)
    logits = wl * cos + beta * gate * Ed
    logits = np.where(mask, logits, -np.inf)
    P = _softmax_rows(logits)
    return AttentionCache(H, Hn, norms, cos, gate, P)


def attention_forward(H: np.ndarray, E, wl: float, beta: float):
    """One affinity-attention layer; returns ``(P, P @ H)``."""
    Ed, mask = neighbourhood(E)
    cache = attention_scores(np.asarray(H, np.float64), Ed, mask, wl, beta)
    return cache.P, cache.P @ cache.H


def output_forward(H: np.ndarray, WL1: np.ndarray) -> np.ndarray:
    H, WL1 = np.asarray(H, np.float64), np.asarray(WL1, np.float64)
    if H.shape[1] != WL1.shape[0]:
        raise ValueError(f"H has {H.shape[1]} features, WL1 expects {WL1.shape[0]}")
    return _softmax_rows(H @ WL1)


def forward(graph, params: GnnParams, train: bool = False, dropout: float = 0.5,
            rng: np.random.Generator | int | None = None) -> ForwardTrace:
    """Full forward pass keeping every intermediate for :func:`backward`.

    ``graph`` is a :class:`~a2gnn.affinity.PixelGraph` or any object with
    ``X`` and ``E``. In training mode inverted dropout is drawn from ``rng``.
    """
    if params.n_layers < 1:
        raise ValueError("need at least one attention layer")
    X = np.asarray(graph.X, np.float64)
    Ed, mask = neighbourhood(graph.E)
    Z0 = X @ params.W0
    H1 = np.maximum(Z0, 0.0)
    drop = None
    if train and dropout > 0:
        rng = np.random.default_rng(rng)
        drop = (rng.random(H1.shape) >= dropout) / (1.0 - dropout)
        H1 = H1 * drop
    H = H1
    layers = []
    for l, wl in enumerate(params.w, start=1):
        cache = attention_scores(H, Ed, mask, float(wl), params.beta)
        layers.append(cache)
        H = cache.P @ H
        if not np.isfinite(H).all():
            raise FloatingPointError(f"non-finite features after attention layer {l}")
    O = _softmax_rows(H @ params.WL1)
    if not np.isfinite(O).all():
        raise FloatingPointError(f"non-finite output at layer {params.n_layers + 1}")
    return ForwardTrace(X, Z0, H1, layers, H, O, Ed, mask, drop)


def _attention_backward(c: AttentionCache, dH_out, Ed, mask, wl, beta):
    P, H = c.P, c.H
    dP = np.where(mask, dH_out @ H.T, 0.0)
    dH = P.T @ dH_out
    dS = P * (dP - (P * dP).sum(axis=1, keepdims=True))
    dw = float((dS * c.cos).sum())
    dbeta = float((dS * c.gate * Ed).sum())
    dC = wl * dS
    dHn = dC @ c.Hn + dC.T @ c.Hn
    radial = (c.Hn * dHn).sum(axis=1, keepdims=True)
    live = c.norms > 0
    dH[live] += (dHn[live] - c.Hn[live] * radial[live]) / c.norms[live, None]
    return dH, dw, dbeta


def backward(trace: ForwardTrace, params: GnnParams, dO=None, dH_out=None) -> GnnParams:
    """Parameter gradients given upstream gradients w.r.t. ``O`` and ``H_{L+1}``."""
    O = trace.O
    grads_w = np.zeros(params.n_layers)
    dbeta = 0.0
    if dO is None:
        dO = np.zeros_like(O)
    dZ = O * (dO - (dO * O).sum(axis=1, keepdims=True))
    dWL1 = trace.H_out.T @ dZ
    dH = dZ @ params.WL1.T
    if dH_out is not None:
        dH = dH + dH_out
    for l in range(params.n_layers - 1, -1, -1):
        dH, dw, db = _attention_backward(trace.layers[l], dH, trace.E_dense, trace.mask,
                                         float(params.w[l]), params.beta)
        grads_w[l] = dw
        dbeta += db
    if trace.dropout is not None:
        dH = dH * trace.dropout
    dZ0 = dH * (trace.Z0 > 0)
    dW0 = trace.X.T @ dZ0
    return GnnParams(dW0, grads_w, dWL1, dbeta)
