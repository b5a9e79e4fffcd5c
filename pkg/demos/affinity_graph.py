"""
From pixels to a weighted graph
===============================

Trains the per-image affinity embedder on pair labels drawn from the
confident seeds, then builds the radius graph the GNN runs on.

Run with ``python demos/affinity_graph.py``.
"""

import tempfile
from pathlib import Path

import numpy as np

from a2gnn import fixtures, pipeline
from a2gnn.affinity import build_graph, pixel_descriptors
from a2gnn.config import PipelineConfig
from a2gnn.labels import downsample

root = Path(tempfile.mkdtemp())
fixtures.generate(root / "data", n_images=1, seed=1)
sample = pipeline.load_sample(root / "data", "img000")
cfg = PipelineConfig()
_, _, m_g = pipeline.seed_maps(sample, cfg.ratio)

###############################################################################
# Embedder training
# -----------------
# The loss trace is the class loss plus the weighted colour regulariser.

res, feats, colors, labels = pipeline.affinity_features(sample.image, m_g, cfg, seed=0)
print(f"loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f} over {len(res.trace)} steps")

###############################################################################
# Affinity between and within classes
# -----------------------------------

gt = downsample(sample.gt, cfg.stride).ravel()
F = feats.reshape(len(gt), -1)
D = np.exp(-np.abs(F[:, None] - F[None]).sum(-1) / F.shape[1])
same = gt[:, None] == gt[None]
print(f"mean affinity: same class {D[same].mean():.3f}, different class {D[~same].mean():.3f}")

###############################################################################
# The graph
# ---------

g = build_graph(feats, colors, cfg.radius, cfg.sigma_edge, stride=cfg.stride,
                image_dims=sample.image.shape[:2],
                node_features=res.embedder.node_features(pixel_descriptors(colors)))
deg = (g.E > 0).sum(1).A.ravel()
print(f"{g.n_nodes} nodes, feature width {g.X.shape[1]}, degree {deg.min()}..{deg.max()}")
cross = g.E.toarray()[~same].sum() / g.E.toarray().sum()
print(f"share of edge weight crossing class boundaries: {cross:.1%}")
