"""Synthetic box-supervised dataset used by the end-to-end checks.

Each image holds one or two elliptical objects of two foreground classes on a
textured background. Object colour fades from a saturated core towards a
duller rim, so seeds placed on the core do not describe the whole object.
Per image the generator writes:

    images/<id>.ppm        RGB image
    seeds/<id>.pgm         sparse, noisy image-level seed labels
    scores/<id>.tnsr       per-class seed confidence ("score", H x W x C)
    boxes/<id>.json        tight boxes
    boxmasks/<id>_<k>.pgm  rough per-box foreground fragments
    gt/<id>.pgm            ground truth
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from a2gnn import io
from a2gnn.affinity import PixelGraph, build_graph
from a2gnn.gnn import GnnParams, init_params
from a2gnn.labels import UNKNOWN, Box

N_CLASSES = 3
BG_COLOR = np.array([0.45, 0.62, 0.42])
CORE = {1: np.array([0.92, 0.22, 0.18]), 2: np.array([0.18, 0.30, 0.92])}
RIM = {1: np.array([0.70, 0.40, 0.30]), 2: np.array([0.32, 0.40, 0.70])}
GRAIN = 0.025  # per-channel pixel noise


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    gt: np.ndarray
    boxes: list
    seeds: np.ndarray
    score: np.ndarray
    fragments: list


def _place_objects(rng, size, n_obj):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    gt = np.zeros((size, size), np.uint8)
    radial = np.full((size, size), np.inf)
    for cls in rng.permutation([1, 2])[:n_obj]:
        for _ in range(200):
            ry, rx = rng.uniform(4.5, 8.5, 2) * (size / 32)
            cy, cx = rng.uniform(ry + 1, size - ry - 1), rng.uniform(rx + 1, size - rx - 1)
            rho = np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2)
            grown = np.sqrt(((ys - cy) / (ry + 2)) ** 2 + ((xs - cx) / (rx + 2)) ** 2) <= 1.0
            if not (gt[grown] != 0).any():
                obj = rho <= 1.0
                gt[obj] = cls
                radial[obj] = rho[obj]
                break
    return gt, radial


def make_sample(rng: np.random.Generator, size: int = 32, coverage: float = 0.3,
                noise: float = 0.1, grain: float = GRAIN) -> Sample:
    n_obj = int(rng.integers(1, 3))
    gt, radial = _place_objects(rng, size, n_obj)

    ys, xs = np.mgrid[0:size, 0:size] / size
    img = BG_COLOR + 0.06 * np.stack([np.sin(5 * xs + 1), np.cos(4 * ys), np.sin(3 * (xs + ys))], -1)
    for c in (1, 2):
        m = gt == c
        t = np.clip(radial[m], 0, 1)[:, None] ** 2
        img[m] = (1 - t) * CORE[c] + t * RIM[c]
    img = img + rng.normal(0, grain, img.shape)
    image = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)

    boxes = []
    for c in (1, 2):
        m = gt == c
        if m.any():
            yy, xx = np.nonzero(m)
            boxes.append(Box(c, int(xx.min()), int(yy.min()), int(xx.max()) + 1, int(yy.max()) + 1))

    # image-level seeds: object cores plus scattered background, then label noise
    seeds = np.full(gt.shape, UNKNOWN, np.uint8)
    n_seed = int(round(coverage * gt.size))
    fg = np.flatnonzero(gt.ravel() != 0)
    fg = fg[np.argsort(radial.ravel()[fg])][: int(0.5 * len(fg))]
    bg = rng.permutation(np.flatnonzero(gt.ravel() == 0))[: max(n_seed - len(fg), 0)]
    chosen = np.concatenate([fg, bg])
    seeds.reshape(-1)[chosen] = gt.ravel()[chosen]
    flip = rng.permutation(chosen)[: int(round(noise * len(chosen)))]
    truth = gt.ravel()[flip]
    seeds.reshape(-1)[flip] = (truth + rng.integers(1, N_CLASSES, len(flip))) % N_CLASSES

    score = rng.uniform(0.0, 0.2, gt.shape + (N_CLASSES,))
    lab = seeds.ravel()
    flat_score = score.reshape(-1, N_CLASSES)
    known = np.flatnonzero(lab != UNKNOWN)
    flat_score[known, lab[known]] = rng.uniform(0.4, 1.0, len(known))
    flat_score[flip, lab[flip]] = rng.uniform(0.2, 0.7, len(flip))

    # grab-cut stand-in: the object inside its box with ragged errors
    fragments = []
    for b in boxes:
        region = gt[b.slices()]
        frag = np.where(region == b.cls, b.cls, UNKNOWN).astype(np.uint8)
        drop = rng.random(frag.shape) < 0.15
        frag[drop & (frag == b.cls)] = UNKNOWN
        spill = rng.random(frag.shape) < 0.05
        frag[spill & (region == 0)] = b.cls
        fragments.append(frag)
    return Sample(image, gt, boxes, seeds, score, fragments)


def generate(out_dir, n_images: int = 10, size: int = 32, seed: int = 0,
             coverage: float = 0.3, noise: float = 0.1, grain: float = GRAIN) -> list:
    """Write a synthetic dataset under ``out_dir``; returns the image ids."""
    root = Path(out_dir)
    for sub in ("images", "seeds", "scores", "boxes", "boxmasks", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for n in range(n_images):
        s = make_sample(rng, size, coverage, noise, grain)
        name = f"img{n:03d}"
        io.write_ppm(root / "images" / f"{name}.ppm", s.image)
        io.write_pgm(root / "seeds" / f"{name}.pgm", s.seeds)
        io.write_tnsr(root / "scores" / f"{name}.tnsr", {"score": s.score})
        io.write_boxes(root / "boxes" / f"{name}.json", s.boxes)
        for k, frag in enumerate(s.fragments):
            io.write_pgm(root / "boxmasks" / f"{name}_{k}.pgm", frag)
        io.write_pgm(root / "gt" / f"{name}.pgm", s.gt)
        ids.append(name)
    (root / "meta.json").write_text(json.dumps({"n_classes": N_CLASSES, "ids": ids}) + "\n")
    return ids


@dataclass
class GradProblem:
    graph: PixelGraph
    labels: np.ndarray
    boxes: list
    params: GnnParams


def grad_problem(seed: int, max_side: int = 6, max_classes: int = 4, layers: int = 3,
                 hidden: int = 8, feat_dim: int = 6) -> GradProblem:
    """Small random graph, labels and one box for gradient checks."""
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(3, max_side + 1, 2))
    n_cls = int(rng.integers(2, max_classes + 1))
    graph = build_graph(rng.random((h, w, feat_dim)), rng.random((h, w, 3)), r=2)
    labels = rng.integers(0, n_cls, (h, w)).astype(np.uint8)
    labels[rng.random((h, w)) < 0.4] = UNKNOWN
    box = Box(int(rng.integers(1, n_cls)), 0, 0, int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1)))
    params = init_params(feat_dim, n_cls, hidden=hidden, n_layers=layers, rng=seed)
    params.w[:] = rng.uniform(0.5, 2.0, layers)
    return GradProblem(graph, labels, [box], params)
