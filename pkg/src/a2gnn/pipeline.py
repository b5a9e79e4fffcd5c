"""Disk-backed pipeline stages.

A dataset directory holds ``images/``, ``seeds/``, ``scores/``, ``boxes/``
and optionally ``boxmasks/`` and ``gt/`` (see :mod:`a2gnn.fixtures`). A run
directory collects one sub-directory per stage::

    seeds/     <id>_mb.pgm, <id>_mf.pgm, <id>_mg.pgm
    affinity/  <id>.tnsr        embedder weights, node features, loss trace
    graphs/    <id>.tnsr, <id>.edges.txt, <id>_labels.pgm
    gnn/       params.tnsr, train.jsonl
    probs/     <id>.tnsr        node probabilities "O"
    refined/   <id>.tnsr        image-resolution probabilities "prob"
    masks/     <id>.pgm         pseudo-labels
    instances/ <id>_<k>.pgm, <id>.json
    metrics.json

Every stage writes a ``.key`` file hashing its inputs and the config fields
it depends on; a stage whose key is unchanged is skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from a2gnn import io
from a2gnn.affinity import PixelGraph, build_graph, pixel_descriptors, train_embedder
from a2gnn.config import PipelineConfig
from a2gnn.gnn import GnnParams
from a2gnn.labels import (
    affinity_pairs,
    assemble_box_seeds,
    downsample,
    fuse_seeds,
    select_confident,
)
from a2gnn.refine import crf_refine, miou, to_instances, to_labels, upsample
from a2gnn.trainer import infer, train

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, item: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed on {item!r}: {cause}")
        self.stage, self.item = stage, item


SEED_KEYS = ("ratio",)
AFFINITY_KEYS = ("stride", "radius", "aff_lambda", "sigma_xy", "sigma_rgb", "embed_dim",
                 "embed_hidden", "aff_steps", "aff_lr", "seed")
GRAPH_KEYS = ("stride", "radius", "sigma_edge", "global_edges")
GNN_KEYS = ("n_classes", "epochs", "stage_split", "learning_rate", "weight_decay", "dropout",
            "lambda1", "beta", "adam_b1", "adam_b2", "adam_eps", "hidden", "layers", "use_mp",
            "use_reg", "use_cc", "tau_cc", "strict_eq28", "train_beta", "seed")
REFINE_KEYS = ("crf", "crf_iterations", "crf_w_appearance", "crf_theta_alpha", "crf_theta_beta",
               "crf_w_smooth", "crf_theta_gamma")


# ---------------------------------------------------------------- inputs


def dataset_ids(data_dir) -> list:
    return sorted(p.stem for p in (Path(data_dir) / "images").glob("*.ppm"))


@dataclass
class RawSample:
    name: str
    image: np.ndarray
    m_i: np.ndarray
    score: np.ndarray
    boxes: list
    fragments: list
    gt: np.ndarray | None


def load_sample(data_dir, name: str) -> RawSample:
    root = Path(data_dir)
    image = io.read_ppm(root / "images" / f"{name}.ppm")
    m_i = io.read_pgm(root / "seeds" / f"{name}.pgm")
    score = io.read_tnsr(root / "scores" / f"{name}.tnsr")["score"].astype(np.float64)
    box_file = root / "boxes" / f"{name}.json"
    boxes = io.read_boxes(box_file) if box_file.exists() else []
    fragments = []
    for k, b in enumerate(boxes):
        frag_file = root / "boxmasks" / f"{name}_{k}.pgm"
        if frag_file.exists():
            fragments.append(io.read_pgm(frag_file))
        else:
            fragments.append(np.full((b.height, b.width), b.cls, np.uint8))
    gt_file = root / "gt" / f"{name}.pgm"
    gt = io.read_pgm(gt_file) if gt_file.exists() else None
    if m_i.shape != image.shape[:2] or score.shape[:2] != image.shape[:2]:
        raise ValueError(f"{name}: image, seeds and scores disagree in size")
    return RawSample(name, image, m_i, score, boxes, fragments, gt)


def _digest(paths, extra) -> str:
    # names are hashed as <dir>/<file> so keys do not depend on where a run lives
    h = hashlib.sha256(json.dumps(extra, sort_keys=True).encode())
    for tag, p in sorted((f"{Path(p).parent.name}/{Path(p).name}", p) for p in paths):
        h.update(tag.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _fresh(stage_dir: Path, key: str, force: bool) -> bool:
    key_file = stage_dir / ".key"
    return not force and key_file.exists() and key_file.read_text() == key


def _seal(stage_dir: Path, key: str) -> None:
    (stage_dir / ".key").write_text(key)


def _files(directory) -> list:
    d = Path(directory)
    return sorted(p for p in d.rglob("*") if p.is_file() and p.name != ".key") if d.exists() else []


# ---------------------------------------------------------------- per-image work


def seed_maps(sample: RawSample, ratio: float):
    dims = sample.image.shape[:2]
    m_b = assemble_box_seeds(sample.fragments, sample.boxes, dims)
    m_f = fuse_seeds(sample.m_i, sample.score, m_b, sample.boxes)
    m_g = select_confident(m_f, m_b, sample.m_i, sample.score, ratio, boxes=sample.boxes)
    return m_b, m_f, m_g


def pool_image(image: np.ndarray, stride: int) -> np.ndarray:
    """Mean colour of each stride x stride cell, on a [0, 1] scale."""
    img = np.asarray(image, np.float64) / 255.0
    h, w = img.shape[:2]
    ry, rx = np.arange(0, h, stride), np.arange(0, w, stride)
    sums = np.add.reduceat(np.add.reduceat(img, ry, axis=0), rx, axis=1)
    cy = np.diff(np.append(ry, h))
    cx = np.diff(np.append(rx, w))
    return sums / (cy[:, None] * cx[None, :])[..., None]


def affinity_features(image, m_g, cfg: PipelineConfig, seed: int):
    colors = pool_image(image, cfg.stride)
    desc = pixel_descriptors(colors)
    labels = downsample(m_g, cfg.stride)
    pairs = affinity_pairs(labels, cfg.radius)
    res = train_embedder(desc, pairs, cfg.aff_lambda, cfg.radius, cfg.aff_steps, cfg.aff_lr,
                         cfg.embed_hidden, cfg.embed_dim, seed, cfg.sigma_xy, cfg.sigma_rgb)
    return res, res.embedder(desc), colors, labels


def _affinity_job(args):
    data_dir, out_dir, name, cfg_dict, seed = args
    cfg = PipelineConfig.from_dict(cfg_dict)
    image = io.read_ppm(Path(data_dir) / "images" / f"{name}.ppm")
    m_g = io.read_pgm(Path(out_dir) / "seeds" / f"{name}_mg.pgm")
    res, feats, colors, _ = affinity_features(image, m_g, cfg, seed)
    sections = dict(res.embedder.arrays())
    sections.update(features=feats, node_features=res.embedder.node_features(pixel_descriptors(colors)),
                    colors=colors, loss_trace=np.array(res.trace))
    io.write_tnsr(Path(out_dir) / "affinity" / f"{name}.tnsr", sections)
    return name


def refine_probs(O, graph: PixelGraph, image, cfg: PipelineConfig):
    dense = upsample(O, graph.grid, image.shape[:2], stride=graph.stride)
    if cfg.crf:
        dense = crf_refine(dense, image, cfg.crf_config())
    return dense


# ---------------------------------------------------------------- stages


def stage_seeds(data_dir, out_dir, cfg: PipelineConfig, force=False) -> dict:
    """Seed fusion for every image; failures are logged and the rest continue."""
    stage = Path(out_dir) / "seeds"
    stage.mkdir(parents=True, exist_ok=True)
    ids = dataset_ids(data_dir)
    inputs = [p for sub in ("images", "seeds", "scores", "boxes", "boxmasks")
              for p in _files(Path(data_dir) / sub)]
    key = _digest(inputs, cfg.subset(*SEED_KEYS))
    errors = {}
    if _fresh(stage, key, force):
        return errors
    for name in ids:
        try:
            m_b, m_f, m_g = seed_maps(load_sample(data_dir, name), cfg.ratio)
        except (ValueError, OSError, KeyError) as exc:
            log.error("seeds: %s: %s", name, exc)
            errors[name] = str(exc)
            continue
        io.write_pgm(stage / f"{name}_mb.pgm", m_b)
        io.write_pgm(stage / f"{name}_mf.pgm", m_f)
        io.write_pgm(stage / f"{name}_mg.pgm", m_g)
    _seal(stage, key)
    return errors


def _seeded_ids(out_dir) -> list:
    return sorted(p.name[: -len("_mg.pgm")] for p in (Path(out_dir) / "seeds").glob("*_mg.pgm"))


def stage_affinity(data_dir, out_dir, cfg: PipelineConfig, force=False, jobs=1) -> None:
    stage = Path(out_dir) / "affinity"
    stage.mkdir(parents=True, exist_ok=True)
    ids = _seeded_ids(out_dir)
    inputs = _files(Path(out_dir) / "seeds") + [Path(data_dir) / "images" / f"{n}.ppm" for n in ids]
    key = _digest(inputs, cfg.subset(*AFFINITY_KEYS))
    if _fresh(stage, key, force):
        return
    tasks = [(str(data_dir), str(out_dir), n, cfg.to_dict(), cfg.seed * 100_003 + k)
             for k, n in enumerate(ids)]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_affinity_job, tasks))
        else:
            for t in tasks:
                _affinity_job(t)
    except Exception as exc:
        raise StageError("train-affinity", getattr(exc, "item", "?"), exc) from exc
    _seal(stage, key)


def stage_graphs(data_dir, out_dir, cfg: PipelineConfig, force=False) -> None:
    stage = Path(out_dir) / "graphs"
    stage.mkdir(parents=True, exist_ok=True)
    ids = _seeded_ids(out_dir)
    key = _digest(_files(Path(out_dir) / "affinity"), cfg.subset(*GRAPH_KEYS))
    if _fresh(stage, key, force):
        return
    for name in ids:
        try:
            s = io.read_tnsr(Path(out_dir) / "affinity" / f"{name}.tnsr")
            image = io.read_ppm(Path(data_dir) / "images" / f"{name}.ppm")
            g = build_graph(s["features"], s["colors"], cfg.radius, cfg.sigma_edge,
                            cfg.global_edges, cfg.stride, image.shape[:2], s["node_features"])
            m_g = io.read_pgm(Path(out_dir) / "seeds" / f"{name}_mg.pgm")
        except Exception as exc:
            raise StageError("build-graph", name, exc) from exc
        io.write_tnsr(stage / f"{name}.tnsr", g.to_sections())
        io.write_edge_list(stage / f"{name}.edges.txt", g)
        io.write_pgm(stage / f"{name}_labels.pgm", downsample(m_g, cfg.stride))
    _seal(stage, key)


def load_graph(path) -> PixelGraph:
    return PixelGraph.from_sections(io.read_tnsr(path))


def load_corpus(graph_dir, label_dir, box_dir, ids=None):
    graph_dir, label_dir, box_dir = Path(graph_dir), Path(label_dir), Path(box_dir)
    if ids is None:
        ids = sorted(p.stem for p in graph_dir.glob("*.tnsr"))
    corpus = []
    for name in ids:
        g = load_graph(graph_dir / f"{name}.tnsr")
        lab_file = label_dir / f"{name}_labels.pgm"
        if not lab_file.exists():
            lab_file = label_dir / f"{name}.pgm"
        labels = io.read_pgm(lab_file)
        if labels.shape != tuple(g.grid):
            raise ValueError(f"{name}: labels {labels.shape} do not match node grid {g.grid}")
        bf = box_dir / f"{name}.json"
        boxes = io.read_boxes(bf) if bf.exists() else []
        corpus.append((g, labels, boxes))
    return ids, corpus


def write_log(path, history) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def stage_train(data_dir, out_dir, cfg: PipelineConfig, force=False) -> None:
    stage = Path(out_dir) / "gnn"
    stage.mkdir(parents=True, exist_ok=True)
    inputs = _files(Path(out_dir) / "graphs") + _files(Path(data_dir) / "boxes")
    key = _digest(inputs, cfg.subset(*GNN_KEYS))
    if _fresh(stage, key, force):
        return
    ids, corpus = load_corpus(Path(out_dir) / "graphs", Path(out_dir) / "graphs",
                              Path(data_dir) / "boxes", _seeded_ids(out_dir))
    try:
        params, history = train(corpus, cfg.train_config())
    except FloatingPointError as exc:
        raise StageError("train-gnn", "corpus", exc) from exc
    io.write_tnsr(stage / "params.tnsr", params.to_sections())
    write_log(stage / "train.jsonl", history)
    _seal(stage, key)


def stage_infer(out_dir, force=False) -> None:
    stage = Path(out_dir) / "probs"
    stage.mkdir(parents=True, exist_ok=True)
    key = _digest(_files(Path(out_dir) / "graphs") + _files(Path(out_dir) / "gnn"), {})
    if _fresh(stage, key, force):
        return
    params = GnnParams.from_sections(io.read_tnsr(Path(out_dir) / "gnn" / "params.tnsr"))
    ids = _seeded_ids(out_dir)
    graphs = [load_graph(Path(out_dir) / "graphs" / f"{n}.tnsr") for n in ids]
    for name, g, O in zip(ids, graphs, infer(graphs, params)):
        io.write_tnsr(stage / f"{name}.tnsr", {"O": O, "grid": np.array(g.grid, np.float64)})
    _seal(stage, key)


def stage_refine(data_dir, out_dir, cfg: PipelineConfig, force=False) -> None:
    out = Path(out_dir)
    (out / "refined").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    key = _digest(_files(out / "probs") + _files(out / "graphs"), cfg.subset(*REFINE_KEYS))
    if _fresh(out / "masks", key, force):
        return
    for name in _seeded_ids(out_dir):
        try:
            O = io.read_tnsr(out / "probs" / f"{name}.tnsr")["O"]
            g = load_graph(out / "graphs" / f"{name}.tnsr")
            image = io.read_ppm(Path(data_dir) / "images" / f"{name}.ppm")
            dense = refine_probs(O, g, image, cfg)
        except Exception as exc:
            raise StageError("refine", name, exc) from exc
        io.write_tnsr(out / "refined" / f"{name}.tnsr", {"prob": dense})
        io.write_pgm(out / "masks" / f"{name}.pgm", to_labels(dense))
    _seal(out / "masks", key)


def stage_instances(data_dir, out_dir) -> None:
    out = Path(out_dir)
    inst = out / "instances"
    inst.mkdir(parents=True, exist_ok=True)
    for name in _seeded_ids(out_dir):
        labels = io.read_pgm(out / "masks" / f"{name}.pgm")
        dense = io.read_tnsr(out / "refined" / f"{name}.tnsr")["prob"]
        bf = Path(data_dir) / "boxes" / f"{name}.json"
        boxes = io.read_boxes(bf) if bf.exists() else []
        index = []
        for m in to_instances(labels, dense, boxes):
            fname = f"{name}_{m.box}.pgm"
            io.write_pgm(inst / fname, m.mask.astype(np.uint8) * 255)
            index.append({"box": m.box, "class": m.cls, "confidence": m.confidence, "file": fname})
        (inst / f"{name}.json").write_text(json.dumps(index) + "\n")


def evaluate(pred_dir, gt_dir, n_classes: int, ids=None) -> dict:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if ids is None:
        ids = sorted(p.stem for p in pred_dir.glob("*.pgm"))
    preds, gts = [], []
    for name in ids:
        if (gt_dir / f"{name}.pgm").exists():
            preds.append(io.read_pgm(pred_dir / f"{name}.pgm").ravel())
            gts.append(io.read_pgm(gt_dir / f"{name}.pgm").ravel())
    if not preds:
        raise ValueError("no ground truth found for any prediction")
    return miou(np.concatenate(preds), np.concatenate(gts), n_classes)


def infer_n_classes(data_dir) -> int:
    meta = Path(data_dir) / "meta.json"
    if meta.exists():
        return int(json.loads(meta.read_text())["n_classes"])
    ids = dataset_ids(data_dir)
    if not ids:
        raise ValueError(f"no images found under {Path(data_dir) / 'images'}")
    first = ids[0]
    return io.read_tnsr(Path(data_dir) / "scores" / f"{first}.tnsr")["score"].shape[2]


def run_pipeline(data_dir, out_dir, cfg: PipelineConfig, force=False, jobs=1) -> dict | None:
    """Seeds through evaluation; returns the metrics when ground truth exists."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.n_classes is None:
        cfg = cfg.replace(n_classes=infer_n_classes(data_dir))
    cfg.save(out / "config.json")
    errors = stage_seeds(data_dir, out, cfg, force)
    if errors:
        log.warning("seeds skipped for %d image(s): %s", len(errors), sorted(errors))
    stage_affinity(data_dir, out, cfg, force, jobs)
    stage_graphs(data_dir, out, cfg, force)
    stage_train(data_dir, out, cfg, force)
    stage_infer(out, force)
    stage_refine(data_dir, out, cfg, force)
    stage_instances(data_dir, out)
    if (Path(data_dir) / "gt").exists():
        metrics = evaluate(out / "masks", Path(data_dir) / "gt", cfg.n_classes)
        (out / "metrics.json").write_text(json.dumps(metrics) + "\n")
        return metrics
    return None
