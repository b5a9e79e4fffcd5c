"""Command-line entry point: ``a2gnn <command> ...``.

Most commands work on a dataset directory and a run directory laid out as
described in :mod:`a2gnn.pipeline`. Logging verbosity comes from the
``A2GNN_LOG`` environment variable (error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from a2gnn import fixtures, io, pipeline
from a2gnn.config import PipelineConfig
from a2gnn.gnn import GnnParams, init_params
from a2gnn.trainer import grad_check, infer, train

log = logging.getLogger("a2gnn")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("A2GNN_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise SystemExit(f"A2GNN_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strict_eq28:
        changes["strict_eq28"] = True
    if args.global_edges:
        changes["global_edges"] = True
    if getattr(args, "stage1_only", False):
        changes["stage_split"] = cfg.epochs
    return cfg.replace(**changes)


def _with_classes(cfg: PipelineConfig, data_dir) -> PipelineConfig:
    if cfg.n_classes is None:
        return cfg.replace(n_classes=pipeline.infer_n_classes(data_dir))
    return cfg


# ---------------------------------------------------------------- commands


def cmd_seeds(args, cfg):
    errors = pipeline.stage_seeds(args.data, args.run, cfg, args.force)
    for name, msg in sorted(errors.items()):
        print(f"{name}: {msg}", file=sys.stderr)
    return 1 if errors else 0


def cmd_train_affinity(args, cfg):
    pipeline.stage_affinity(args.data, args.run, cfg, args.force, args.jobs)


def cmd_build_graph(args, cfg):
    pipeline.stage_graphs(args.data, args.run, cfg, args.force)


def cmd_train_gnn(args, cfg):
    _, corpus = pipeline.load_corpus(args.graphs, args.labels, args.boxes)
    if not corpus:
        raise SystemExit(f"no graphs found in {args.graphs}")
    params, history = train(corpus, cfg.train_config())
    io.write_tnsr(args.out, params.to_sections())
    if args.log:
        pipeline.write_log(args.log, history)


def cmd_infer(args, cfg):
    params = GnnParams.from_sections(io.read_tnsr(args.params))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(args.graphs).glob("*.tnsr"))
    graphs = [pipeline.load_graph(p) for p in paths]
    for p, g, O in zip(paths, graphs, infer(graphs, params)):
        io.write_tnsr(out / p.name, {"O": O, "grid": np.array(g.grid, np.float64)})


def cmd_refine(args, cfg):
    pipeline.stage_refine(args.data, args.run, cfg, args.force)


def cmd_instances(args, cfg):
    pipeline.stage_instances(args.data, args.run)


def cmd_eval(args, cfg):
    n = args.n_classes or cfg.n_classes
    if n is None:
        raise SystemExit("eval needs --n-classes (or n_classes in the config)")
    print(json.dumps(pipeline.evaluate(args.pred, args.gt, n), indent=2))


def cmd_pipeline(args, cfg):
    metrics = pipeline.run_pipeline(args.data, args.run, cfg, args.force, args.jobs)
    if metrics is not None:
        print(json.dumps(metrics, indent=2))


def cmd_grad_check(args, cfg):
    if args.graph:
        graph = pipeline.load_graph(args.graph)
        labels = io.read_pgm(args.labels)
        boxes = io.read_boxes(args.boxes) if args.boxes else []
        n_cls = cfg.n_classes or int(max([labels[labels != 255].max(initial=0)] + [b.cls for b in boxes])) + 1
        params = init_params(graph.X.shape[1], n_cls, hidden=args.hidden, n_layers=cfg.layers,
                             rng=cfg.seed)
        problems = [fixtures.GradProblem(graph, labels, [b.scaled(graph.stride, graph.grid) for b in boxes],
                                         params)]
    else:
        problems = [fixtures.grad_problem(cfg.seed + k, layers=cfg.layers, hidden=args.hidden)
                    for k in range(args.fixtures)]
    worst = 0.0
    for k, p in enumerate(problems):
        err = grad_check(p.graph, p.labels, p.boxes, p.params, step=args.step,
                         lambda1=cfg.lambda1)
        worst = max(worst, err)
        print(f"problem {k}: max relative error {err:.3e}")
    print(f"worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst <= args.tol else 1


def cmd_gen_fixtures(args, cfg):
    ids = fixtures.generate(args.out, args.n_images, args.size, cfg.seed)
    print(f"wrote {len(ids)} images to {args.out}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-image stages")
    common.add_argument("--force", action="store_true", help="recompute cached stages")
    common.add_argument("--strict-eq28", action="store_true",
                        help="keep a box seed only when its cosine distance to the prototype is positive")
    common.add_argument("--global-edges", action="store_true",
                        help="connect all node pairs instead of those within the radius")

    parser = argparse.ArgumentParser(prog="a2gnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, layout=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if layout:
            p.add_argument("data", help="dataset directory")
            p.add_argument("run", help="run directory")
        p.set_defaults(func=func)
        return p

    add("seeds", cmd_seeds, "fuse image and box seeds into confident seed maps")
    add("train-affinity", cmd_train_affinity, "train the per-image affinity embedders")
    add("build-graph", cmd_build_graph, "convert embedded images into graphs")
    p = add("train-gnn", cmd_train_gnn, "train the graph network on a graph directory", layout=False)
    p.add_argument("--graphs", required=True)
    p.add_argument("--labels", required=True, help="directory of <id>_labels.pgm node-grid seeds")
    p.add_argument("--boxes", required=True, help="directory of <id>.json boxes")
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--log", help="line-delimited JSON training log")
    p = add("infer", cmd_infer, "node probabilities for every graph", layout=False)
    p.add_argument("--graphs", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    add("refine", cmd_refine, "upsample and CRF-refine probabilities into masks")
    add("instances", cmd_instances, "split masks into per-box instance masks")
    p = add("eval", cmd_eval, "mIoU of predicted masks against ground truth", layout=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-classes", type=int)
    p = add("pipeline", cmd_pipeline, "run every stage and evaluate when ground truth exists")
    p.add_argument("--stage1-only", action="store_true", help="train without the second stage")
    p = add("grad-check", cmd_grad_check, "compare analytic and numerical gradients", layout=False)
    p.add_argument("--fixtures", type=int, default=20, help="number of random problems")
    p.add_argument("--graph", help="check on this graph instead of random problems")
    p.add_argument("--labels", help="node-grid labels for --graph")
    p.add_argument("--boxes", help="boxes for --graph")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p = add("gen-fixtures", cmd_gen_fixtures, "write the synthetic dataset", layout=False)
    p.add_argument("out")
    p.add_argument("--n-images", type=int, default=10)
    p.add_argument("--size", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = _config(args)
        if getattr(args, "data", None) is not None:
            cfg = _with_classes(cfg, args.data)
        return args.func(args, cfg) or 0
    except pipeline.StageError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
