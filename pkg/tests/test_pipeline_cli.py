import json
import subprocess
import sys

import numpy as np
import pytest

from a2gnn import fixtures, io, pipeline
from a2gnn.cli import main
from a2gnn.config import PipelineConfig
from a2gnn.labels import UNKNOWN

FAST = dict(aff_steps=8, embed_dim=8, embed_hidden=8, epochs=4, stage_split=2, hidden=8,
            crf_iterations=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    fixtures.generate(root, n_images=3, size=16, seed=4)
    return root


def fast_cfg(**kw):
    return PipelineConfig(**{**FAST, **kw})


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"radious": 5})

    def test_round_trip(self, tmp_path):
        cfg = fast_cfg(seed=9)
        cfg.save(tmp_path / "c.json")
        assert PipelineConfig.load(tmp_path / "c.json") == cfg

    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.radius, cfg.sigma_edge, cfg.lambda1, cfg.sigma_xy, cfg.sigma_rgb, cfg.ratio) == \
            (5.0, 1e-3, 0.01, 6.0, 0.1, 0.4)


class TestSeeds:
    def test_confident_is_subset(self, data, tmp_path):
        assert pipeline.stage_seeds(data, tmp_path, fast_cfg()) == {}
        for name in pipeline.dataset_ids(data):
            m_f = io.read_pgm(tmp_path / "seeds" / f"{name}_mf.pgm")
            m_g = io.read_pgm(tmp_path / "seeds" / f"{name}_mg.pgm")
            assert (m_g != UNKNOWN).sum() < (m_f != UNKNOWN).sum()
            kept = m_g != UNKNOWN
            assert (m_g[kept] == m_f[kept]).all()

    def test_no_boxes(self, data, tmp_path):
        s = pipeline.load_sample(data, "img000")
        s.boxes, s.fragments = [], []
        _, m_f, _ = pipeline.seed_maps(s, 0.4)
        assert (m_f == 0).all()

    def test_bad_image_reported_and_skipped(self, data, tmp_path):
        import shutil

        broken = tmp_path / "data"
        shutil.copytree(data, broken)
        io.write_pgm(broken / "seeds" / "img001.pgm", np.zeros((3, 3), np.uint8))
        errors = pipeline.stage_seeds(broken, tmp_path / "run", fast_cfg())
        assert list(errors) == ["img001"]
        assert sorted(p.name for p in (tmp_path / "run" / "seeds").glob("*_mg.pgm")) == \
            ["img000_mg.pgm", "img002_mg.pgm"]


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, pipeline.run_pipeline(data, out, fast_cfg())


class TestPipeline:
    def test_outputs(self, run, data):
        out, metrics = run
        assert 0.0 <= metrics["miou"] <= 1.0
        for name in pipeline.dataset_ids(data):
            mask = io.read_pgm(out / "masks" / f"{name}.pgm")
            assert mask.shape == (16, 16) and mask.max() < 3
            index = json.loads((out / "instances" / f"{name}.json").read_text())
            assert len(index) == len(io.read_boxes(data / "boxes" / f"{name}.json"))

    def test_config_echo(self, run):
        out, _ = run
        echoed = PipelineConfig.load(out / "config.json")
        assert echoed == fast_cfg(n_classes=3)

    def test_training_log(self, run):
        log = [json.loads(line) for line in (run[0] / "gnn" / "train.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [1, 2, 3, 4]

    def test_repeat_is_byte_identical(self, run, data, tmp_path):
        pipeline.run_pipeline(data, tmp_path, fast_cfg())
        for p in sorted((run[0] / "masks").glob("*.pgm")):
            assert p.read_bytes() == (tmp_path / "masks" / p.name).read_bytes()
        assert (run[0] / "gnn" / "params.tnsr").read_bytes() == (tmp_path / "gnn" / "params.tnsr").read_bytes()
        # cache keys do not depend on where the run directory lives
        keys = sorted(run[0].rglob(".key"))
        assert keys
        for p in keys:
            assert p.read_bytes() == (tmp_path / p.relative_to(run[0])).read_bytes()

    def test_cache_reused(self, data, tmp_path):
        pipeline.run_pipeline(data, tmp_path, fast_cfg())
        params = tmp_path / "gnn" / "params.tnsr"
        stamp = params.stat().st_mtime_ns
        pipeline.run_pipeline(data, tmp_path, fast_cfg())
        assert params.stat().st_mtime_ns == stamp
        # a GNN-only change retrains without touching the affinity stage
        aff = tmp_path / "affinity" / "img000.tnsr"
        aff_stamp = aff.stat().st_mtime_ns
        pipeline.run_pipeline(data, tmp_path, fast_cfg(lambda1=0.02))
        assert params.stat().st_mtime_ns != stamp and aff.stat().st_mtime_ns == aff_stamp
        pipeline.run_pipeline(data, tmp_path, fast_cfg(lambda1=0.02), force=True)
        assert aff.stat().st_mtime_ns != aff_stamp

    def test_stage_failure_names_stage_and_item(self, data, tmp_path):
        pipeline.run_pipeline(data, tmp_path, fast_cfg())
        (tmp_path / "affinity" / "img002.tnsr").write_bytes(b"junk")
        with pytest.raises(pipeline.StageError) as err:
            pipeline.stage_graphs(data, tmp_path, fast_cfg(), force=True)
        assert err.value.stage == "build-graph" and err.value.item == "img002"


class TestCli:
    def test_stage1_only_has_no_reg(self, data, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        fast_cfg().save(cfg)
        assert main(["pipeline", str(data), str(tmp_path / "run"), "--config", str(cfg), "--stage1-only"]) == 0
        log = [json.loads(line) for line in (tmp_path / "run" / "gnn" / "train.jsonl").read_text().splitlines()]
        assert log and all(r["reg"] == 0 and r["stage"] == 1 for r in log)
        assert "miou" in json.loads(capsys.readouterr().out)

    def test_stepwise_commands(self, data, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        fast_cfg().save(cfg)
        run = tmp_path / "run"
        common = ["--config", str(cfg)]
        for cmd in ("seeds", "train-affinity", "build-graph"):
            assert main([cmd, str(data), str(run), *common]) == 0
        g = run / "graphs"
        assert main(["train-gnn", "--graphs", str(g), "--labels", str(g), "--boxes", str(data / "boxes"),
                     "--out", str(tmp_path / "p.tnsr"), "--log", str(tmp_path / "log.jsonl"), *common]) == 0
        assert main(["infer", "--graphs", str(g), "--params", str(tmp_path / "p.tnsr"),
                     "--out", str(tmp_path / "probs"), *common]) == 0
        assert sorted(p.name for p in (tmp_path / "probs").glob("*.tnsr")) == \
            ["img000.tnsr", "img001.tnsr", "img002.tnsr"]
        capsys.readouterr()
        assert main(["eval", "--pred", str(data / "gt"), "--gt", str(data / "gt"), "--n-classes", "3"]) == 0
        assert json.loads(capsys.readouterr().out)["miou"] == 1.0

    def test_grad_check_command(self, capsys):
        assert main(["grad-check", "--fixtures", "2"]) == 0
        assert "worst" in capsys.readouterr().out

    def test_gen_fixtures(self, tmp_path):
        assert main(["gen-fixtures", str(tmp_path / "fx"), "--n-images", "2", "--size", "8"]) == 0
        assert sorted(p.name for p in (tmp_path / "fx" / "images").iterdir()) == ["img000.ppm", "img001.ppm"]

    def test_missing_dataset_exit_code(self, tmp_path, capsys):
        assert main(["refine", str(tmp_path / "nope"), str(tmp_path / "run")]) == 2
        assert "error" in capsys.readouterr().err

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "a2gnn", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for cmd in ("seeds", "train-affinity", "build-graph", "train-gnn", "infer", "refine",
                    "instances", "eval", "pipeline", "grad-check", "gen-fixtures"):
            assert cmd in out.stdout
