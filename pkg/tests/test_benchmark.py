import csv
import json
import math
import os

import numpy as np
import pytest

from analysis.benchmark import (BenchmarkConfig, ablation_fusion, aggregate, episode_seed, fusion_cost,
                                prepare_setups, run_benchmark)
from analysis.reporting import BenchmarkReporter, REPORT_COLUMNS, render_csv, rows_from_dict
from components.database import Database
from servo_trainer.controllers import ControllerSpec
from servo_trainer.graph import build_graph
from servo_trainer.model import DepthPcModel, ModelConfig
from servo_trainer.observation import Keypoint, match_keypoints
from servo_trainer.scene import primitive_models
from servo_trainer.simulation import EpisodeConfig, EpisodeResult


def _models():
    return primitive_models(3, np.random.default_rng(0), points_per_model=400)


def _config(**kwargs):
    base = dict(levels=("S",), runs_per_level=2, seed=0, workers=1,
                episode=EpisodeConfig(max_steps=30, hold_steps=10, record_trajectory=True))
    base.update(kwargs)
    return BenchmarkConfig(**base)


def _result(controller, level, seed, success, te, re, ts, steps):
    return EpisodeResult(controller, level, seed, success, te, re, ts, steps, 0.0,
                         None if success else "timeout", "s", "n")


def test_episode_seeds_are_stable_and_distinct():
    assert episode_seed(0, "S", 0) == episode_seed(0, "S", 0)
    seeds = {episode_seed(0, level, i) for level in ("S", "M", "L") for i in range(20)}
    assert len(seeds) == 60
    assert episode_seed(1, "S", 0) != episode_seed(0, "S", 0)


def test_aggregate_arithmetic():
    results = [
        _result("a", "S", 1, True, 0.01, 1.0, 10, 30),
        _result("a", "S", 2, True, 0.03, 2.0, 20, 40),
        _result("a", "S", 3, False, 0.5, 40.0, 600, 600),
        _result("b", "S", 1, False, 0.4, 30.0, 600, 600),
    ]
    row = aggregate(results, "a", "S", 0.04)
    assert row.runs == 3
    assert row.successes == 2
    assert row.sr == pytest.approx(200.0 / 3)
    assert row.te == pytest.approx(0.02)
    assert row.re == pytest.approx(1.5)
    assert row.ts == pytest.approx(15.0)
    assert row.mtt == pytest.approx(0.04 * (30 + 40 + 600) / 3)
    failed = aggregate(results, "b", "S", 0.04)
    assert failed.sr == 0.0
    assert math.isnan(failed.te) and math.isnan(failed.ts)


def test_prepare_setups_fills_the_level():
    setups, skipped = prepare_setups(_models(), _config(runs_per_level=3), "S")
    assert len(setups) == 3
    assert len({s.seed for s in setups}) == 3
    assert not set(skipped) & {s.seed for s in setups}


def test_benchmark_is_paired_and_deterministic():
    specs = [ControllerSpec("teacher"), ControllerSpec("zero")]
    first = run_benchmark(specs, _models(), _config())
    second = run_benchmark(specs, _models(), _config())
    by_seed = {}
    for e in first.episodes:
        by_seed.setdefault(e.seed, set()).add((e.setup_digest, e.noise_digest))
    assert all(len(v) == 1 for v in by_seed.values())
    assert first.row("zero", "S").sr == 0.0
    assert render_csv(REPORT_COLUMNS, (r.__dict__ for r in first.rows)) == \
        render_csv(REPORT_COLUMNS, (r.__dict__ for r in second.rows))


def test_run_benchmark_rejects_bad_controller_lists():
    with pytest.raises(ValueError):
        run_benchmark([], _models(), _config())
    with pytest.raises(ValueError):
        run_benchmark([ControllerSpec("zero"), ControllerSpec("zero")], _models(), _config())


def test_reporter_files_and_rerun_identical_csv(tmp_path):
    specs = [ControllerSpec("teacher"), ControllerSpec("zero")]
    paths = []
    for name in ("a", "b"):
        report = run_benchmark(specs, _models(), _config())
        out = BenchmarkReporter(str(tmp_path / name), plots=False).write_report(report, seed=0)
        paths.append(out)
    for kind in ("csv", "table", "json", "episodes"):
        assert os.path.isfile(paths[0][kind])
    with open(paths[0]["csv"]) as a, open(paths[1]["csv"]) as b:
        text = a.read()
        assert text == b.read()
    assert text.startswith("# depth-pc benchmark report\n# seed: 0\n")
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    assert [r["controller"] for r in rows] == ["teacher", "zero"]
    with open(paths[0]["json"]) as f:
        data = json.load(f)
    assert [r.controller for r in rows_from_dict(data)] == ["teacher", "zero"]
    assert "resources" in data and "wall_time" in data
    with open(paths[0]["episodes"]) as f:
        first = json.loads(f.readline())
    assert {"controller", "level", "seed", "step", "pose", "twist"} <= set(first)


def test_database_aggregate_matches_report(tmp_path):
    report = run_benchmark([ControllerSpec("teacher"), ControllerSpec("zero")], _models(), _config())
    with Database(str(tmp_path / "episodes.sqlite3")) as db:
        assert db.insert_results(report.episodes, run="r1", dt=0.04) == len(report.episodes)
        assert db.runs() == ["r1"]
        assert db.count("r1") == len(report.episodes)
        stored = db.aggregate("r1")
        assert len(db.fetch_run("r1")) == len(report.episodes)
        assert db.delete_run("r1") == len(report.episodes)
        assert db.count() == 0
    for row, expected in zip(stored, report.rows):
        assert row["controller"] == expected.controller
        assert row["runs"] == expected.runs
        assert row["successes"] == expected.successes
        assert row["sr"] == pytest.approx(expected.sr)
        assert row["mtt"] == pytest.approx(expected.mtt)
        for key in ("te", "re", "ts"):
            value = getattr(expected, key)
            if math.isnan(value):
                assert math.isnan(row[key])
            else:
                assert row[key] == pytest.approx(value)


def test_fusion_cost_on_a_two_cluster_graph():
    current = [Keypoint(i, i // 4, (0.1 * i - 0.4, 0.0), 0.5, 1.0) for i in range(8)]
    target = [Keypoint(i, i // 4, (0.0, 0.1 * i - 0.4), 0.5, 1.0) for i in range(8)]
    cost = fusion_cost(build_graph(match_keypoints(current, target)), width=4)
    assert cost.block_sizes == (5, 5)
    assert cost.measured["cluster"] * 2 == cost.measured["full"]
    assert cost.analytic["cluster"] * 2 == cost.analytic["full"]
    assert cost.measured["full"] == 3 * 10 * 10 * 4
    assert cost.analytic["concat"] == cost.measured["concat"] == 0


@pytest.mark.slow
def test_fusion_ablation_table(tmp_path):
    small = dict(width=4, depth_embedding=2, hidden=4, head_hidden=4, seed=0)
    specs = {mode: ControllerSpec.from_model(DepthPcModel(ModelConfig(fusion=mode, **small)))
             for mode in ("cluster", "full", "concat")}
    table = ablation_fusion(specs, _models(), _config(runs_per_level=1), width=4)
    assert [r["fusion"] for r in table.rows] == ["cluster", "full", "concat"]
    assert "ordering_holds" in table.report.extra
    assert table.rows[2]["mult_adds_measured"] == 0.0
    paths = BenchmarkReporter(str(tmp_path), plots=False).write_ablation(table, 0, "ablation_fusion")
    assert os.path.isfile(paths["csv"])
    assert os.path.isfile(paths["battery_csv"])
