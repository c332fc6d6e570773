import json
import os

import pytest

from servo_trainer.main import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from servo_trainer.model import load_checkpoint

TINY_BENCH = ["--levels", "S", "--runs", "1", "--max-steps", "25", "--workers", "1", "--no-plots",
              "--primitives", "3"]


def _gen_data(tmp_path, seed="0"):
    path = str(tmp_path / "data.servo")
    code = main(["gen-data", "--seed", seed, "--primitives", "3", "--scenes", "3", "--steps", "3",
                 "--levels", "S", "--out", path, "--log-level", "WARNING"])
    assert code == EXIT_OK
    return path


def _train(tmp_path, data, extra=()):
    path = str(tmp_path / "model.ckpt")
    config = tmp_path / "train.yaml"
    config.write_text("train:\n  seq_len: 2\n  model: {depth_embedding: 2, hidden: 4, head_hidden: 4}\n")
    code = main(["train", "--seed", "0", "--config", str(config), "--data", data, "--epochs", "1",
                 "--width", "4", "--out", path, "--log-level", "WARNING", *extra])
    assert code == EXIT_OK
    return path


def test_parser_knows_every_command():
    parser = build_parser()
    for argv in (["gen-data"], ["train", "--data", "x"], ["bench"], ["ablate", "hpr"], ["report"]):
        assert parser.parse_args(argv).command == argv[0]


def test_usage_errors_exit_with_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path / "d.servo")]) == EXIT_USAGE
    assert main(["bench", "--seed", "0", *TINY_BENCH, "--out", str(tmp_path / "b")]) == EXIT_USAGE
    assert main(["report", "--seed", "0", "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_missing_inputs_exit_with_two(tmp_path):
    assert main(["train", "--seed", "0", "--data", str(tmp_path / "none.servo")]) == EXIT_DATA
    assert main(["bench", "--seed", "0", *TINY_BENCH, "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "b")]) == EXIT_DATA
    assert main(["report", "--from", str(tmp_path / "none.json"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["bench", "--seed", "0", *TINY_BENCH[:-2], "--models", str(tmp_path / "nowhere"),
                 "--baseline", "zero", "--out", str(tmp_path / "b")]) == EXIT_DATA


def test_gen_data_is_reproducible(tmp_path, capsys):
    first = _gen_data(tmp_path / "a")
    second = _gen_data(tmp_path / "b")
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["budget_ok"] is True


def test_training_on_an_empty_dataset_exits_with_two(tmp_path):
    path = str(tmp_path / "empty.servo")
    assert main(["gen-data", "--seed", "0", "--primitives", "3", "--scenes", "0", "--out", path,
                 "--log-level", "WARNING"]) == EXIT_OK
    assert main(["train", "--seed", "0", "--data", path, "--epochs", "1", "--out", str(tmp_path / "m.ckpt"),
                 "--log-level", "WARNING"]) == EXIT_DATA
    assert not os.path.exists(str(tmp_path / "m.ckpt"))


@pytest.mark.slow
def test_resume_rejects_a_different_architecture(tmp_path, caplog):
    data = _gen_data(tmp_path)
    checkpoint = _train(tmp_path, data)
    out = str(tmp_path / "resumed.ckpt")
    base = ["train", "--seed", "0", "--data", data, "--epochs", "1", "--resume", checkpoint, "--out", out]
    assert main(base + ["--width", "8"]) == EXIT_USAGE
    assert main(base + ["--fusion", "full"]) == EXIT_USAGE
    assert not os.path.exists(out)
    # flags equal to the checkpoint are accepted
    assert main(base + ["--width", "4", "--fusion", "cluster", "--log-level", "WARNING"]) == EXIT_OK
    config = tmp_path / "wide.yaml"
    config.write_text("train:\n  model: {hidden: 16}\n")
    with caplog.at_level("WARNING"):
        assert main(base + ["--config", str(config), "--log-level", "WARNING"]) == EXIT_OK
    assert "model.hidden" in caplog.text
    assert load_checkpoint(out).model.config.hidden == 4


@pytest.mark.slow
def test_train_bench_and_report(tmp_path, capsys):
    data = _gen_data(tmp_path)
    checkpoint = _train(tmp_path, data)
    assert os.path.isfile(str(tmp_path / "model.curve.csv"))
    meta = load_checkpoint(checkpoint).meta
    assert meta["epochs_done"] == 1
    assert len(meta["curve"]) == 1

    resumed = str(tmp_path / "resumed.ckpt")
    assert main(["train", "--seed", "0", "--data", data, "--epochs", "1", "--resume", checkpoint,
                 "--out", resumed, "--log-level", "WARNING"]) == EXIT_OK
    assert load_checkpoint(resumed).meta["epochs_done"] == 2

    out = str(tmp_path / "bench")
    assert main(["bench", "--seed", "0", *TINY_BENCH, "--checkpoint", f"net={checkpoint}",
                 "--baseline", "zero", "--baseline", "ibvs", "--out", out, "--log-level", "WARNING"]) == EXIT_OK
    for name in ("report.csv", "report.json", "report.txt", "episodes.jsonl", "episodes.sqlite3"):
        assert os.path.isfile(os.path.join(out, name))
    table = capsys.readouterr().out
    assert "net" in table and "ibvs" in table

    rerendered = str(tmp_path / "again")
    assert main(["report", "--from", os.path.join(out, "report.json"), "--out", rerendered, "--no-plots",
                 "--log-level", "WARNING"]) == EXIT_OK
    with open(os.path.join(out, "report.csv")) as a, open(os.path.join(rerendered, "report.csv")) as b:
        original = [line for line in a if not line.startswith("#")]
        again = [line for line in b if not line.startswith("#")]
    assert original == again

    from_db = str(tmp_path / "from_db")
    assert main(["report", "--db", os.path.join(out, "episodes.sqlite3"), "--out", from_db, "--no-plots",
                 "--log-level", "WARNING"]) == EXIT_OK
    with open(os.path.join(from_db, "report.csv")) as f:
        assert [line for line in f if not line.startswith("#")] == original


@pytest.mark.slow
def test_depth_ablation_through_cli(tmp_path):
    data = _gen_data(tmp_path)
    checkpoint = _train(tmp_path, data)
    out = str(tmp_path / "ablate")
    assert main(["ablate", "depth", "--seed", "0", *TINY_BENCH, "--checkpoint", f"net={checkpoint}",
                 "--out", out, "--log-level", "WARNING"]) == EXIT_OK
    assert os.path.isfile(os.path.join(out, "ablation_depth.csv"))
    assert main(["ablate", "hpr", "--seed", "0", *TINY_BENCH, "--checkpoint", f"with={checkpoint}",
                 "--out", out]) == EXIT_USAGE
    assert main(["ablate", "hpr", "--seed", "0", *TINY_BENCH, "--checkpoint", f"with={checkpoint}",
                 "--checkpoint", f"without={checkpoint}", "--out", out]) == EXIT_OK
    assert os.path.isfile(os.path.join(out, "ablation_hpr.csv"))
    assert main(["ablate", "fusion", "--seed", "0", *TINY_BENCH, "--checkpoint", f"sum={checkpoint}",
                 "--out", out]) == EXIT_USAGE
