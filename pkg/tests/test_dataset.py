import numpy as np
import pytest

from components.containers import ContainerError, decode_container, encode_container, read_container, \
    write_container
from servo_trainer.dataset import read_dataset, summarize, write_dataset
from servo_trainer.errors import DatasetError
from servo_trainer.scene import primitive_models
from servo_trainer.training import DataConfig, generate_episodes


def _generate(seed=0):
    rng = np.random.default_rng(seed)
    models = primitive_models(2, rng, points_per_model=300)
    config = DataConfig(scenes=3, steps_per_episode=3, warmup_range=(0, 3), levels=("S", "M"))
    return generate_episodes(models, config, rng)


def test_container_bytes_are_deterministic():
    blocks = {"b": np.arange(6).reshape(2, 3), "a": np.linspace(0.0, 1.0, 5)}
    first = encode_container(blocks, {"seed": 1, "name": "x"})
    second = encode_container(dict(reversed(list(blocks.items()))), {"name": "x", "seed": 1})
    assert first == second
    decoded, meta = decode_container(first)
    assert meta == {"name": "x", "seed": 1}
    assert decoded["b"].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert decoded["a"] == pytest.approx(np.linspace(0.0, 1.0, 5), abs=1e-7)


def test_container_rejects_bad_input(tmp_path):
    with pytest.raises(ContainerError):
        decode_container(b"NOTAPACK\n{}\n")
    with pytest.raises(ContainerError):
        encode_container({"big": np.array([2 ** 40])}, {})
    with pytest.raises(ContainerError):
        encode_container({"s": np.array(["a"])}, {})
    path = tmp_path / "cut.pack"
    write_container(path, {"x": np.zeros(100)}, {})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ContainerError):
        read_container(path)


def test_dataset_roundtrip(tmp_path):
    scenes, episodes = _generate()
    path = tmp_path / "data.pack"
    write_dataset(path, scenes, episodes, {"seed": 0})
    data = read_dataset(path)
    assert data.meta["seed"] == 0
    assert len(data.scenes) == len(scenes)
    assert len(data.episodes) == len(episodes)
    for original, loaded in zip(episodes, data.episodes):
        assert loaded.level is original.level
        assert len(loaded) == len(original)
        assert loaded.twists == pytest.approx(original.twists, abs=1e-6)
        for a, b in zip(original.pairs, loaded.pairs):
            assert len(a.matches) == len(b.matches)
            # the full target frame survives, not only the matched part
            assert [k.point_id for k in b.target] == [k.point_id for k in a.target]
            assert b.match_arrays()["target_xy"] == pytest.approx(a.match_arrays()["target_xy"], abs=1e-6)
            assert b.match_arrays()["current_id"].tolist() == a.match_arrays()["current_id"].tolist()
    for original, loaded in zip(scenes, data.scenes):
        assert loaded.point_count == original.point_count
        assert loaded.points == pytest.approx(original.points, abs=1e-6)


def test_same_seed_writes_identical_files(tmp_path):
    for name in ("a.pack", "b.pack"):
        scenes, episodes = _generate(seed=4)
        write_dataset(tmp_path / name, scenes, episodes, {"seed": 4})
    assert (tmp_path / "a.pack").read_bytes() == (tmp_path / "b.pack").read_bytes()


def test_summary_validates_point_budget(tmp_path):
    scenes, episodes = _generate()
    write_dataset(tmp_path / "data.pack", scenes, episodes, {})
    summary = summarize(read_dataset(tmp_path / "data.pack"))
    assert summary["budget_ok"] is True
    assert summary["scenes"] == len(scenes)
    assert summary["steps"] == sum(len(e) for e in episodes)
    assert 0 < summary["max_points_used"] < 512


def test_wrong_kind_and_missing_file(tmp_path):
    write_container(tmp_path / "other.pack", {"x": np.zeros(2)}, {"kind": "something-else"})
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "other.pack")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "missing.pack")
