import numpy as np
import pytest

from analysis.benchmark import BenchmarkConfig, run_benchmark
from components.autograd import Tensor
from servo_trainer.controllers import ControllerSpec
from servo_trainer.errors import DatasetError, NumericalError
from servo_trainer.geometry import Twist
from servo_trainer.model import DepthPcModel, ModelConfig, load_checkpoint, save_checkpoint
from servo_trainer.observation import AugmentationParams, ObservationPair
from servo_trainer.scene import primitive_models
from servo_trainer.simulation import EpisodeConfig
from servo_trainer.training import (DataConfig, TrainConfig, TrainingEpisode, _episode_loss, generate_episodes,
                                    train, twist_loss)

SMALL = dict(width=6, depth_embedding=3, hidden=6, head_hidden=6)


def _episodes(seed=0, scenes=4, steps=4):
    rng = np.random.default_rng(seed)
    models = primitive_models(3, rng, points_per_model=300)
    config = DataConfig(scenes=scenes, steps_per_episode=steps, warmup_range=(0, 5), levels=("S",))
    return generate_episodes(models, config, rng)


def _config(**kwargs):
    base = dict(learning_rate=0.01, momentum=0.5, batch_size=2, epochs=2, seq_len=3,
                augmentation=AugmentationParams())
    base.update(kwargs)
    return TrainConfig(**base)


def test_generated_episodes_have_labels_per_step():
    scenes, episodes = _episodes()
    assert 1 <= len(episodes) <= len(scenes) <= 4
    for episode in episodes:
        assert 1 <= len(episode) <= 4
        assert episode.twists.shape == (len(episode), 6)
        assert np.all(np.linalg.norm(episode.twists[:, :3], axis=1) <= 0.5 + 1e-9)
        assert np.all(np.linalg.norm(episode.twists[:, 3:], axis=1) <= 1.0 + 1e-9)
        for pair in episode.pairs:
            assert len(pair.matches) >= 4


def test_generation_is_deterministic():
    _, a = _episodes(seed=3)
    _, b = _episodes(seed=3)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.twists, y.twists)
        assert np.array_equal(x.poses, y.poses)


def test_data_config_validation():
    with pytest.raises(ValueError):
        DataConfig(levels=())
    with pytest.raises(ValueError):
        DataConfig(warmup_range=(5, 2))
    with pytest.raises(ValueError):
        DataConfig(levels=("XL",))


def test_twist_loss_terms():
    target = Twist([0.1, 0.0, 0.0], [0.0, 0.0, 0.0])
    loss, magnitude, direction = twist_loss(Tensor(np.array([0.2, 0.0, 0.0])), Tensor(np.zeros(3)), target,
                                            magnitude_weight=1.0, direction_weight=0.5)
    # same direction: cosine term vanishes; the zero angular target has no direction term
    assert magnitude == pytest.approx(0.01)
    assert direction == pytest.approx(0.0, abs=1e-9)
    assert loss.item() == pytest.approx(0.01, abs=1e-9)
    _, _, direction = twist_loss(Tensor(np.array([-0.1, 0.0, 0.0])), Tensor(np.zeros(3)), target)
    assert direction == pytest.approx(2.0)


def test_zero_learning_rate_leaves_parameters():
    _, episodes = _episodes()
    model = DepthPcModel(ModelConfig(**SMALL))
    before = model.state_dict()
    result = train(model, episodes, _config(learning_rate=0.0))
    for name, values in model.state_dict().items():
        assert np.array_equal(values, before[name])
    assert len(result.curve) == 2
    assert result.momentum


def test_training_is_deterministic():
    _, episodes = _episodes()
    states = []
    for _ in range(2):
        model = DepthPcModel(ModelConfig(seed=1, **SMALL))
        train(model, episodes, _config(augmentation=AugmentationParams(0.1, 0.2, 0.01)))
        states.append(model.state_dict())
    for name in states[0]:
        assert np.array_equal(states[0][name], states[1][name])


def test_resume_continues_the_same_run():
    _, episodes = _episodes()
    full = DepthPcModel(ModelConfig(seed=2, **SMALL))
    train(full, episodes, _config(epochs=2))

    split = DepthPcModel(ModelConfig(seed=2, **SMALL))
    first = train(split, episodes, _config(epochs=1))
    train(split, episodes, _config(epochs=1), start_epoch=1, momentum_state=first.momentum, curve=first.curve)
    assert [p.epoch for p in first.curve] == [0, 1]
    for name, values in full.state_dict().items():
        assert np.array_equal(split.state_dict()[name], values)


def test_resume_through_a_checkpoint_file(tmp_path):
    _, episodes = _episodes()
    full = DepthPcModel(ModelConfig(seed=4, **SMALL))
    train(full, episodes, _config(epochs=2))

    first = DepthPcModel(ModelConfig(seed=4, **SMALL))
    result = train(first, episodes, _config(epochs=1))
    save_checkpoint(first, tmp_path / "half.ckpt", {"epochs_done": 1}, result.momentum)
    loaded = load_checkpoint(tmp_path / "half.ckpt")
    train(loaded.model, episodes, _config(epochs=1), start_epoch=1, momentum_state=loaded.momentum)
    for name, values in full.state_dict().items():
        assert np.array_equal(loaded.model.state_dict()[name], values)


def test_episode_loss_averages_over_used_steps():
    _, episodes = _episodes()
    source = episodes[0]
    alone = TrainingEpisode(0, source.level, source.pairs[:1], source.twists[:1], source.poses[:1], source.target)
    padded = TrainingEpisode(0, source.level, (source.pairs[0], ObservationPair((), (), ())),
                             np.repeat(source.twists[:1], 2, axis=0), np.repeat(source.poses[:1], 2, axis=0),
                             source.target)
    model = DepthPcModel(ModelConfig(**SMALL))
    cfg = _config(seq_len=2)
    expected = _episode_loss(model, alone, cfg, np.random.default_rng(0))
    with_gap = _episode_loss(model, padded, cfg, np.random.default_rng(0))
    assert with_gap[0].item() == pytest.approx(expected[0].item(), rel=1e-12)
    assert with_gap[1] == pytest.approx(expected[1], rel=1e-12)


def test_sgd_keeps_plain_momentum_buffers():
    _, episodes = _episodes()
    model = DepthPcModel(ModelConfig(**SMALL))
    before = model.state_dict()
    result = train(model, episodes, _config(optimizer="sgd", epochs=1))
    assert set(result.momentum) <= set(before)
    assert any(not np.array_equal(before[name], values) for name, values in model.state_dict().items())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta2=1.0)
    assert TrainConfig(learning_rate=0.1, lr_decay=0.5).learning_rate_at(2) == pytest.approx(0.025)


@pytest.mark.slow
def test_loss_halves_on_small_dataset():
    _, episodes = _episodes(scenes=6, steps=6)
    model = DepthPcModel(ModelConfig(width=12, depth_embedding=6, hidden=12, head_hidden=12))
    result = train(model, episodes, _config(epochs=40, lr_decay=1.0, momentum=0.9))
    assert result.curve[-1].loss < 0.5 * result.curve[0].loss


@pytest.mark.slow
def test_overfits_ten_samples():
    _, episodes = _episodes(seed=5, scenes=20, steps=1)
    assert len(episodes) >= 10
    model = DepthPcModel(ModelConfig(width=16, depth_embedding=8, hidden=16, head_hidden=16, seed=3))
    cfg = _config(epochs=1000, learning_rate=0.01, lr_decay=0.997, momentum=0.9, batch_size=10, seq_len=1,
                  direction_weight=0.0, grad_clip=None)
    result = train(model, episodes[:10], cfg)
    assert result.curve[-1].loss < 1e-3


@pytest.mark.slow
def test_trained_network_servos_level_s():
    rng = np.random.default_rng(0)
    models = primitive_models(6, rng)
    _, episodes = generate_episodes(models, DataConfig(scenes=300, levels=("S",)), rng)
    model = DepthPcModel(ModelConfig(seed=0))
    train(model, episodes, TrainConfig(epochs=12))
    bench = BenchmarkConfig(levels=("S",), runs_per_level=50, seed=11, workers=1,
                            episode=EpisodeConfig(record_trajectory=False))
    report = run_benchmark([ControllerSpec.from_model(model, name="net"), ControllerSpec("ibvs")], models, bench)
    assert report.success_rate("net") >= 90.0
    assert report.success_rate("net") >= report.success_rate("ibvs")


def test_non_finite_loss_raises():
    _, episodes = _episodes()
    model = DepthPcModel(ModelConfig(**SMALL))
    model.store["head.linear.1.bias"].data[:] = np.nan
    seen = []
    with pytest.raises(NumericalError):
        train(model, episodes, _config(), on_epoch=seen.append)
    assert seen == []


def test_empty_dataset_raises():
    with pytest.raises(DatasetError):
        train(DepthPcModel(ModelConfig(**SMALL)), [], _config())
