"""
Training data generation and the supervised training loop.

Episodes are teacher rollouts: from a sampled (initial, target) pose pair the
decoupled pose-based law is run for a random warm-up, then a fixed number of
steps is recorded as (observation pair, clamped teacher twist). The network is
trained on windows of consecutive steps with its GRU unrolled, by Adam (or
SGD with momentum) on twists expressed in units of the speed limits.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from components.autograd import Tensor
from components.layers import quantize_float32
from servo_trainer.controllers import TEACHER_GAIN, clamp_twist, teacher_velocity
from servo_trainer.errors import DatasetError, NumericalError, UnservoableFrameError
from servo_trainer.geometry import (CameraIntrinsics, CylinderRegion, DeviationLevel, Pose, Twist,
                                    integrate_twist, sample_pose_pair)
from servo_trainer.model import MAX_ANGULAR_SPEED, MAX_LINEAR_SPEED, DepthPcModel, servo_graph, speed_scale
from servo_trainer.observation import (MIN_MATCHES, AugmentationParams, DepthProvider, ObservationPair, augment,
                                       observe, observe_pair)
from servo_trainer.scene import HprParams, ObjectModel, Scene, SceneConfig, build_scene

logger = logging.getLogger(__name__)

# Below this norm (in units of the speed limit) a target branch has no meaningful direction.
DIRECTION_EPS = 0.02
OPTIMIZERS = ("adam", "sgd")
ADAM_STEP = "step"


@dataclass(frozen=True)
class DataConfig:
    """
    Teacher-rollout dataset parameters.

    Args:
        scenes: number of scenes; each yields at most one episode.
        steps_per_episode: recorded steps after the warm-up.
        warmup_range: inclusive range of unrecorded teacher steps before recording.
        levels: deviation levels sampled uniformly per scene.
        perturbation: std of the Gaussian noise added to the executed twist, as a
            fraction of the speed limits; the recorded label stays the clean teacher twist.
    """
    scenes: int = 1000
    steps_per_episode: int = 16
    warmup_range: Tuple[int, int] = (0, 150)
    levels: Tuple[str, ...] = ("S", "M")
    perturbation: float = 0.1
    dt: float = 0.04
    gain: float = TEACHER_GAIN
    region: CylinderRegion = CylinderRegion()
    scene: SceneConfig = SceneConfig()
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    provider: DepthProvider = DepthProvider()
    hpr: HprParams = HprParams()
    use_hpr: bool = True
    max_retries: int = 10
    min_matches: int = MIN_MATCHES

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(DeviationLevel.parse(name).name for name in self.levels))
        object.__setattr__(self, "warmup_range", tuple(int(v) for v in self.warmup_range))
        if self.scenes < 0 or self.steps_per_episode < 1:
            raise ValueError("scenes must be >= 0 and steps_per_episode >= 1")
        if not 0 <= self.warmup_range[0] <= self.warmup_range[1]:
            raise ValueError(f"invalid warmup range {self.warmup_range}")
        if not self.levels:
            raise ValueError("at least one deviation level is required")
        if self.perturbation < 0 or self.dt <= 0 or self.max_retries < 1:
            raise ValueError("perturbation must be >= 0, dt > 0 and max_retries >= 1")


@dataclass(frozen=True, eq=False)
class TrainingEpisode:
    """Recorded steps of one teacher rollout; ``twists`` are the clamped labels (T x 6)."""
    scene_index: int
    level: DeviationLevel
    pairs: Tuple[ObservationPair, ...]
    twists: np.ndarray
    poses: np.ndarray
    target: Pose

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise ValueError("a training episode needs at least one step")
        if self.twists.shape != (len(self.pairs), 6) or self.poses.shape != (len(self.pairs), 7):
            raise ValueError("twists/poses must have one row per recorded step")

    def __len__(self) -> int:
        return len(self.pairs)


def _perturbed(label: Twist, scale: float, rng: np.random.Generator) -> Twist:
    if scale <= 0:
        return label
    noisy = Twist(label.linear + scale * MAX_LINEAR_SPEED * rng.normal(size=3),
                  label.angular + scale * MAX_ANGULAR_SPEED * rng.normal(size=3))
    return clamp_twist(noisy)


def _sample_setup(models: Sequence[ObjectModel], config: DataConfig, rng: np.random.Generator):
    for _ in range(config.max_retries):
        scene = build_scene(models, config.region, rng, config.scene)
        level = DeviationLevel[config.levels[int(rng.integers(len(config.levels)))]]
        initial, target = sample_pose_pair(config.region, level, rng)
        target_kps = observe(scene, target, config.intrinsics, config.provider, config.hpr, rng,
                             use_hpr=config.use_hpr)
        if len(target_kps) < config.min_matches:
            continue
        pair = observe_pair(scene, initial, target, config.intrinsics, config.provider, config.hpr, rng,
                            use_hpr=config.use_hpr, target_keypoints=target_kps)
        if len(pair.matches) >= config.min_matches:
            return scene, level, initial, target, target_kps
    return None


def generate_episodes(models: Sequence[ObjectModel], config: DataConfig,
                      rng: np.random.Generator) -> Tuple[List[Scene], List[TrainingEpisode]]:
    """Builds ``config.scenes`` scenes and one teacher episode per scene whose setup is servoable."""
    if not models:
        raise ValueError("generate_episodes needs at least one object model")
    scenes: List[Scene] = []
    episodes: List[TrainingEpisode] = []
    skipped = 0
    for index in range(config.scenes):
        setup = _sample_setup(models, config, rng)
        if setup is None:
            skipped += 1
            logger.warning("scene %d: no servoable setup after %d retries, skipped", index, config.max_retries)
            continue
        scene, level, pose, target, target_kps = setup
        scene_index = len(scenes)
        scenes.append(scene)

        warmup = int(rng.integers(config.warmup_range[0], config.warmup_range[1] + 1))
        for _ in range(warmup):
            label = clamp_twist(teacher_velocity(pose, target, config.gain))
            pose = integrate_twist(pose, _perturbed(label, config.perturbation, rng), config.dt)

        pairs, twists, poses = [], [], []
        for _ in range(config.steps_per_episode):
            pair = observe_pair(scene, pose, target, config.intrinsics, config.provider, config.hpr, rng,
                                use_hpr=config.use_hpr, target_keypoints=target_kps)
            if len(pair.matches) < config.min_matches:
                break
            label = clamp_twist(teacher_velocity(pose, target, config.gain))
            pairs.append(pair)
            twists.append(label.as_vector())
            poses.append(pose.as_vector())
            pose = integrate_twist(pose, _perturbed(label, config.perturbation, rng), config.dt)
        if not pairs:
            logger.debug("scene %d: features lost during warm-up, no steps recorded", index)
            continue
        episodes.append(TrainingEpisode(scene_index, level, tuple(pairs), np.array(twists),
                                        np.array(poses), target))
    logger.info("generated %d scenes, %d episodes (%d setups skipped)", len(scenes), len(episodes), skipped)
    return scenes, episodes


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings.

    Parameters
    ----------
    optimizer : str
        "adam" (default) or "sgd" (heavy-ball momentum).
    learning_rate : float
        Step size at epoch 0 (0 leaves the parameters untouched).
    lr_decay : float
        Per-epoch multiplier; epoch e runs at learning_rate * lr_decay ** e.
    momentum : float
        First-moment coefficient of Adam, heavy-ball coefficient of SGD; in [0, 1).
    beta2, eps : float
        Second-moment coefficient and denominator offset of Adam.
    seq_len : int
        Length of the unrolled GRU window drawn from each episode per epoch.
    magnitude_weight, direction_weight : float
        Weights of the squared twist error and the per-branch cosine term.
        Both are computed on twists divided by the speed limits.
    grad_clip : float or None
        Global gradient-norm limit.
    """
    optimizer: str = "adam"
    learning_rate: float = 0.002
    lr_decay: float = 0.95
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 12
    seq_len: int = 8
    magnitude_weight: float = 1.0
    direction_weight: float = 0.1
    grad_clip: Optional[float] = 5.0
    augmentation: AugmentationParams = AugmentationParams(0.0, 0.1, 0.005)
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer: {self.optimizer!r} (expected one of {OPTIMIZERS})")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ValueError("beta2 must be in [0, 1) and eps > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1, epochs >= 0")
        if self.magnitude_weight < 0 or self.direction_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 when set")

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    loss: float
    magnitude: float
    direction: float


@dataclass
class TrainResult:
    """Trained model, loss curve and the optimizer state needed to resume."""
    model: DepthPcModel
    curve: List[CurvePoint]
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)


def _direction_term(pred: Tensor, target: np.ndarray) -> Optional[Tensor]:
    t_norm = float(np.linalg.norm(target))
    if t_norm < DIRECTION_EPS:
        return None
    p_norm = ((pred * pred).sum() + 1e-12).sqrt()
    cosine = (pred * target).sum() / (p_norm * t_norm)
    return 1.0 - cosine


def twist_loss(linear: Tensor, angular: Tensor, target: Twist,
               magnitude_weight: float = 1.0, direction_weight: float = 0.1) -> Tuple[Tensor, float, float]:
    """
    w_m * ||pred - target||^2 + w_d * sum over branches of (1 - cos(pred, target)).

    The cosine term of a branch is skipped when its target norm is below DIRECTION_EPS.
    Returns (loss tensor, magnitude part, direction part).
    """
    diff_lin = linear - target.linear
    diff_ang = angular - target.angular
    magnitude = (diff_lin * diff_lin).sum() + (diff_ang * diff_ang).sum()
    loss = magnitude * magnitude_weight
    direction_value = 0.0
    for pred, tgt in ((linear, target.linear), (angular, target.angular)):
        term = _direction_term(pred, tgt)
        if term is not None:
            direction_value += term.item()
            loss = loss + term * direction_weight
    return loss, magnitude.item(), direction_value


def _clip_gradients(model: DepthPcModel, limit: Optional[float]) -> float:
    grads = [t.grad for _, t in model.store.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if limit is not None and norm > limit:
        scale = limit / norm
        for g in grads:
            g *= scale
    return norm


def _sgd_step(model: DepthPcModel, state: Dict[str, np.ndarray], lr: float, momentum: float) -> None:
    for name, param in model.store.items():
        if param.grad is None:
            continue
        buf = state.get(name)
        buf = quantize_float32(param.grad if buf is None else momentum * buf + param.grad)
        state[name] = buf
        if lr > 0:
            param.data = quantize_float32(param.data - lr * buf)


def _adam_step(model: DepthPcModel, state: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    # moments are kept float32-exact so a checkpoint resumes the same run
    step = int(state[ADAM_STEP][0]) + 1 if ADAM_STEP in state else 1
    state[ADAM_STEP] = np.array([step], dtype=np.int32)
    beta1, beta2 = cfg.momentum, cfg.beta2
    first_fix = 1.0 - beta1 ** step
    second_fix = 1.0 - beta2 ** step
    for name, param in model.store.items():
        if param.grad is None:
            continue
        g = param.grad
        m = state.get(f"m/{name}")
        v = state.get(f"v/{name}")
        m = quantize_float32((1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g)
        v = quantize_float32((1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g)
        state[f"m/{name}"] = m
        state[f"v/{name}"] = v
        if lr > 0:
            update = (m / first_fix) / (np.sqrt(v / second_fix) + cfg.eps)
            param.data = quantize_float32(param.data - lr * update)


def _optimizer_step(model: DepthPcModel, state: Dict[str, np.ndarray], cfg: TrainConfig, epoch: int) -> None:
    lr = cfg.learning_rate_at(epoch)
    if cfg.optimizer == "adam":
        _adam_step(model, state, lr, cfg)
    else:
        _sgd_step(model, state, lr, cfg.momentum)


def _episode_loss(model: DepthPcModel, episode: TrainingEpisode, cfg: TrainConfig,
                  rng: np.random.Generator) -> Tuple[Tensor, float, float]:
    """Mean loss over the servoable steps of one random window of ``episode``."""
    steps = len(episode)
    start = 0 if steps <= cfg.seq_len else int(rng.integers(0, steps - cfg.seq_len + 1))
    window = range(start, min(steps, start + cfg.seq_len))
    limits = speed_scale(model.config)
    hidden = model.initial_hidden()
    goal: Optional[Tensor] = None
    if model.config.goal_referenced:
        try:
            goal = model.goal_context(episode.pairs[start])
        except UnservoableFrameError:
            goal = None
    total: Optional[Tensor] = None
    magnitude = direction = 0.0
    used = 0
    for t in window:
        pair = augment(episode.pairs[t], cfg.augmentation, rng)
        try:
            graph = servo_graph(pair, model.config)
        except UnservoableFrameError:
            continue
        out = model.forward(graph, hidden, goal)
        hidden = out.hidden
        target = Twist.from_vector(episode.twists[t] / limits)
        loss, mag, dirn = twist_loss(out.linear, out.angular, target, cfg.magnitude_weight, cfg.direction_weight)
        total = loss if total is None else total + loss
        magnitude += mag
        direction += dirn
        used += 1
    if total is None:
        raise UnservoableFrameError(f"episode of scene {episode.scene_index} has no servoable step")
    return total * (1.0 / used), magnitude / used, direction / used


def train(model: DepthPcModel, episodes: Sequence[TrainingEpisode], cfg: TrainConfig = TrainConfig(),
          start_epoch: int = 0, momentum_state: Optional[Dict[str, np.ndarray]] = None,
          curve: Optional[List[CurvePoint]] = None,
          on_epoch: Optional[Callable[[CurvePoint], None]] = None) -> TrainResult:
    """
    Trains ``model`` in place for ``cfg.epochs`` epochs starting at ``start_epoch``.

    Every epoch draws its shuffling, windows and augmentation from a stream
    seeded by (seed, epoch) and uses the learning rate of its epoch index, so a
    resumed run continues the same sequence. ``momentum_state`` is the optimizer
    state of the previous run. ``curve`` is extended in place and stays readable
    if training aborts.

    :raises DatasetError: ``episodes`` is empty.
    :raises NumericalError: the loss or the gradients became non-finite.
    """
    if not episodes:
        raise DatasetError("training needs a non-empty dataset")
    curve = [] if curve is None else curve
    state: Dict[str, np.ndarray] = dict(momentum_state or {})
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(episodes))
        losses, mags, dirs = [], [], []
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            model.store.zero_grad()
            for idx in batch:
                loss, mag, dirn = _episode_loss(model, episodes[int(idx)], cfg, rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"loss became {value} at epoch {epoch}, episode {int(idx)}")
                (loss * (1.0 / len(batch))).backward()
                losses.append(value)
                mags.append(mag)
                dirs.append(dirn)
            grad_norm = _clip_gradients(model, cfg.grad_clip)
            if not math.isfinite(grad_norm):
                raise NumericalError(f"gradient norm became {grad_norm} at epoch {epoch}")
            _optimizer_step(model, state, cfg, epoch)
        point = CurvePoint(epoch, float(np.mean(losses)), float(np.mean(mags)), float(np.mean(dirs)))
        curve.append(point)
        logger.info("epoch %d: loss %.6f (magnitude %.6f, direction %.6f, lr %.2e)",
                    epoch, point.loss, point.magnitude, point.direction, cfg.learning_rate_at(epoch))
        if on_epoch is not None:
            on_epoch(point)
    model.store.zero_grad()
    return TrainResult(model, curve, state)
