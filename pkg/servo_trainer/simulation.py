"""
Closed-loop servo episodes.

An episode samples a scene and an (initial, target) pose pair from the
seed's scene stream, then repeatedly observes both frames, queries the
controller and integrates the returned twist for dt. Observation noise
(depth provider and augmentation) is drawn from a second stream of the same
seed, so every controller evaluated on a seed sees identical scenes, poses
and noise.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from analysis.convergence_rules import ConvergenceRules, ConvergenceStatus
from servo_trainer.controllers import Controller, StepContext, clamp_twist
from servo_trainer.errors import ObservationError, UnservoableFrameError
from servo_trainer.geometry import (CameraIntrinsics, CylinderRegion, DeviationLevel, Pose, camera_distance,
                                    integrate_twist, pose_error, sample_pose_pair)
from servo_trainer.observation import (MIN_MATCHES, AugmentationParams, DepthMode, DepthProvider, Keypoint,
                                       ObservationPair, augment, feature_error, match_keypoints, observe)
from servo_trainer.scene import HprParams, ObjectModel, Scene, SceneConfig, build_scene

logger = logging.getLogger(__name__)

SCENE_STREAM = 0
NOISE_STREAM = 1

CAUSE_NO_KEYPOINTS = "no_keypoints"
CAUSE_UNSERVOABLE = "unservoable"
CAUSE_POSE_MISMATCH = "pose_mismatch"
CAUSE_TIMEOUT = "timeout"


@dataclass(frozen=True)
class EpisodeConfig:
    """
    Closed-loop episode settings.

    Parameters
    ----------
    dt : float
        Control period in seconds (one TS unit).
    max_steps : int
        Episode length limit.
    feature_error_threshold : float
        Mean matched-keypoint distance (normalized image units) that must hold for ``hold_steps``.
    rotation_threshold_deg, translation_threshold_m : float
        Terminal pose check.
    noise : AugmentationParams
        Mismatch, dropout and coordinate noise applied to every controller observation.
    """
    dt: float = 0.04
    max_steps: int = 600
    level: DeviationLevel = DeviationLevel.S
    provider: DepthProvider = DepthProvider()
    noise: AugmentationParams = AugmentationParams()
    rotation_threshold_deg: float = ConvergenceRules.ROTATION_THRESHOLD_DEG
    translation_threshold_m: float = ConvergenceRules.TRANSLATION_THRESHOLD_M
    hold_steps: int = ConvergenceRules.HOLD_STEPS
    feature_error_threshold: float = ConvergenceRules.FEATURE_ERROR_THRESHOLD
    use_hpr: bool = True
    hpr: HprParams = HprParams()
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    region: CylinderRegion = CylinderRegion()
    scene: SceneConfig = SceneConfig()
    max_retries: int = 10
    min_matches: int = MIN_MATCHES
    record_trajectory: bool = True

    def __post_init__(self):
        if isinstance(self.level, str):
            object.__setattr__(self, "level", DeviationLevel.parse(self.level))
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.max_steps < self.hold_steps:
            raise ValueError(f"max_steps ({self.max_steps}) must be >= hold_steps ({self.hold_steps})")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    def rules(self) -> ConvergenceRules:
        return ConvergenceRules(self.feature_error_threshold, self.hold_steps, self.rotation_threshold_deg,
                                self.translation_threshold_m, self.max_steps)


@dataclass(frozen=True, eq=False)
class EpisodeSetup:
    """Scena i para póz jednego ziarna; taka sama dla każdego kontrolera."""
    seed: int
    level: DeviationLevel
    scene: Scene
    initial: Pose
    target: Pose
    attempts: int

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str((self.seed, self.level.name)).encode())
        h.update(np.ascontiguousarray(self.scene.points).tobytes())
        h.update(self.initial.as_vector().tobytes())
        h.update(self.target.as_vector().tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class StepRecord:
    step: int
    pose: np.ndarray
    twist: np.ndarray
    feature_error: float
    matches: int

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "pose": self.pose.tolist(), "twist": self.twist.tolist(),
                "feature_error": self.feature_error, "matches": self.matches}


@dataclass
class EpisodeResult:
    """
    Wynik jednego epizodu. ``ts`` to pierwszy krok spełnionego okna utrzymania
    przy sukcesie, w przeciwnym razie ``max_steps``; te/re mierzone na końcu.
    """
    controller: str
    level: str
    seed: int
    success: bool
    te: float
    re: float
    ts: int
    steps: int
    wall_time: float
    cause: Optional[str]
    setup_digest: str
    noise_digest: str
    initial_distance: float = 0.0
    trajectory: List[StepRecord] = field(default_factory=list)

    def to_row(self) -> Dict[str, Any]:
        return {
            "controller": self.controller, "level": self.level, "seed": self.seed,
            "success": self.success, "te": self.te, "re": self.re, "ts": self.ts,
            "steps": self.steps, "wall_time": self.wall_time, "cause": self.cause,
            "setup_digest": self.setup_digest, "noise_digest": self.noise_digest,
            "initial_distance": self.initial_distance,
        }


def prepare_episode(models: Sequence[ObjectModel], config: EpisodeConfig, seed: int) -> Optional[EpisodeSetup]:
    """
    Losuje scenę i parę póz widoczną z obu póz, ponawiając do ``max_retries``
    razy; zwraca None (i loguje), gdy ziarno trzeba pominąć.
    """
    rng = np.random.default_rng([int(seed), SCENE_STREAM])
    clean = DepthProvider()
    for attempt in range(1, config.max_retries + 1):
        scene = build_scene(models, config.region, rng, config.scene)
        initial, target = sample_pose_pair(config.region, config.level, rng)
        target_kps = observe(scene, target, config.intrinsics, clean, config.hpr, use_hpr=config.use_hpr)
        if len(target_kps) < config.min_matches:
            continue
        current_kps = observe(scene, initial, config.intrinsics, clean, config.hpr, use_hpr=config.use_hpr)
        if len(match_keypoints(current_kps, target_kps).matches) >= config.min_matches:
            return EpisodeSetup(int(seed), config.level, scene, initial, target, attempt)
    logger.warning("seed %d: no visible setup after %d retries, skipped", seed, config.max_retries)
    return None


def _clean_pair(scene: Scene, pose: Pose, clean_target: Sequence[Keypoint], config: EpisodeConfig) -> ObservationPair:
    current = observe(scene, pose, config.intrinsics, DepthProvider(), config.hpr, use_hpr=config.use_hpr)
    pair = match_keypoints(current, clean_target)
    if not pair.matches:
        raise ObservationError(f"no matched keypoints ({len(current)} visible)")
    return pair


def run_episode(setup: EpisodeSetup, controller: Controller, config: EpisodeConfig,
                rng: Optional[np.random.Generator] = None) -> EpisodeResult:
    """
    Główna pętla zamknięta: działa do zakończenia okna utrzymania, utraty cech
    albo osiągnięcia ``max_steps``.

    Sukces wymaga czystego średniego błędu cech poniżej progu przez
    ``hold_steps`` kolejnych kroków oraz pozy końcowej w granicach progów
    rotacji i translacji.
    """
    if rng is None:
        rng = np.random.default_rng([setup.seed, NOISE_STREAM])
    intr, hpr = config.intrinsics, config.hpr
    scene, target = setup.scene, setup.target
    noisy_provider = config.provider.mode is not DepthMode.TRUE
    noise_digest = hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True).encode()).hexdigest()

    controller.reset()
    clean_target: List[Keypoint] = observe(scene, target, intr, DepthProvider(), hpr, use_hpr=config.use_hpr)
    observed_target = (observe(scene, target, intr, config.provider, hpr, rng, use_hpr=config.use_hpr)
                       if noisy_provider else clean_target)

    rules = config.rules()
    trajectory: List[StepRecord] = []
    pose = setup.initial
    cause: Optional[str] = None
    success = False
    ts = config.max_steps
    steps = 0
    started = time.perf_counter()

    for step in range(config.max_steps):
        steps = step + 1
        try:
            clean_pair = _clean_pair(scene, pose, clean_target, config)
        except ObservationError as e:
            cause = CAUSE_NO_KEYPOINTS
            logger.debug("seed %d step %d: %s", setup.seed, step, e)
            break
        error = feature_error(clean_pair)
        status = rules.update(step, error)
        if status is ConvergenceStatus.CONVERGED:
            if config.record_trajectory:
                trajectory.append(StepRecord(step, pose.as_vector(), np.zeros(6), error, len(clean_pair.matches)))
            te, re = pose_error(pose, target)
            if rules.check_terminal(te, re):
                success = True
                ts = int(rules.hold_start)
            else:
                cause = CAUSE_POSE_MISMATCH
            break

        if noisy_provider:
            current = observe(scene, pose, intr, config.provider, hpr, rng, use_hpr=config.use_hpr)
            pair = match_keypoints(current, observed_target)
        else:
            pair = clean_pair
        pair = augment(pair, config.noise, rng)
        context = StepContext(step, pair, pose, target, intr)
        try:
            twist = controller.velocity(context)
        except UnservoableFrameError as e:
            cause = CAUSE_UNSERVOABLE
            logger.debug("seed %d step %d: %s", setup.seed, step, e)
            break
        twist = clamp_twist(twist)
        if config.record_trajectory:
            trajectory.append(StepRecord(step, pose.as_vector(), twist.as_vector(), error, len(pair.matches)))
        pose = integrate_twist(pose, twist, config.dt)
    else:
        cause = CAUSE_TIMEOUT

    te, re = pose_error(pose, target)
    if not success and cause is None:
        cause = CAUSE_TIMEOUT
    wall = time.perf_counter() - started
    logger.debug("seed %d %s: success=%s te=%.4f re=%.3f ts=%d cause=%s",
                 setup.seed, controller.name, success, te, re, ts, cause)
    return EpisodeResult(controller.name, setup.level.name, setup.seed, success, te, re, ts, steps, wall,
                         cause, setup.digest(), noise_digest,
                         camera_distance(setup.initial, config.region), trajectory)


def trajectory_records(result: EpisodeResult) -> List[Dict[str, Any]]:
    """Rekordy krok po kroku do logu epizodów (jeden JSON na linię)."""
    base = {"controller": result.controller, "level": result.level, "seed": result.seed}
    return [dict(base, **record.to_dict()) for record in result.trajectory]
