"""
Velocity controllers sharing one interface: ``reset()`` at episode start and
``velocity(context) -> Twist`` once per control step.

- ZeroController: never moves.
- TeacherController: decoupled pose-based law with oracle access to both poses.
- IbvsController: classical point-feature law with the stacked interaction matrix.
- DepthPcController: the trained keypoint graph network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from components.autograd import Tensor
from servo_trainer.errors import UnservoableFrameError
from servo_trainer.geometry import CameraIntrinsics, Pose, Twist, clamp_norm, decoupled_log
from servo_trainer.graph import ServoGraph, build_graph
from servo_trainer.model import (MAX_ANGULAR_SPEED, MAX_LINEAR_SPEED, DepthPcModel, ModelConfig,
                                 depth_pc_forward, load_checkpoint, servo_graph)
from servo_trainer.observation import Keypoint, ObservationPair

logger = logging.getLogger(__name__)

# lambda * dt = 0.1 at the default dt of 0.04 s
TEACHER_GAIN = 2.5
FULL_RANK = 6


def clamp_twist(twist: Twist, max_linear: float = MAX_LINEAR_SPEED,
                max_angular: float = MAX_ANGULAR_SPEED) -> Twist:
    """Scales each branch down to its speed limit, keeping its direction."""
    return Twist(clamp_norm(twist.linear, max_linear), clamp_norm(twist.angular, max_angular))


def teacher_velocity(current: Pose, target: Pose, gain: float = TEACHER_GAIN) -> Twist:
    """
    Decoupled pose-based velocity: linear = gain * t_err, angular = gain * axis_angle.

    Both parts are in the current camera frame; the twist is zero exactly at the goal.
    """
    if not gain > 0:
        raise ValueError(f"teacher gain must be > 0, got {gain}")
    t_err, axis_angle = decoupled_log(current, target)
    return Twist(gain * t_err, gain * axis_angle)


class DepthSource(Enum):
    TRUE = "true"
    CONSTANT = "constant"


@dataclass(frozen=True)
class IbvsConfig:
    """
    Classical image-based law.

    :param gain: lambda in 1/s.
    :param damping: mu of the damped least-squares solve; 0 uses the Moore-Penrose pseudo-inverse.
    :param depth_source: per-feature reported depth ("true") or one constant depth Z*.
    :param constant_depth: Z* in meters.
    """
    gain: float = 1.0
    damping: float = 0.0
    depth_source: DepthSource = DepthSource.TRUE
    constant_depth: float = 0.3

    def __post_init__(self):
        if isinstance(self.depth_source, str):
            object.__setattr__(self, "depth_source", DepthSource(self.depth_source))
        if not self.gain > 0:
            raise ValueError(f"IBVS gain must be > 0, got {self.gain}")
        if self.damping < 0:
            raise ValueError(f"IBVS damping must be >= 0, got {self.damping}")
        if not self.constant_depth > 0:
            raise ValueError(f"constant depth must be > 0, got {self.constant_depth}")


@dataclass(frozen=True)
class IbvsSolution:
    twist: Twist
    rank: int
    low_rank: bool
    error_norm: float


def interaction_matrix(x: np.ndarray, y: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Stacked 2k x 6 point interaction matrix in metric normalized coordinates."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inv_z = 1.0 / np.asarray(depth, dtype=float)
    zeros = np.zeros_like(x)
    row_x = np.column_stack([-inv_z, zeros, x * inv_z, x * y, -(1.0 + x * x), y])
    row_y = np.column_stack([zeros, -inv_z, y * inv_z, 1.0 + y * y, -x * y, -x])
    out = np.empty((2 * len(x), 6))
    out[0::2] = row_x
    out[1::2] = row_y
    return out


def to_metric(xy: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """[-1, 1] image coordinates to metric normalized coordinates ((u - cx) / fx, (v - cy) / fy)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    u = (xy[:, 0] + 1.0) * 0.5 * intr.width
    v = (xy[:, 1] + 1.0) * 0.5 * intr.height
    return np.column_stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy])


def ibvs_solve(pair: ObservationPair, cfg: IbvsConfig = IbvsConfig(),
               intr: CameraIntrinsics = CameraIntrinsics()) -> IbvsSolution:
    """v = -lambda L^+ e, with L^+ = (L^T L + mu I)^-1 L^T, or the pseudo-inverse when mu = 0."""
    if not pair.matches:
        raise UnservoableFrameError("IBVS needs at least one matched feature")
    arr = pair.match_arrays()
    current = to_metric(arr["current_xy"], intr)
    target = to_metric(arr["target_xy"], intr)
    if cfg.depth_source is DepthSource.CONSTANT:
        depth = np.full(len(current), cfg.constant_depth)
    else:
        depth = arr["current_depth"].copy()
        bad = ~(depth > 0)
        if np.any(bad):
            logger.debug("IBVS: %d non-positive depths replaced by Z*=%.3f", int(bad.sum()), cfg.constant_depth)
            depth[bad] = cfg.constant_depth
    L = interaction_matrix(current[:, 0], current[:, 1], depth)
    e = (current - target).reshape(-1)
    if cfg.damping > 0:
        pinv = np.linalg.solve(L.T @ L + cfg.damping * np.eye(6), L.T)
    else:
        pinv = np.linalg.pinv(L)
    v = -cfg.gain * (pinv @ e)
    rank = int(np.linalg.matrix_rank(L))
    return IbvsSolution(Twist(v[:3], v[3:]), rank, rank < FULL_RANK, float(np.linalg.norm(e)))


def ibvs_velocity(pair: ObservationPair, cfg: IbvsConfig = IbvsConfig(),
                  intr: CameraIntrinsics = CameraIntrinsics()) -> Twist:
    solution = ibvs_solve(pair, cfg, intr)
    if solution.low_rank:
        logger.warning("IBVS interaction matrix is rank %d (< %d) with %d features",
                       solution.rank, FULL_RANK, len(pair.matches))
    return solution.twist


@dataclass
class StepContext:
    """Everything a controller may look at in one control step."""
    step: int
    pair: ObservationPair
    current_pose: Pose
    target_pose: Pose
    intrinsics: CameraIntrinsics
    _graph: Optional[ServoGraph] = field(default=None, repr=False)

    @property
    def graph(self) -> ServoGraph:
        if self._graph is None:
            self._graph = build_graph(self.pair)
        return self._graph


class Controller:
    name = "controller"

    def reset(self) -> None:
        pass

    def velocity(self, context: StepContext) -> Twist:
        raise NotImplementedError


class ZeroController(Controller):
    name = "zero"

    def velocity(self, context: StepContext) -> Twist:
        return Twist.zero()


class TeacherController(Controller):
    name = "teacher"

    def __init__(self, gain: float = TEACHER_GAIN, max_linear: float = MAX_LINEAR_SPEED,
                 max_angular: float = MAX_ANGULAR_SPEED):
        self.gain = gain
        self.max_linear = max_linear
        self.max_angular = max_angular

    def velocity(self, context: StepContext) -> Twist:
        return clamp_twist(teacher_velocity(context.current_pose, context.target_pose, self.gain),
                           self.max_linear, self.max_angular)


class IbvsController(Controller):
    name = "ibvs"

    def __init__(self, config: IbvsConfig = IbvsConfig(), max_linear: float = MAX_LINEAR_SPEED,
                 max_angular: float = MAX_ANGULAR_SPEED):
        self.config = config
        self.max_linear = max_linear
        self.max_angular = max_angular
        self.low_rank_steps = 0

    def reset(self) -> None:
        self.low_rank_steps = 0

    def velocity(self, context: StepContext) -> Twist:
        solution = ibvs_solve(context.pair, self.config, context.intrinsics)
        if solution.low_rank:
            self.low_rank_steps += 1
            logger.debug("step %d: IBVS rank %d", context.step, solution.rank)
        return clamp_twist(solution.twist, self.max_linear, self.max_angular)


class DepthPcController(Controller):
    """
    Runs the network with its GRU state carried across steps and reset per episode.

    The goal context is encoded once per target frame and reused while the
    observed target frame stays the same.
    """
    name = "depth_pc"

    def __init__(self, model: DepthPcModel, name: Optional[str] = None):
        self.model = model
        if name:
            self.name = name
        self.hidden: Tensor = model.initial_hidden()
        self._goal_frame: Optional[Tuple[Keypoint, ...]] = None
        self._goal: Optional[Tensor] = None

    def reset(self) -> None:
        self.hidden = self.model.initial_hidden()
        self._goal_frame = None
        self._goal = None

    def _goal_context(self, pair: ObservationPair) -> Optional[Tensor]:
        if not self.model.config.goal_referenced:
            return None
        if self._goal_frame is None or self._goal_frame != pair.target:
            self._goal = Tensor(self.model.goal_context(pair).data.copy())
            self._goal_frame = pair.target
        return self._goal

    def velocity(self, context: StepContext) -> Twist:
        config = self.model.config
        graph = context.graph if config.max_keypoints is None else servo_graph(context.pair, config)
        twist, self.hidden = depth_pc_forward(self.model, graph, self.hidden, self._goal_context(context.pair))
        return twist


CONTROLLER_KINDS = ("depth_pc", "ibvs", "teacher", "zero")


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    """
    Picklable recipe for a controller, so worker processes can rebuild it.

    A depth_pc spec carries either a checkpoint path or an in-memory state dict
    with its model config.
    """
    kind: str
    name: Optional[str] = None
    checkpoint: Optional[str] = None
    model_config: Optional[Dict[str, Any]] = None
    state: Optional[Dict[str, np.ndarray]] = None
    ibvs: IbvsConfig = IbvsConfig()
    gain: float = TEACHER_GAIN

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"Unknown controller kind: {self.kind!r} (expected one of {CONTROLLER_KINDS})")
        if self.kind == "depth_pc" and self.checkpoint is None and self.state is None:
            raise ValueError("a depth_pc controller needs a checkpoint or a state dict")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @classmethod
    def from_model(cls, model: DepthPcModel, name: Optional[str] = None) -> "ControllerSpec":
        return cls("depth_pc", name=name, model_config=model.config.to_dict(), state=model.state_dict())


def build_controller(spec: ControllerSpec) -> Controller:
    if spec.kind == "zero":
        controller: Controller = ZeroController()
    elif spec.kind == "teacher":
        controller = TeacherController(spec.gain)
    elif spec.kind == "ibvs":
        controller = IbvsController(spec.ibvs)
    else:
        if spec.state is not None:
            model = DepthPcModel(ModelConfig.from_dict(spec.model_config or {}))
            model.load_state_dict(spec.state)
        else:
            model = load_checkpoint(spec.checkpoint).model
        controller = DepthPcController(model)
    controller.name = spec.label
    return controller


def describe(spec: ControllerSpec) -> Dict[str, Any]:
    """Provenance entry for reports."""
    out: Dict[str, Any] = {"kind": spec.kind, "name": spec.label}
    if spec.kind == "ibvs":
        out["ibvs"] = {"gain": spec.ibvs.gain, "damping": spec.ibvs.damping,
                       "depth_source": spec.ibvs.depth_source.value,
                       "constant_depth": spec.ibvs.constant_depth}
    elif spec.kind == "teacher":
        out["gain"] = spec.gain
    elif spec.kind == "depth_pc":
        out["checkpoint"] = spec.checkpoint
        if spec.model_config is not None:
            out["model"] = spec.model_config
    return out
