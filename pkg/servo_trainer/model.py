"""
Depth-aware keypoint servo network.

Pipeline per control step: feature alignment of the coordinate and depth
channels, cross-modal fusion, intra-cluster then inter-cluster aggregation,
mean pooling joined with the depth embedding, a GRU step and a two-branch
velocity head. The head works in units of the speed limits; with a goal
context the emitted twist is the head output minus the head output for the
target frame seen from the target pose, so it vanishes at the goal.
Parameters live in one ParamStore and are saved as a container checkpoint.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from components.autograd import Tensor, concat
from components.containers import ContainerError, read_container, write_container
from components.layers import (CrossModalFusion, FeatureAlign, FusionMode, GRUCell, InterClusterAggregate,
                               IntraClusterAggregate, ParamStore, VelocityHead)
from servo_trainer.errors import DatasetError
from servo_trainer.geometry import Twist, clamp_norm
from servo_trainer.graph import DEPTH_CHANNELS, POSITION_CHANNELS, ServoGraph, build_graph
from servo_trainer.observation import MIN_MATCHES, ObservationPair, goal_pair, subsample_matches

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "depth-pc-checkpoint"
MAX_LINEAR_SPEED = 0.5
MAX_ANGULAR_SPEED = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of the servo network.

    Args:
        width: shared feature width d after alignment.
        depth_embedding: width d_z of the depth embedding.
        hidden: GRU state size.
        head_hidden: hidden width of each velocity branch.
        fusion: cluster, full or concat.
        intra_layers / inter_layers: number of stacked aggregation layers.
        attention_scale: multiplier of the attention scores; None means 1/sqrt(width).
        max_linear / max_angular: speed limits; the head emits fractions of them.
        displacement_scale: gain on the target-minus-current channels fed to the alignment layers.
        goal_referenced: subtract the head output of the goal frame when one is given.
        max_keypoints: matches kept per frame (even stride through the target frame); None keeps all.
        seed: parameter initialization seed.
    """
    width: int = 32
    depth_embedding: int = 16
    hidden: int = 64
    head_hidden: int = 32
    fusion: FusionMode = FusionMode.CLUSTER
    intra_layers: int = 1
    inter_layers: int = 1
    attention_scale: Optional[float] = None
    max_linear: float = MAX_LINEAR_SPEED
    max_angular: float = MAX_ANGULAR_SPEED
    displacement_scale: float = 4.0
    goal_referenced: bool = True
    max_keypoints: Optional[int] = 48
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.fusion, str):
            object.__setattr__(self, "fusion", FusionMode.parse(self.fusion))
        for name in ("width", "depth_embedding", "hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.intra_layers < 0 or self.inter_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if not (self.max_linear > 0 and self.max_angular > 0):
            raise ValueError("speed limits must be > 0")
        if not self.displacement_scale > 0:
            raise ValueError(f"displacement_scale must be > 0, got {self.displacement_scale}")
        if self.max_keypoints is not None and self.max_keypoints < MIN_MATCHES:
            raise ValueError(f"max_keypoints must be >= {MIN_MATCHES} or None, got {self.max_keypoints}")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(data))


def _width(channels: slice) -> int:
    return channels.stop - channels.start


@dataclass
class ForwardOutput:
    """Head outputs (speed-limit units, unclamped), the next hidden state and the fusion multiply-adds."""
    linear: Tensor
    angular: Tensor
    hidden: Tensor
    fusion_mult_adds: int = 0


class DepthPcModel:
    """All layers of the servo network over one ParamStore; parameters are created in a fixed order."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        d = config.width
        self.store = ParamStore(config.seed)
        self.align_position = FeatureAlign(self.store, "align_position", _width(POSITION_CHANNELS), d)
        self.align_depth = FeatureAlign(self.store, "align_depth", _width(DEPTH_CHANNELS), d)
        self.fusion = CrossModalFusion(self.store, "fusion", d, config.depth_embedding, config.fusion,
                                       scale=config.attention_scale)
        self.intra = [IntraClusterAggregate(self.store, f"intra.{i}", 2 * d) for i in range(config.intra_layers)]
        self.inter = [InterClusterAggregate(self.store, f"inter.{i}", 2 * d) for i in range(config.inter_layers)]
        self.gru = GRUCell(self.store, "gru", 2 * d + config.depth_embedding, config.hidden)
        self.head = VelocityHead(self.store, "head", config.hidden, config.head_hidden)

    def initial_hidden(self) -> Tensor:
        return Tensor(np.zeros((1, self.config.hidden)))

    def _inputs(self, graph: ServoGraph) -> Tuple[np.ndarray, np.ndarray]:
        # [current, scale * (target - current)] per modality
        s = self.config.displacement_scale
        pos = graph.raw[:, POSITION_CHANNELS]
        depth = graph.raw[:, DEPTH_CHANNELS]
        positions = np.column_stack([pos[:, :2], s * (pos[:, 2:] - pos[:, :2])])
        depths = np.column_stack([depth[:, :1], s * (depth[:, 1:] - depth[:, :1])])
        return positions, depths

    def encode(self, graph: ServoGraph) -> Tuple[Tensor, int]:
        """Pooled graph features joined with the depth embedding (1 x (2d + d_z)) and the fusion multiply-adds."""
        positions, depths = self._inputs(graph)
        x_pos = self.align_position(Tensor(positions))
        x_z = self.align_depth(Tensor(depths))
        fused = self.fusion(x_pos, x_z, graph.blocks)
        features = fused.fused
        for layer in self.intra:
            features = layer(features, positions, graph.intra_edges)
        for layer in self.inter:
            features = layer(features, graph.inter_edges, graph.center_of)
        pooled = features.mean(axis=0, keepdims=True)
        return concat([pooled, fused.phi_z], axis=1), fused.mult_adds

    def goal_context(self, pair: ObservationPair) -> Tensor:
        """Encoded target frame as seen from the target pose."""
        return self.encode(goal_graph(pair, self.config))[0]

    def forward(self, graph: ServoGraph, hidden: Optional[Tensor] = None,
                goal: Optional[Tensor] = None) -> ForwardOutput:
        if hidden is None:
            hidden = self.initial_hidden()
        if hidden.shape != (1, self.config.hidden):
            raise ValueError(f"hidden state must be (1, {self.config.hidden}), got {hidden.shape}")
        context, mult_adds = self.encode(graph)
        h_next = self.gru(context, hidden)
        linear, angular = self.head(h_next)
        if goal is not None and self.config.goal_referenced:
            goal_linear, goal_angular = self.head(self.gru(goal, hidden))
            linear = linear - goal_linear
            angular = angular - goal_angular
        return ForwardOutput(linear, angular, h_next, mult_adds)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for _, t in self.store.items()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.store.load_state_dict(dict(state))


def servo_graph(pair: ObservationPair, config: ModelConfig) -> ServoGraph:
    """Graph of ``pair`` with at most ``config.max_keypoints`` matches."""
    return build_graph(subsample_matches(pair, config.max_keypoints))


def goal_graph(pair: ObservationPair, config: ModelConfig) -> ServoGraph:
    return build_graph(goal_pair(pair, config.max_keypoints))


def speed_scale(config: ModelConfig) -> np.ndarray:
    """Per-component speed limits of a (linear, angular) twist vector."""
    return np.repeat([config.max_linear, config.max_angular], 3)


def clamp_output(linear: np.ndarray, angular: np.ndarray, config: ModelConfig) -> Twist:
    return Twist(clamp_norm(np.asarray(linear, dtype=float), config.max_linear),
                 clamp_norm(np.asarray(angular, dtype=float), config.max_angular))


def depth_pc_forward(model: DepthPcModel, graph: ServoGraph, hidden: Optional[Tensor] = None,
                     goal: Optional[Tensor] = None) -> Tuple[Twist, Tensor]:
    """One control step: clamped metric twist and the next hidden state (detached)."""
    out = model.forward(graph, hidden, goal)
    config = model.config
    twist = clamp_output(out.linear.data * config.max_linear, out.angular.data * config.max_angular, config)
    return twist, Tensor(out.hidden.data.copy())


@dataclass
class Checkpoint:
    """Model plus the training state stored next to it."""
    model: DepthPcModel
    meta: Dict[str, Any] = field(default_factory=dict)
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)


_MOMENTUM_PREFIX = "momentum/"


def save_checkpoint(model: DepthPcModel, path, meta: Optional[Mapping[str, Any]] = None,
                    momentum: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Writes parameters (float32) with the model config and ``meta`` in the manifest."""
    blocks: Dict[str, np.ndarray] = dict(model.state_dict())
    for name, buf in (momentum or {}).items():
        blocks[_MOMENTUM_PREFIX + name] = buf
    manifest = {"kind": CHECKPOINT_KIND, "model": model.config.to_dict()}
    manifest.update(meta or {})
    write_container(path, blocks, manifest)
    logger.info("checkpoint written to %s (%d parameters)", path, model.parameter_count())


def load_checkpoint(path) -> Checkpoint:
    try:
        blocks, meta = read_container(path)
    except ContainerError as e:
        raise DatasetError(f"Cannot read checkpoint {path}: {e}") from e
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DatasetError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    try:
        model = DepthPcModel(ModelConfig.from_dict(meta["model"]))
        params = {k: v for k, v in blocks.items() if not k.startswith(_MOMENTUM_PREFIX)}
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise DatasetError(f"Checkpoint {path} does not match its model config: {e}") from e
    momentum = {k[len(_MOMENTUM_PREFIX):]: v.astype(np.float64) for k, v in blocks.items()
                if k.startswith(_MOMENTUM_PREFIX)}
    return Checkpoint(model, meta, momentum)
