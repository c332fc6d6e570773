"""
components.layers
Parameter store and the layer set of the keypoint servo controller.

Feature alignment maps raw coordinates and depth into a shared width d.
Fusion runs per-cluster (or global) reciprocal cross attention between the two
modalities, or plain concatenation. Message passing runs an attention
aggregation over intra-cluster edges and an edge-convolution over cluster
centers. A GRU cell carries state across control steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from components.autograd import (MultAddCounter, Tensor, concat, segment_max, segment_softmax, segment_sum, softmax,
                                 take_rows)

logger = logging.getLogger(__name__)


def quantize_float32(values: np.ndarray) -> np.ndarray:
    """Rounds to the nearest float32 so checkpoints round-trip bit-exactly."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    fan_in: int
    init: str


class ParamStore:
    """
    Named parameter tensors created in a fixed order from one seeded stream.

    Initialization is uniform in +-1/sqrt(fan_in) ("uniform") or zeros ("zeros").
    Values are kept float32-representable.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._params: Dict[str, Tensor] = {}
        self._specs: Dict[str, ParamSpec] = {}

    def create(self, name: str, shape: Tuple[int, ...], fan_in: int, init: str = "uniform") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "uniform":
            bound = 1.0 / math.sqrt(max(1, fan_in))
            values = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        else:
            raise ValueError(f"unknown init scheme: {init}")
        t = Tensor(quantize_float32(values), requires_grad=True, name=name)
        self._params[name] = t
        self._specs[name] = ParamSpec(name, tuple(shape), fan_in, init)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def specs(self) -> List[ParamSpec]:
        return list(self._specs.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint parameters do not match model: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, t in self._params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {values.shape}, model {t.shape}")
            t.data = quantize_float32(values)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._params.values())


class Linear:
    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int,
                 bias: bool = True, init: str = "uniform"):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = store.create(f"{name}.weight", (in_features, out_features), in_features, init)
        self.bias = store.create(f"{name}.bias", (1, out_features), in_features, init) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Mlp:
    """Linear layers with tanh between them (and after the last one when ``final_activation``)."""

    def __init__(self, store: ParamStore, name: str, sizes: Sequence[int], final_activation: bool = False,
                 last_init: str = "uniform"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.layers = [Linear(store, f"{name}.{i}", a, b, init=last_init if i == len(sizes) - 2 else "uniform")
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = x.tanh()
        return x


class FeatureAlign:
    """Feature alignment layer: tanh(x W + b) into the shared width d."""

    def __init__(self, store: ParamStore, name: str, in_features: int, width: int):
        if not 1 <= in_features <= 4:
            raise ValueError(f"feature alignment takes 1-4 input channels, got {in_features}")
        self.linear = Linear(store, name, in_features, width)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.linear.in_features:
            raise ValueError(f"feature alignment expects (n, {self.linear.in_features}) input, got {x.shape}")
        return self.linear(x).tanh()


class FusionMode(Enum):
    CLUSTER = "cluster"
    FULL = "full"
    CONCAT = "concat"

    @classmethod
    def parse(cls, name: str) -> "FusionMode":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"Unknown fusion mode: {name!r} (expected cluster, full or concat)") from None


@dataclass
class FusionOutput:
    """
    Fused node features (n x 2d), the depth branch (n x d), the depth embedding
    phi_Z (1 x d_z) and the matmul multiply-adds spent on attention.
    """
    fused: Tensor
    depth_branch: Tensor
    phi_z: Tensor
    mult_adds: int = 0


def reciprocal_attention(x_pos: Tensor, x_z: Tensor, scale: float = 1.0) -> Tuple[Tensor, Tensor]:
    """
    One block of reciprocal cross attention.

    score = scale * X_pos X_Z^T; A_Z = row-softmax(score); A_pos = column-softmax(score)^T.
    Returns (concat[A_Z X_Z, A_pos X_pos], A_Z X_Z).
    """
    if x_pos.shape != x_z.shape:
        raise ValueError(f"modality blocks differ in shape: {x_pos.shape} vs {x_z.shape}")
    score = (x_pos @ x_z.T) * scale
    a_z = softmax(score, axis=1)
    a_pos = softmax(score, axis=0).T
    depth = a_z @ x_z
    return concat([depth, a_pos @ x_pos], axis=1), depth


def cluster_cross_attention(x_pos: Tensor, x_z: Tensor, blocks: Sequence[Tuple[int, int]],
                            phi: Mlp, scale: float = 1.0) -> FusionOutput:
    """Reciprocal attention inside each contiguous (start, stop) row block; empty blocks are skipped."""
    if x_pos.shape[0] != x_z.shape[0]:
        raise ValueError("modalities must have the same number of rows")
    fused, depth = [], []
    with MultAddCounter() as counter:
        for start, stop in blocks:
            if stop <= start:
                continue
            rows = np.arange(start, stop)
            f, d = reciprocal_attention(take_rows(x_pos, rows), take_rows(x_z, rows), scale)
            fused.append(f)
            depth.append(d)
    if not fused:
        raise ValueError("cluster cross attention needs at least one non-empty cluster")
    depth_branch = concat(depth, axis=0)
    return FusionOutput(concat(fused, axis=0), depth_branch, phi(depth_branch.mean(axis=0, keepdims=True)),
                        counter.count)


def full_cross_attention(x_pos: Tensor, x_z: Tensor, phi: Mlp, scale: float = 1.0) -> FusionOutput:
    """Reciprocal attention over all rows at once."""
    if x_pos.shape[0] == 0:
        raise ValueError("full cross attention over zero rows")
    with MultAddCounter() as counter:
        fused, depth = reciprocal_attention(x_pos, x_z, scale)
    return FusionOutput(fused, depth, phi(depth.mean(axis=0, keepdims=True)), counter.count)


def concat_fusion(x_pos: Tensor, x_z: Tensor, phi: Mlp) -> FusionOutput:
    """concat[X_Z, X_pos] without attention."""
    if x_pos.shape[0] != x_z.shape[0]:
        raise ValueError("modalities must have the same number of rows")
    return FusionOutput(concat([x_z, x_pos], axis=1), x_z, phi(x_z.mean(axis=0, keepdims=True)))


def fusion_mult_adds(block_sizes: Sequence[int], width: int, mode: FusionMode) -> int:
    """
    Analytic multiply-add count of the fusion stage: 4 n^2 d per attention block
    (score, two softmax passes, two weighted sums). Concatenation costs nothing.
    """
    mode = FusionMode(mode)
    if mode is FusionMode.CONCAT:
        return 0
    if mode is FusionMode.FULL:
        n = int(sum(block_sizes))
        return 4 * n * n * width
    return int(sum(4 * n * n * width for n in block_sizes))


class CrossModalFusion:
    """Fusion stage selected by mode, with the depth-embedding perceptron phi_Z."""

    def __init__(self, store: ParamStore, name: str, width: int, depth_embedding: int,
                 mode: FusionMode = FusionMode.CLUSTER, scale: Optional[float] = None):
        self.mode = FusionMode(mode)
        self.scale = 1.0 / math.sqrt(width) if scale is None else float(scale)
        self.phi = Mlp(store, f"{name}.phi", [width, depth_embedding], final_activation=True)

    def __call__(self, x_pos: Tensor, x_z: Tensor, blocks: Sequence[Tuple[int, int]]) -> FusionOutput:
        if self.mode is FusionMode.CLUSTER:
            return cluster_cross_attention(x_pos, x_z, blocks, self.phi, self.scale)
        if self.mode is FusionMode.FULL:
            return full_cross_attention(x_pos, x_z, self.phi, self.scale)
        return concat_fusion(x_pos, x_z, self.phi)


class IntraClusterAggregate:
    """
    Point-transformer style attention over intra-cluster edges.

    For an edge j -> i: delta = (p_i - p_j) W_p from the position channels,
    score = q_i . (k_j + delta) / sqrt(width), weights are softmaxed over the
    incoming edges of i and out_i = f_i + sum_j a_ij (v_j + delta).
    """

    def __init__(self, store: ParamStore, name: str, width: int, position_channels: int = 4):
        self.width = width
        self.query = Linear(store, f"{name}.query", width, width, bias=False)
        self.key = Linear(store, f"{name}.key", width, width, bias=False)
        self.value = Linear(store, f"{name}.value", width, width, bias=False)
        self.position = Linear(store, f"{name}.position", position_channels, width, bias=False)

    def __call__(self, features: Tensor, positions: np.ndarray, edges: np.ndarray) -> Tensor:
        if len(edges) == 0:
            return features
        n = features.shape[0]
        src, dst = edges[:, 0], edges[:, 1]
        q, k, v = self.query(features), self.key(features), self.value(features)
        delta = self.position(Tensor(positions[dst] - positions[src]))
        keys = take_rows(k, src) + delta
        scores = (take_rows(q, dst) * keys).sum(axis=1) * (1.0 / math.sqrt(self.width))
        alpha = segment_softmax(scores, dst, n)
        messages = (take_rows(v, src) + delta) * alpha.reshape(-1, 1)
        return features + segment_sum(messages, dst, n)


class InterClusterAggregate:
    """
    Edge convolution over cluster centers: m = tanh([f_c, f_c' - f_c] W + b),
    max-aggregated per center, then broadcast as a residual to the center and
    all of its members.
    """

    def __init__(self, store: ParamStore, name: str, width: int):
        self.edge = Linear(store, f"{name}.edge", 2 * width, width)

    def __call__(self, features: Tensor, edges: np.ndarray, center_of: np.ndarray) -> Tensor:
        if len(edges) == 0:
            return features
        n = features.shape[0]
        src, dst = edges[:, 0], edges[:, 1]
        f_dst = take_rows(features, dst)
        messages = self.edge(concat([f_dst, take_rows(features, src) - f_dst], axis=1)).tanh()
        update = segment_max(messages, dst, n)
        return features + take_rows(update, center_of)


class GRUCell:
    """h' = (1 - z) * g + z * h with reset gate r applied to the recurrent candidate term."""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_z = Linear(store, f"{name}.input_update", input_size, hidden_size)
        self.w_r = Linear(store, f"{name}.input_reset", input_size, hidden_size)
        self.w_g = Linear(store, f"{name}.input_candidate", input_size, hidden_size)
        self.u_z = Linear(store, f"{name}.hidden_update", hidden_size, hidden_size, bias=False)
        self.u_r = Linear(store, f"{name}.hidden_reset", hidden_size, hidden_size, bias=False)
        self.u_g = Linear(store, f"{name}.hidden_candidate", hidden_size, hidden_size, bias=False)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape != (1, self.input_size) or h.shape != (1, self.hidden_size):
            raise ValueError(f"GRU expects (1, {self.input_size}) input and (1, {self.hidden_size}) hidden, "
                             f"got {x.shape} and {h.shape}")
        z = (self.w_z(x) + self.u_z(h)).sigmoid()
        r = (self.w_r(x) + self.u_r(h)).sigmoid()
        g = (self.w_g(x) + r * self.u_g(h)).tanh()
        return (1.0 - z) * g + z * h


class VelocityHead:
    """Two independent perceptron branches emitting the linear and angular velocity."""

    def __init__(self, store: ParamStore, name: str, in_features: int, hidden: int):
        self.linear = Mlp(store, f"{name}.linear", [in_features, hidden, 3])
        self.angular = Mlp(store, f"{name}.angular", [in_features, hidden, 3])

    def __call__(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        return self.linear(h).reshape(3), self.angular(h).reshape(3)
