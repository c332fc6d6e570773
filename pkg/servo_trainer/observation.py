"""
Keypoint observations for the current and target cameras.

Visible scene points are projected with the pinhole model, their depth is
reported by a configurable depth provider (metric, affine-relative estimator
emulation or a noisy range-limited depth camera), and both image coordinates
and depth are normalized per frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from servo_trainer.geometry import CameraIntrinsics, Pose
from servo_trainer.scene import HprParams, Scene, visible_indices

logger = logging.getLogger(__name__)

MIN_MATCHES = 4


class DepthMode(Enum):
    TRUE = "true-depth"
    AFFINE = "affine-relative"
    CAMERA = "camera-noise"

    @classmethod
    def parse(cls, name: str) -> "DepthMode":
        for mode in cls:
            if name in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"Unknown depth mode: {name!r}")


@dataclass(frozen=True)
class DepthProvider:
    """
    Source of per-keypoint depth.

    Parameters
    ----------
    mode : DepthMode
        TRUE returns the metric depth; AFFINE returns a * Z + b plus uniform noise
        (a monocular relative-depth estimator up to its unknown affine transform);
        CAMERA returns Z plus uniform noise and drops readings outside
        [min_range, max_range] like a real depth sensor.
    a, b : float
        Scale (> 0) and offset of the affine mode.
    noise_amp : float
        Half-width of the uniform noise in meters.
    """
    mode: DepthMode = DepthMode.TRUE
    a: float = 1.0
    b: float = 0.0
    noise_amp: float = 0.0
    min_range: float = 0.0
    max_range: float = math.inf

    def __post_init__(self):
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", DepthMode.parse(self.mode))
        if not self.a > 0:
            raise ValueError(f"depth provider scale a must be > 0, got {self.a}")
        if self.noise_amp < 0:
            raise ValueError(f"noise_amp must be >= 0, got {self.noise_amp}")
        if self.min_range > self.max_range:
            raise ValueError("min_range must not exceed max_range")

    @property
    def is_stochastic(self) -> bool:
        return self.mode is not DepthMode.TRUE and self.noise_amp > 0


@dataclass(frozen=True)
class AugmentationParams:
    """Mismatch, dropout and uniform coordinate noise applied to an observation pair."""
    mismatch_ratio: float = 0.0
    dropout_ratio: float = 0.0
    noise_amplitude: float = 0.0

    def __post_init__(self):
        for name in ("mismatch_ratio", "dropout_ratio", "noise_amplitude"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.noise_amplitude > 0.1:
            raise ValueError(f"noise_amplitude must be <= 0.1, got {self.noise_amplitude}")

    @property
    def is_identity(self) -> bool:
        return self.mismatch_ratio == 0 and self.dropout_ratio == 0 and self.noise_amplitude == 0


@dataclass(frozen=True)
class RawKeypoint:
    """Rzutowany widoczny punkt: współrzędne pikselowe i metryczna głębia w kamerze."""
    point_id: int
    cluster_id: int
    u: float
    v: float
    depth: float


@dataclass(frozen=True)
class Keypoint:
    """Znormalizowany punkt kluczowy: xy w [-1, 1]^2, głębia z_norm w [0, 1] (min-max w obrębie klatki)."""
    point_id: int
    cluster_id: int
    xy: Tuple[float, float]
    z_norm: float
    depth: float

    def __post_init__(self):
        if not (-1.0 <= self.xy[0] <= 1.0 and -1.0 <= self.xy[1] <= 1.0):
            raise ValueError(f"keypoint {self.point_id} xy out of [-1, 1]: {self.xy}")
        if not 0.0 <= self.z_norm <= 1.0:
            raise ValueError(f"keypoint {self.point_id} z_norm out of [0, 1]: {self.z_norm}")


@dataclass(frozen=True)
class ObservationPair:
    """Current and target keypoints with (current index, target index) matches."""
    current: Tuple[Keypoint, ...]
    target: Tuple[Keypoint, ...]
    matches: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "current", tuple(self.current))
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "matches", tuple((int(i), int(j)) for i, j in self.matches))
        for i, j in self.matches:
            if not (0 <= i < len(self.current) and 0 <= j < len(self.target)):
                raise ValueError(f"match ({i}, {j}) out of range")

    @property
    def clusters(self) -> Dict[int, List[int]]:
        """Match indices grouped by the cluster of their current keypoint."""
        groups: Dict[int, List[int]] = {}
        for m, (i, _) in enumerate(self.matches):
            groups.setdefault(self.current[i].cluster_id, []).append(m)
        return dict(sorted(groups.items()))

    def match_arrays(self) -> Dict[str, np.ndarray]:
        """Column arrays over matches, in match order."""
        cur = [self.current[i] for i, _ in self.matches]
        tgt = [self.target[j] for _, j in self.matches]
        return {
            "current_xy": np.array([k.xy for k in cur], dtype=float).reshape(-1, 2),
            "target_xy": np.array([k.xy for k in tgt], dtype=float).reshape(-1, 2),
            "current_z": np.array([k.z_norm for k in cur], dtype=float),
            "target_z": np.array([k.z_norm for k in tgt], dtype=float),
            "current_depth": np.array([k.depth for k in cur], dtype=float),
            "target_depth": np.array([k.depth for k in tgt], dtype=float),
            "cluster": np.array([k.cluster_id for k in cur], dtype=np.int64),
            "current_id": np.array([k.point_id for k in cur], dtype=np.int64),
            "target_id": np.array([k.point_id for k in tgt], dtype=np.int64),
        }


def project(scene: Scene, camera: Pose, intr: CameraIntrinsics, hpr: HprParams = HprParams(),
            use_hpr: bool = True) -> List[RawKeypoint]:
    """Widoczne punkty sceny rzutowane do ``camera``, posortowane po id punktu."""
    ids = visible_indices(scene, camera, intr, hpr, use_hpr=use_hpr)
    if len(ids) == 0:
        return []
    pts_cam = camera.to_camera(scene.points[ids])
    pixels = project_points(pts_cam, intr)
    clusters = scene.point_clusters[ids]
    return [RawKeypoint(int(pid), int(cid), float(uv[0]), float(uv[1]), float(p[2]))
            for pid, cid, uv, p in zip(ids, clusters, pixels, pts_cam)]


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (N x 3) to pixels (N x 2)."""
    pts = np.ascontiguousarray(np.asarray(points_cam, dtype=np.float64).reshape(-1, 1, 3))
    if len(pts) == 0:
        return np.zeros((0, 2))
    zero = np.zeros(3, dtype=np.float64)
    pixels, _ = cv2.projectPoints(pts, zero, zero, intr.matrix, np.zeros(5, dtype=np.float64))
    return pixels.reshape(-1, 2)


def backproject(pixel, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at metric ``depth`` along the ray through ``pixel``."""
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])


def provider_depth(provider: DepthProvider, true_z: float,
                   rng: Optional[np.random.Generator] = None) -> Optional[float]:
    """Depth reported for a point at metric depth ``true_z``; None marks an invalid reading."""
    if not true_z > 0:
        raise ValueError(f"true depth must be positive, got {true_z}")
    if provider.mode is DepthMode.TRUE:
        return float(true_z)
    noise = 0.0
    if provider.noise_amp > 0:
        if rng is None:
            raise ValueError("a noisy depth provider needs an rng")
        noise = float(rng.uniform(-provider.noise_amp, provider.noise_amp))
    if provider.mode is DepthMode.AFFINE:
        return provider.a * true_z + provider.b + noise
    if true_z < provider.min_range or true_z > provider.max_range:
        return None
    return true_z + noise


def normalize(raw: Sequence[RawKeypoint], intr: CameraIntrinsics, provider: DepthProvider = DepthProvider(),
              rng: Optional[np.random.Generator] = None) -> List[Keypoint]:
    """
    Normalizes a frame of keypoints.

    xy maps the image to [-1, 1]^2; provider depth is min-max normalized over the
    frame, which cancels any positive affine transform of the depth. Keypoints
    with an invalid depth reading are dropped. A frame with fewer than two
    distinct depths gets z_norm = 0.5 everywhere.
    """
    reported = []
    for kp in raw:
        d = provider_depth(provider, kp.depth, rng)
        if d is not None:
            reported.append((kp, d))
    if not reported:
        return []
    depths = np.array([d for _, d in reported], dtype=float)
    lo, hi = float(depths.min()), float(depths.max())
    span = hi - lo
    out = []
    for kp, d in reported:
        z_norm = (d - lo) / span if span > 0 else 0.5
        x = min(1.0, max(-1.0, 2.0 * kp.u / intr.width - 1.0))
        y = min(1.0, max(-1.0, 2.0 * kp.v / intr.height - 1.0))
        out.append(Keypoint(kp.point_id, kp.cluster_id, (x, y), min(1.0, max(0.0, z_norm)), float(d)))
    return out


def match_keypoints(current: Sequence[Keypoint], target: Sequence[Keypoint]) -> ObservationPair:
    """Dopasowanie wzorcowe po id punktu; obie listy posortowane po (klaster, id punktu)."""
    cur = sorted(current, key=lambda k: (k.cluster_id, k.point_id))
    tgt = sorted(target, key=lambda k: (k.cluster_id, k.point_id))
    target_index = {k.point_id: j for j, k in enumerate(tgt)}
    matches = [(i, target_index[k.point_id]) for i, k in enumerate(cur) if k.point_id in target_index]
    return ObservationPair(tuple(cur), tuple(tgt), tuple(matches))


def observe(scene: Scene, camera: Pose, intr: CameraIntrinsics, provider: DepthProvider = DepthProvider(),
            hpr: HprParams = HprParams(), rng: Optional[np.random.Generator] = None,
            use_hpr: bool = True) -> List[Keypoint]:
    return normalize(project(scene, camera, intr, hpr, use_hpr=use_hpr), intr, provider, rng)


def observe_pair(scene: Scene, current: Pose, target: Pose, intr: CameraIntrinsics,
                 provider: DepthProvider = DepthProvider(), hpr: HprParams = HprParams(),
                 rng: Optional[np.random.Generator] = None, use_hpr: bool = True,
                 target_keypoints: Optional[Sequence[Keypoint]] = None) -> ObservationPair:
    """Observes both frames and matches them; ``target_keypoints`` reuses a cached target frame."""
    cur = observe(scene, current, intr, provider, hpr, rng, use_hpr)
    if target_keypoints is None:
        target_keypoints = observe(scene, target, intr, provider, hpr, rng, use_hpr)
    return match_keypoints(cur, target_keypoints)


def _target_stride(count: int, limit: int) -> np.ndarray:
    return np.unique(np.linspace(0, count - 1, limit).round().astype(np.int64))


def subsample_matches(pair: ObservationPair, limit: Optional[int]) -> ObservationPair:
    """
    Keeps the matches whose target keypoint lies on an even stride of ``limit``
    keypoints through the target frame, so the kept set depends on the target
    frame only. When fewer than MIN_MATCHES survive, strides through the matches
    instead. ``limit=None`` keeps everything.
    """
    if limit is None or len(pair.target) <= limit:
        return pair
    chosen = set(_target_stride(len(pair.target), limit).tolist())
    kept = [m for m in pair.matches if m[1] in chosen]
    if len(kept) < MIN_MATCHES and len(pair.matches) > len(kept):
        picks = _target_stride(len(pair.matches), min(limit, len(pair.matches)))
        kept = [pair.matches[int(i)] for i in picks]
    return ObservationPair(pair.current, pair.target, tuple(kept))


def goal_pair(pair: ObservationPair, limit: Optional[int] = None) -> ObservationPair:
    """The target frame matched with itself: what ``pair`` looks like once the camera is at the goal."""
    if limit is None or len(pair.target) <= limit:
        chosen = range(len(pair.target))
    else:
        chosen = _target_stride(len(pair.target), limit).tolist()
    return ObservationPair(pair.target, pair.target, tuple((j, j) for j in chosen))


def feature_error(pair: ObservationPair) -> float:
    """Średnia odległość dopasowanych punktów bieżących i docelowych (znormalizowane jednostki obrazu)."""
    if not pair.matches:
        return math.inf
    arr = pair.match_arrays()
    return float(np.mean(np.linalg.norm(arr["current_xy"] - arr["target_xy"], axis=1)))


def _jitter(kp: Keypoint, rng: np.random.Generator, amplitude: float) -> Keypoint:
    dx, dy = rng.uniform(-amplitude, amplitude, size=2)
    x = min(1.0, max(-1.0, kp.xy[0] + float(dx)))
    y = min(1.0, max(-1.0, kp.xy[1] + float(dy)))
    return Keypoint(kp.point_id, kp.cluster_id, (x, y), kp.z_norm, kp.depth)


def augment(pair: ObservationPair, params: AugmentationParams, rng: np.random.Generator) -> ObservationPair:
    """
    Applies, in order: mismatch (floor(ratio * n) matches rewired to wrong
    targets), dropout (floor(ratio * n) matches removed with their keypoints,
    never below 4 matches) and uniform xy noise on the surviving keypoints.
    """
    if params.is_identity:
        return pair
    matches = list(pair.matches)
    current = list(pair.current)
    target = list(pair.target)

    k = int(math.floor(params.mismatch_ratio * len(matches)))
    if k > 0 and len(matches) >= 2:
        chosen = np.sort(rng.choice(len(matches), size=k, replace=False))
        if k == 1:
            m = int(chosen[0])
            others = [j for idx, (_, j) in enumerate(matches) if idx != m]
            matches[m] = (matches[m][0], int(others[int(rng.integers(len(others)))]))
        else:
            partners = [matches[int(m)][1] for m in chosen]
            shift = int(rng.integers(1, k))
            for pos, m in enumerate(chosen):
                matches[int(m)] = (matches[int(m)][0], partners[(pos + shift) % k])

    k = int(math.floor(params.dropout_ratio * len(matches)))
    k = min(k, max(0, len(matches) - MIN_MATCHES))
    if k > 0:
        dropped = set(int(m) for m in rng.choice(len(matches), size=k, replace=False))
        removed_cur = {matches[m][0] for m in dropped}
        removed_tgt = {matches[m][1] for m in dropped}
        kept = [mt for idx, mt in enumerate(matches) if idx not in dropped]
        removed_tgt -= {j for _, j in kept}
        cur_map = {}
        new_current = []
        for i, kp in enumerate(current):
            if i not in removed_cur:
                cur_map[i] = len(new_current)
                new_current.append(kp)
        tgt_map = {}
        new_target = []
        for j, kp in enumerate(target):
            if j not in removed_tgt:
                tgt_map[j] = len(new_target)
                new_target.append(kp)
        current, target = new_current, new_target
        matches = [(cur_map[i], tgt_map[j]) for i, j in kept]

    if params.noise_amplitude > 0:
        current = [_jitter(kp, rng, params.noise_amplitude) for kp in current]
        target = [_jitter(kp, rng, params.noise_amplitude) for kp in target]
    return ObservationPair(tuple(current), tuple(target), tuple(matches))
