"""
Scene synthesis and point visibility.

Object point clouds are voxel-downsampled and placed as randomly rotated
clusters inside a cylinder. Visibility is a frustum filter followed by
occlusion: either the Hidden Points Removal operator (spherical flip + convex
hull) over the whole frame, or per cluster, where convex clusters use the
outward normals of their hull for self-occlusion, the rest fall back to HPR,
and every cluster hull occludes the points of the other clusters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from servo_trainer.errors import DatasetError
from servo_trainer.geometry import CameraIntrinsics, CylinderRegion, Pose, random_rotation

logger = logging.getLogger(__name__)

# Relative tolerance for deciding that a point set spans fewer than 3 dimensions.
DEGENERACY_EPS = 1e-10
# Distance below the hull surface, as a fraction of the cluster radius, that still counts as on it.
SHELL_TOLERANCE = 0.01
# Share of points on the hull surface above which a cluster is treated as convex.
CONVEX_FRACTION = 0.9


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Chmura punktów jednego obiektu w jego własnym układzie (metry)."""
    id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"object model {self.id!r} needs a non-empty N x 3 point array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"object model {self.id!r} has non-finite coordinates")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True, eq=False)
class Cluster:
    """One placed object instance: world-frame points and their centroid."""
    object_id: str
    pose: Pose
    points: np.ndarray
    centroid: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError("a cluster needs at least one 3D point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "centroid", pts.mean(axis=0))

    @cached_property
    def shell(self) -> Optional["ClusterShell"]:
        return cluster_shell(self.points)


@dataclass(frozen=True, eq=False)
class Scene:
    """Clusters inside a cylinder, with a total point budget N strictly above the used count."""
    region: CylinderRegion
    clusters: Tuple[Cluster, ...]
    budget: int

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        used = sum(len(c.points) for c in self.clusters)
        if self.clusters and used >= self.budget:
            raise ValueError(f"scene uses {used} points, budget N={self.budget} must be strictly larger")

    @property
    def points(self) -> np.ndarray:
        """All scene points (world frame); row index is the scene-wide point id."""
        if not self.clusters:
            return np.zeros((0, 3))
        return np.vstack([c.points for c in self.clusters])

    @property
    def point_clusters(self) -> np.ndarray:
        """Cluster index of every row of ``points``."""
        return np.concatenate([np.full(len(c.points), i, dtype=np.int64)
                               for i, c in enumerate(self.clusters)]) if self.clusters else np.zeros(0, np.int64)

    @property
    def point_count(self) -> int:
        return int(sum(len(c.points) for c in self.clusters))


@dataclass(frozen=True)
class HprParams:
    """
    Occlusion settings.

    Args:
        gamma: HPR radius multiplier, R = gamma * max ||p||.
        per_cluster: occlusion per cluster (hull normals and hull occluders);
            False runs HPR once over the whole frame.
        grazing_margin: a convex-cluster point is visible when its outward
            normal makes an angle below 90 degrees minus this margin (radians)
            with the direction to the camera.
        occluder_tolerance: length (m) a sight line may run inside another
            cluster's hull before the point counts as hidden.
    """
    gamma: float = 100.0
    per_cluster: bool = True
    grazing_margin: float = 0.015
    occluder_tolerance: float = 5e-4

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ValueError(f"HPR gamma must be > 1, got {self.gamma}")
        if not 0.0 <= self.grazing_margin < math.pi / 2:
            raise ValueError(f"grazing_margin must be in [0, pi/2), got {self.grazing_margin}")
        if self.occluder_tolerance < 0:
            raise ValueError(f"occluder_tolerance must be >= 0, got {self.occluder_tolerance}")


@dataclass(frozen=True)
class SceneConfig:
    """Stochastic ranges for scene generation (inclusive integer ranges)."""
    cluster_range: Tuple[int, int] = (2, 6)
    points_range: Tuple[int, int] = (8, 64)
    budget: int = 512
    voxel_size: float = 0.004

    def __post_init__(self):
        lo, hi = self.cluster_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid cluster range {self.cluster_range}")
        lo, hi = self.points_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid points-per-cluster range {self.points_range}")
        if self.budget < 2:
            raise ValueError("point budget N must be at least 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")


@dataclass(frozen=True)
class HullVertices:
    """Extreme points of a hull; ``degenerate`` marks a lower-dimensional fallback."""
    indices: FrozenSet[int]
    degenerate: bool = False


def voxel_downsample(points, voxel_size: float) -> np.ndarray:
    """
    Replaces the points of every occupied voxel with their centroid.

    Output rows are ordered by voxel key, so the result is deterministic.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def build_scene(models: Sequence[ObjectModel], region: CylinderRegion, rng: np.random.Generator,
                config: SceneConfig = SceneConfig()) -> Scene:
    """
    Places randomly rotated, randomly sampled object clusters in ``region``.

    N_c and each n_i are drawn from the configured ranges; n_i is clamped to the
    downsampled model size and to the remaining budget so that sum(n_i) < N.
    """
    if not models:
        raise ValueError("build_scene needs at least one object model")
    downsampled: Dict[int, np.ndarray] = {}
    n_clusters = int(rng.integers(config.cluster_range[0], config.cluster_range[1] + 1))
    clusters: List[Cluster] = []
    used = 0
    for _ in range(n_clusters):
        remaining = config.budget - 1 - used
        if remaining < 1:
            logger.debug("point budget exhausted after %d clusters", len(clusters))
            break
        model_idx = int(rng.integers(len(models)))
        model = models[model_idx]
        if model_idx not in downsampled:
            downsampled[model_idx] = voxel_downsample(model.points, config.voxel_size)
        cloud = downsampled[model_idx]
        n_i = int(rng.integers(config.points_range[0], config.points_range[1] + 1))
        n_i = min(n_i, len(cloud), remaining)
        chosen = np.sort(rng.choice(len(cloud), size=n_i, replace=False))
        local = cloud[chosen]
        rotation = random_rotation(rng)
        centroid = region.sample_point(rng)
        world = rotation.apply(local - local.mean(axis=0)) + centroid
        clusters.append(Cluster(object_id=model.id, pose=Pose.from_rotation(rotation, centroid), points=world))
        used += n_i
    return Scene(region=region, clusters=tuple(clusters), budget=config.budget)


def spherical_flip(points_cam, radius: float) -> np.ndarray:
    """p -> p + 2 (R - ||p||) p / ||p||, the inversion used by HPR."""
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(pts, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("spherical flip is undefined for a point at the camera origin")
    if len(norms) and radius < float(norms.max()):
        raise ValueError(f"flip radius R={radius} is below the farthest point distance {float(norms.max())}")
    return pts + 2.0 * (radius - norms)[:, None] * pts / norms[:, None]


def _affine_rank(centered: np.ndarray) -> Tuple[int, np.ndarray]:
    """Numerical rank of a centered point set and its principal axes."""
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) == 0 or s[0] == 0.0:
        return 0, vt
    return int(np.sum(s > DEGENERACY_EPS * s[0])), vt


def convex_hull_3d(points) -> HullVertices:
    """
    Vertex indices of the convex hull (qhull).

    Coplanar or collinear inputs fall back to the hull of the projection onto
    their principal axes and are flagged degenerate.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("convex hull of an empty point set")
    centered = pts - pts.mean(axis=0)
    rank, axes = _affine_rank(centered)
    if rank == 3 and len(pts) >= 4:
        try:
            return HullVertices(frozenset(int(i) for i in ConvexHull(pts).vertices), False)
        except QhullError:
            logger.debug("qhull rejected %d points as degenerate, using planar fallback", len(pts))
            rank = 2
    if rank >= 2 and len(pts) >= 3:
        planar = centered @ axes[:2].T
        try:
            return HullVertices(frozenset(int(i) for i in ConvexHull(planar).vertices), True)
        except QhullError:
            rank = 1
    if rank >= 1:
        line = centered @ axes[0]
        return HullVertices(frozenset({int(np.argmin(line)), int(np.argmax(line))}), True)
    return HullVertices(frozenset({0}), True)


def hidden_points_removal(points_cam, params: HprParams = HprParams()) -> FrozenSet[int]:
    """
    Indices of points visible from the camera origin.

    Points in front of the camera are spherically flipped with R = gamma * max ||p||;
    those whose images are vertices of the hull of the flipped set plus the
    origin are visible.
    """
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    front = np.flatnonzero(pts[:, 2] > 0.0)
    if len(front) == 0:
        return frozenset()
    sel = pts[front]
    radius = params.gamma * float(np.max(np.linalg.norm(sel, axis=1)))
    flipped = spherical_flip(sel, radius)
    hull = convex_hull_3d(np.vstack([flipped, np.zeros((1, 3))]))
    origin = len(sel)
    return frozenset(int(front[i]) for i in hull.indices if i != origin)


def in_frustum(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Boolean mask of camera-frame points inside the depth range and the image."""
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    mask = (z > intr.z_near) & (z < intr.z_far)
    safe_z = np.where(mask, z, 1.0)
    u = intr.fx * pts[:, 0] / safe_z + intr.cx
    v = intr.fy * pts[:, 1] / safe_z + intr.cy
    return mask & (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)


@dataclass(frozen=True, eq=False)
class ClusterShell:
    """
    Convex hull of one cluster (world frame).

    ``normals``/``offsets`` describe the facets as n . x <= offset inside;
    ``point_normals`` holds a unit outward normal per cluster point (hull
    vertices get the angle-weighted mean of their facet normals, other points
    the normal of their nearest facets).
    """
    normals: np.ndarray
    offsets: np.ndarray
    point_normals: np.ndarray
    center: np.ndarray
    radius: float
    convex: bool


def _vertex_pseudo_normals(points: np.ndarray, hull: ConvexHull) -> Tuple[np.ndarray, np.ndarray]:
    acc = np.zeros_like(points)
    tri = points[hull.simplices]
    facet_normals = hull.equations[:, :3]
    for k in range(3):
        a = tri[:, (k + 1) % 3] - tri[:, k]
        b = tri[:, (k + 2) % 3] - tri[:, k]
        cos = np.einsum("ij,ij->i", a, b) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
        angle = np.arccos(np.clip(cos, -1.0, 1.0))
        np.add.at(acc, hull.simplices[:, k], angle[:, None] * facet_normals)
    is_vertex = np.zeros(len(points), dtype=bool)
    is_vertex[hull.vertices] = True
    return acc, is_vertex


def cluster_shell(points) -> Optional[ClusterShell]:
    """Hull, facet planes and per-point outward normals; None for fewer than 4 points or a flat set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4:
        return None
    center = pts.mean(axis=0)
    rank, _ = _affine_rank(pts - center)
    if rank < 3:
        return None
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return None
    normals = hull.equations[:, :3]
    offsets = -hull.equations[:, 3]
    radius = float(np.max(np.linalg.norm(pts - center, axis=1)))
    tol = SHELL_TOLERANCE * radius
    dist = pts @ normals.T - offsets[None, :]
    nearest = dist.max(axis=1)
    convex = bool(np.mean(nearest >= -tol) >= CONVEX_FRACTION)

    point_normals = (dist >= (nearest - tol)[:, None]).astype(float) @ normals
    pseudo, is_vertex = _vertex_pseudo_normals(pts, hull)
    point_normals[is_vertex] = pseudo[is_vertex]
    lengths = np.linalg.norm(point_normals, axis=1, keepdims=True)
    fallback = normals[np.argmax(dist, axis=1)]
    point_normals = np.where(lengths > 0, point_normals / np.maximum(lengths, 1e-300), fallback)
    return ClusterShell(normals, offsets, point_normals, center, radius, convex)


def _inside_length(shell: ClusterShell, origin: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Length of every segment origin -> ends[k] that runs inside the shell's hull."""
    seg = ends - origin
    length = np.linalg.norm(seg, axis=1)
    out = np.zeros(len(ends))
    # bounding-sphere cull: closest approach of each segment to the hull center
    t_close = np.clip(((shell.center - origin) @ seg.T) / np.maximum(length ** 2, 1e-300), 0.0, 1.0)
    gap = np.linalg.norm(origin + t_close[:, None] * seg - shell.center, axis=1)
    near = np.flatnonzero(gap < shell.radius)
    if len(near) == 0:
        return out
    a = seg[near] @ shell.normals.T
    b = shell.offsets - shell.normals @ origin
    eps = 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = b[None, :] / a
    t_lo = np.max(np.where(a < -eps, ratio, -np.inf), axis=1, initial=-np.inf)
    t_hi = np.min(np.where(a > eps, ratio, np.inf), axis=1, initial=np.inf)
    parallel_out = np.any((np.abs(a) <= eps) & (b[None, :] < 0), axis=1)
    t_lo = np.maximum(t_lo, 0.0)
    t_hi = np.minimum(t_hi, 1.0)
    inside = np.where(parallel_out, 0.0, np.maximum(t_hi - t_lo, 0.0))
    out[near] = inside * length[near]
    return out


def occlusion_mask(points, labels, camera: Pose, params: HprParams = HprParams(),
                   shells: Optional[Sequence[Optional[ClusterShell]]] = None,
                   candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-cluster visibility of ``points[candidates]`` (world frame) from ``camera``.

    ``labels`` gives the cluster of every point; ``shells[k]`` must be built from
    the points of cluster k in their order in ``points`` (computed when omitted).
    A point is hidden when a sight line runs more than ``occluder_tolerance``
    inside another cluster's hull, or when its own cluster hides it: by the
    hull normal test for convex clusters, by HPR otherwise.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(pts):
        raise ValueError(f"{len(labels)} labels for {len(pts)} points")
    cand = np.arange(len(pts)) if candidates is None else np.asarray(candidates, dtype=np.int64).reshape(-1)
    visible = np.ones(len(cand), dtype=bool)
    if len(cand) == 0:
        return visible
    n_clusters = int(labels.max()) + 1 if len(labels) else 0
    members = [np.flatnonzero(labels == k) for k in range(n_clusters)]
    local = np.empty(len(pts), dtype=np.int64)
    for idx in members:
        local[idx] = np.arange(len(idx))
    if shells is None:
        shells = [cluster_shell(pts[idx]) for idx in members]
    if len(shells) != n_clusters:
        raise ValueError(f"{len(shells)} shells for {n_clusters} clusters")

    eye = camera.translation
    cand_labels = labels[cand]
    sin_margin = math.sin(params.grazing_margin)
    for k in range(n_clusters):
        own = np.flatnonzero(cand_labels == k)
        if len(own) == 0:
            continue
        shell = shells[k]
        if shell is not None and shell.convex:
            rows = cand[own]
            to_eye = eye - pts[rows]
            facing = np.einsum("ij,ij->i", shell.point_normals[local[rows]], to_eye)
            visible[own] &= facing > sin_margin * np.linalg.norm(to_eye, axis=1)
        else:
            kept = hidden_points_removal(camera.to_camera(pts[cand[own]]), params)
            self_visible = np.zeros(len(own), dtype=bool)
            self_visible[list(kept)] = True
            visible[own] &= self_visible
    for k, shell in enumerate(shells):
        if shell is None:
            continue
        others = np.flatnonzero((cand_labels != k) & visible)
        if len(others) == 0:
            continue
        blocked = _inside_length(shell, eye, pts[cand[others]]) > params.occluder_tolerance
        visible[others[blocked]] = False
    return visible


def visible_indices(scene: Scene, camera: Pose, intr: CameraIntrinsics,
                    hpr: HprParams = HprParams(), use_hpr: bool = True) -> np.ndarray:
    """Sorted scene point ids seen by ``camera``: frustum filter, then occlusion unless disabled."""
    pts_cam = camera.to_camera(scene.points)
    fov = np.flatnonzero(in_frustum(pts_cam, intr))
    if len(fov) == 0 or not use_hpr:
        return fov
    if hpr.per_cluster:
        shells = [c.shell for c in scene.clusters]
        mask = occlusion_mask(scene.points, scene.point_clusters, camera, hpr, shells=shells, candidates=fov)
        return fov[mask]
    kept = hidden_points_removal(pts_cam[fov], hpr)
    return np.array(sorted(int(fov[i]) for i in kept), dtype=np.int64)


# --- object model sources ---

def load_object_model(path) -> ObjectModel:
    """
    Reads an object point cloud.

    ``.bin`` files hold little-endian float32 (x, y, z) triplets; any other
    extension is plain text with one "x y z" triple per line and ``#`` comments.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".bin":
            raw = np.fromfile(path, dtype="<f4")
            if raw.size == 0 or raw.size % 3:
                raise ValueError(f"expected a multiple of 3 float32 values, got {raw.size}")
            pts = raw.reshape(-1, 3).astype(float)
        else:
            rows = []
            for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.replace(",", " ").split()
                if len(parts) != 3:
                    raise ValueError(f"line {line_no}: expected 3 values, got {len(parts)}")
                rows.append([float(x) for x in parts])
            pts = np.array(rows, dtype=float)
        return ObjectModel(id=path.stem, points=pts)
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read object model {path}: {e}") from e


def load_models_dir(directory) -> List[ObjectModel]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Model directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".xyz", ".txt", ".bin"))
    if not files:
        raise DatasetError(f"No object model files (.xyz/.txt/.bin) in {directory}")
    return [load_object_model(p) for p in files]


def save_object_model(model: ObjectModel, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".bin":
        model.points.astype("<f4").tofile(path)
    else:
        np.savetxt(path, model.points, fmt="%.6f")


def _sphere_surface(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng: np.random.Generator, n: int, half: np.ndarray) -> np.ndarray:
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    faces = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    signs = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), faces] = signs
    return pts * half


def _cylinder_surface(rng: np.random.Generator, n: int, radius: float, height: float) -> np.ndarray:
    side = 2 * math.pi * radius * height
    caps = 2 * math.pi * radius ** 2
    on_side = rng.uniform(size=n) < side / (side + caps)
    phi = rng.uniform(0.0, 2 * math.pi, size=n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-height / 2, height / 2, size=n),
                 rng.choice([-height / 2, height / 2], size=n))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def primitive_models(count: int, rng: np.random.Generator, points_per_model: int = 600) -> List[ObjectModel]:
    """Chmury punktów powierzchni kul, prostopadłościanów i walców w skali 5-8 cm."""
    if count < 1:
        raise ValueError("need at least one primitive model")
    models = []
    for i in range(count):
        kind = ("sphere", "box", "cylinder")[i % 3]
        size = rng.uniform(0.05, 0.08)
        if kind == "sphere":
            pts = _sphere_surface(rng, points_per_model, size / 2)
        elif kind == "box":
            pts = _box_surface(rng, points_per_model, rng.uniform(0.5, 1.0, size=3) * size / 2)
        else:
            pts = _cylinder_surface(rng, points_per_model, size / 3, size)
        models.append(ObjectModel(id=f"{kind}_{i:02d}", points=pts))
    return models
