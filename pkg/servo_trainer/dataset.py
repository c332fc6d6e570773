"""
Dataset files: scenes and teacher episodes packed into one container.

All episodes share flat blocks indexed by offsets, so a file holds a fixed
number of blocks regardless of its size:

    scenes/points, scenes/cluster_sizes, scenes/cluster_poses, scenes/cluster_offsets, scenes/budget
    episodes/<match column>         one row per matched keypoint over all steps
    episodes/step_offsets           match rows of step s are [step_offsets[s], step_offsets[s + 1])
    episodes/episode_offsets        steps of episode e are [episode_offsets[e], episode_offsets[e + 1])
    episodes/twists, episodes/poses one row per step
    episodes/targets, episodes/scene_index, episodes/level   one row per episode
    goals/<frame column>            full target frame of every episode, rows of episode e are
                                    [goals/offsets[e], goals/offsets[e + 1])
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from components.containers import ContainerError, read_container, write_container
from servo_trainer.errors import DatasetError
from servo_trainer.geometry import CylinderRegion, DeviationLevel, Pose
from servo_trainer.observation import Keypoint, ObservationPair
from servo_trainer.scene import Cluster, Scene
from servo_trainer.training import TrainingEpisode

logger = logging.getLogger(__name__)

DATASET_KIND = "servo-dataset"
_LEVELS = [level.name for level in DeviationLevel]
_FLOAT_COLUMNS = ("current_xy", "target_xy", "current_z", "target_z", "current_depth", "target_depth")
_INT_COLUMNS = ("cluster", "current_id", "target_id")
_GOAL_COLUMNS = ("xy", "z", "depth", "point_id", "cluster")


@dataclass
class Dataset:
    scenes: List[Scene]
    episodes: List[TrainingEpisode]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def step_count(self) -> int:
        return int(sum(len(e) for e in self.episodes))


def _offsets(lengths: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(lengths, dtype=np.int64)]).astype(np.int64)


def _scene_blocks(scenes: Sequence[Scene]) -> Dict[str, np.ndarray]:
    clusters = [c for s in scenes for c in s.clusters]
    return {
        "scenes/points": np.vstack([c.points for c in clusters]) if clusters else np.zeros((0, 3)),
        "scenes/cluster_sizes": np.array([len(c.points) for c in clusters], dtype=np.int64),
        "scenes/cluster_poses": (np.array([c.pose.as_vector() for c in clusters]) if clusters
                                 else np.zeros((0, 7))),
        "scenes/cluster_offsets": _offsets([len(s.clusters) for s in scenes]),
        "scenes/budget": np.array([s.budget for s in scenes], dtype=np.int64),
    }


def _frame_columns(frame: Sequence[Keypoint]) -> Dict[str, np.ndarray]:
    return {
        "xy": np.array([k.xy for k in frame], dtype=float).reshape(-1, 2),
        "z": np.array([k.z_norm for k in frame], dtype=float),
        "depth": np.array([k.depth for k in frame], dtype=float),
        "point_id": np.array([k.point_id for k in frame], dtype=np.int64),
        "cluster": np.array([k.cluster_id for k in frame], dtype=np.int64),
    }


def _goal_blocks(episodes: Sequence[TrainingEpisode]) -> Dict[str, np.ndarray]:
    frames = [_frame_columns(e.pairs[0].target) for e in episodes]
    blocks: Dict[str, np.ndarray] = {"goals/offsets": _offsets([len(f["z"]) for f in frames])}
    for name in _GOAL_COLUMNS:
        if frames:
            blocks[f"goals/{name}"] = np.concatenate([f[name] for f in frames], axis=0)
        else:
            blocks[f"goals/{name}"] = np.zeros((0, 2) if name == "xy" else (0,))
    return blocks


def _episode_blocks(episodes: Sequence[TrainingEpisode]) -> Dict[str, np.ndarray]:
    columns: Dict[str, List[np.ndarray]] = {name: [] for name in _FLOAT_COLUMNS + _INT_COLUMNS}
    step_lengths: List[int] = []
    for episode in episodes:
        for pair in episode.pairs:
            arr = pair.match_arrays()
            for name in columns:
                columns[name].append(arr[name])
            step_lengths.append(len(pair.matches))
    blocks: Dict[str, np.ndarray] = {}
    for name, parts in columns.items():
        if parts:
            blocks[f"episodes/{name}"] = np.concatenate(parts, axis=0)
        else:
            width = (0, 2) if name.endswith("_xy") else (0,)
            blocks[f"episodes/{name}"] = np.zeros(width, dtype=np.int64 if name in _INT_COLUMNS else float)
    blocks["episodes/step_offsets"] = _offsets(step_lengths)
    blocks["episodes/episode_offsets"] = _offsets([len(e) for e in episodes])
    blocks["episodes/twists"] = (np.vstack([e.twists for e in episodes]) if episodes else np.zeros((0, 6)))
    blocks["episodes/poses"] = (np.vstack([e.poses for e in episodes]) if episodes else np.zeros((0, 7)))
    blocks["episodes/targets"] = (np.array([e.target.as_vector() for e in episodes]) if episodes
                                  else np.zeros((0, 7)))
    blocks["episodes/scene_index"] = np.array([e.scene_index for e in episodes], dtype=np.int64)
    blocks["episodes/level"] = np.array([_LEVELS.index(e.level.name) for e in episodes], dtype=np.int64)
    return blocks


def write_dataset(path, scenes: Sequence[Scene], episodes: Sequence[TrainingEpisode],
                  meta: Mapping[str, Any]) -> None:
    """Writes a dataset; ``meta`` (config, seed, counts) lands in the manifest."""
    blocks = _scene_blocks(scenes)
    blocks.update(_episode_blocks(episodes))
    blocks.update(_goal_blocks(episodes))
    region = scenes[0].region if scenes else CylinderRegion()
    manifest = dict(meta)
    manifest.update({
        "kind": DATASET_KIND,
        "scene_count": len(scenes),
        "episode_count": len(episodes),
        "step_count": int(sum(len(e) for e in episodes)),
        "region": {"radius": region.radius, "height": region.height, "center": region.center.tolist()},
        "cluster_objects": [c.object_id for s in scenes for c in s.clusters],
    })
    write_container(path, blocks, manifest)
    logger.info("dataset written to %s: %d scenes, %d episodes", path, len(scenes), len(episodes))


def _rebuild_goal(goals: Dict[str, np.ndarray], lo: int, hi: int) -> Tuple[Keypoint, ...]:
    return tuple(Keypoint(int(goals["point_id"][r]), int(goals["cluster"][r]),
                          (float(goals["xy"][r, 0]), float(goals["xy"][r, 1])),
                          float(goals["z"][r]), float(goals["depth"][r])) for r in range(lo, hi))


def _rebuild_pair(rows: Dict[str, np.ndarray], lo: int, hi: int,
                  goal: Optional[Tuple[Keypoint, ...]] = None) -> ObservationPair:
    """Pair of one stored step; with ``goal`` the matches point into the full target frame."""
    current, target = [], []
    for r in range(lo, hi):
        cluster = int(rows["cluster"][r])
        current.append(Keypoint(int(rows["current_id"][r]), cluster,
                                (float(rows["current_xy"][r, 0]), float(rows["current_xy"][r, 1])),
                                float(rows["current_z"][r]), float(rows["current_depth"][r])))
        target.append(Keypoint(int(rows["target_id"][r]), cluster,
                               (float(rows["target_xy"][r, 0]), float(rows["target_xy"][r, 1])),
                               float(rows["target_z"][r]), float(rows["target_depth"][r])))
    if goal is not None:
        index = {k.point_id: j for j, k in enumerate(goal)}
        return ObservationPair(tuple(current), goal, tuple((i, index[k.point_id]) for i, k in enumerate(target)))
    return ObservationPair(tuple(current), tuple(target), tuple((i, i) for i in range(hi - lo)))


def read_dataset(path) -> Dataset:
    try:
        blocks, meta = read_container(path)
    except ContainerError as e:
        raise DatasetError(f"Cannot read dataset {path}: {e}") from e
    if meta.get("kind") != DATASET_KIND:
        raise DatasetError(f"{path} is not a servo dataset (kind={meta.get('kind')!r})")
    try:
        reg = meta["region"]
        region = CylinderRegion(reg["radius"], reg["height"], np.array(reg["center"], dtype=float))
        objects = meta["cluster_objects"]
        points = blocks["scenes/points"].astype(float)
        sizes = blocks["scenes/cluster_sizes"]
        poses = blocks["scenes/cluster_poses"].astype(float)
        point_start = _offsets(sizes)
        cluster_offsets = blocks["scenes/cluster_offsets"]
        scenes: List[Scene] = []
        for s, budget in enumerate(blocks["scenes/budget"]):
            clusters = [Cluster(objects[c], Pose.from_vector(poses[c]), points[point_start[c]:point_start[c + 1]])
                        for c in range(int(cluster_offsets[s]), int(cluster_offsets[s + 1]))]
            scenes.append(Scene(region, tuple(clusters), int(budget)))

        rows = {name: blocks[f"episodes/{name}"].astype(float) for name in _FLOAT_COLUMNS}
        rows.update({name: blocks[f"episodes/{name}"].astype(np.int64) for name in _INT_COLUMNS})
        step_offsets = blocks["episodes/step_offsets"]
        episode_offsets = blocks["episodes/episode_offsets"]
        twists = blocks["episodes/twists"].astype(float)
        step_poses = blocks["episodes/poses"].astype(float)
        targets = blocks["episodes/targets"].astype(float)
        goals = None
        if "goals/offsets" in blocks:
            goals = {name: blocks[f"goals/{name}"] for name in _GOAL_COLUMNS}
            goals.update(xy=goals["xy"].astype(float), z=goals["z"].astype(float),
                         depth=goals["depth"].astype(float))
            goal_offsets = blocks["goals/offsets"]
        episodes: List[TrainingEpisode] = []
        for e, (scene_index, level) in enumerate(zip(blocks["episodes/scene_index"], blocks["episodes/level"])):
            first, last = int(episode_offsets[e]), int(episode_offsets[e + 1])
            goal = (None if goals is None
                    else _rebuild_goal(goals, int(goal_offsets[e]), int(goal_offsets[e + 1])))
            pairs = tuple(_rebuild_pair(rows, int(step_offsets[s]), int(step_offsets[s + 1]), goal)
                          for s in range(first, last))
            episodes.append(TrainingEpisode(int(scene_index), DeviationLevel[_LEVELS[int(level)]], pairs,
                                            twists[first:last], step_poses[first:last],
                                            Pose.from_vector(targets[e])))
    except (KeyError, IndexError, ValueError) as e:
        raise DatasetError(f"Dataset {path} is inconsistent: {e}") from e
    return Dataset(scenes, episodes, meta)


def summarize(dataset: Dataset) -> Dict[str, Any]:
    """Counts plus the point-budget validation (sum of n_i < N for every scene)."""
    used = [s.point_count for s in dataset.scenes]
    budgets = [s.budget for s in dataset.scenes]
    return {
        "scenes": len(dataset.scenes),
        "episodes": len(dataset.episodes),
        "steps": dataset.step_count,
        "clusters": int(sum(len(s.clusters) for s in dataset.scenes)),
        "max_points_used": int(max(used)) if used else 0,
        "budget_ok": all(u < b for u, b in zip(used, budgets)),
    }
