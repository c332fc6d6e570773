"""
Intra-/inter-cluster graph over matched keypoints.

Node order: for each cluster (ascending id) its members sorted by point id,
followed by a virtual center node carrying the mean of the members' raw
channels. Members are fully connected to each other and to their center;
centers are fully connected to each other.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from servo_trainer.errors import UnservoableFrameError
from servo_trainer.observation import ObservationPair

# Raw node channels, in column order.
RAW_CHANNELS = ("current_x", "current_y", "target_x", "target_y", "current_z", "target_z")
POSITION_CHANNELS = slice(0, 4)
DEPTH_CHANNELS = slice(4, 6)


@dataclass(frozen=True, eq=False)
class ServoGraph:
    """
    Graph consumed by the controller network.

    Attributes:
        raw: (n, 6) node channels, see RAW_CHANNELS.
        cluster_of: (n,) cluster id of every node.
        is_center: (n,) True for the virtual center nodes.
        point_ids: (n,) current point id per member node, -1 for centers.
        center_of: (n,) node index of the center of each node's cluster.
        intra_edges / inter_edges: (E, 2) directed (src, dst) pairs, both directions present.
        cluster_index: (cluster id, start, stop) node ranges; the center is the last node of each range.
    """
    raw: np.ndarray
    cluster_of: np.ndarray
    is_center: np.ndarray
    point_ids: np.ndarray
    center_of: np.ndarray
    intra_edges: np.ndarray
    inter_edges: np.ndarray
    cluster_index: Tuple[Tuple[int, int, int], ...]

    @property
    def node_count(self) -> int:
        return int(len(self.raw))

    @property
    def blocks(self) -> List[Tuple[int, int]]:
        return [(start, stop) for _, start, stop in self.cluster_index]

    @property
    def center_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.is_center)

    def digest(self) -> str:
        """Stable hash of the graph content, for golden comparisons."""
        h = hashlib.sha256()
        for arr in (self.raw, self.cluster_of, self.is_center, self.point_ids,
                    self.intra_edges, self.inter_edges):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class GraphStats:
    nodes: int
    intra: int
    inter: int
    cluster_sizes: Tuple[int, ...]


def _full_pairs(nodes: np.ndarray) -> np.ndarray:
    if len(nodes) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    src, dst = np.meshgrid(nodes, nodes, indexing="ij")
    mask = ~np.eye(len(nodes), dtype=bool)
    return np.column_stack([src[mask], dst[mask]]).astype(np.int64)


def build_graph(pair: ObservationPair) -> ServoGraph:
    """Builds the servo graph for one observation pair; raises UnservoableFrameError without matches."""
    if not pair.matches:
        raise UnservoableFrameError("observation has no matched keypoints")
    arr = pair.match_arrays()
    order = np.lexsort((arr["target_id"], arr["current_id"], arr["cluster"]))
    member_raw = np.column_stack([arr["current_xy"], arr["target_xy"],
                                  arr["current_z"], arr["target_z"]])[order]
    member_cluster = arr["cluster"][order]
    member_ids = arr["current_id"][order]

    raw_rows, cluster_rows, center_rows, id_rows, center_of = [], [], [], [], []
    intra, centers, cluster_index = [], [], []
    start = 0
    for cid in np.unique(member_cluster):
        sel = member_cluster == cid
        members = member_raw[sel]
        k = len(members)
        center = start + k
        raw_rows.append(members)
        raw_rows.append(members.mean(axis=0, keepdims=True))
        cluster_rows.append(np.full(k + 1, cid, dtype=np.int64))
        center_rows.append(np.r_[np.zeros(k, dtype=bool), True])
        id_rows.append(np.r_[member_ids[sel], -1])
        center_of.append(np.full(k + 1, center, dtype=np.int64))
        member_nodes = np.arange(start, center, dtype=np.int64)
        intra.append(_full_pairs(member_nodes))
        spokes = np.column_stack([member_nodes, np.full(k, center, dtype=np.int64)])
        intra.append(spokes)
        intra.append(spokes[:, ::-1])
        centers.append(center)
        cluster_index.append((int(cid), start, center + 1))
        start = center + 1

    return ServoGraph(
        raw=np.vstack(raw_rows),
        cluster_of=np.concatenate(cluster_rows),
        is_center=np.concatenate(center_rows),
        point_ids=np.concatenate(id_rows).astype(np.int64),
        center_of=np.concatenate(center_of),
        intra_edges=np.vstack(intra).astype(np.int64),
        inter_edges=_full_pairs(np.array(centers, dtype=np.int64)),
        cluster_index=tuple(cluster_index),
    )


def graph_stats(g: ServoGraph) -> GraphStats:
    """Exact node/edge counts and member count per cluster."""
    sizes = tuple(int(stop - start - 1) for _, start, stop in g.cluster_index)
    return GraphStats(nodes=g.node_count, intra=int(len(g.intra_edges)),
                      inter=int(len(g.inter_edges)), cluster_sizes=sizes)
