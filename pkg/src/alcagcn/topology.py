"""Skeleton graphs and the adjacency matrices used by the spatial graph convolution.

Matrix convention: ``A[i, j] == 1`` means joint ``j`` lies in the convolution
neighbourhood of joint ``i`` (row = receiving joint).
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import ContractError, ShapeError

PART_NAMES = ("head", "hands", "torso", "legs")
SAMPLING_STRATEGIES = ("both", "skeleton_only", "part_only")


class TopologyError(ContractError):
    pass


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center: int
    parts: dict[str, tuple[int, ...]]
    landmarks: dict[str, int] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        u = self.num_joints
        for a, b in self.edges:
            if not (0 <= a < u and 0 <= b < u) or a == b:
                raise TopologyError(f"bad edge ({a}, {b}) for {u} joints")
        if not 0 <= self.center < u:
            raise TopologyError("center joint out of range")
        covered = set().union(*map(set, self.parts.values())) if self.parts else set()
        if covered != set(range(u)):
            raise TopologyError(f"parts do not cover joints {sorted(set(range(u)) - covered)}")
        for a, b in self.edges:
            if not any(a in p and b in p for p in self.parts.values()):
                raise TopologyError(f"edge ({a}, {b}) is not inside any part")
        if not np.isfinite(hop_distances(self, self.center)).all():
            raise TopologyError("skeleton graph is not connected")

    def __eq__(self, other):
        if not isinstance(other, SkeletonGraph):
            return NotImplemented
        # part order matters: it fixes the adjacency and comparing-unit order
        return (self.num_joints, self.edges, self.center, tuple(self.parts.items()), self.landmarks, self.name) == (
            other.num_joints, other.edges, other.center, tuple(other.parts.items()), other.landmarks, other.name)

    def __hash__(self):
        return hash((self.num_joints, self.edges, self.center, tuple(self.parts.items())))

    @property
    def part_names(self) -> tuple[str, ...]:
        return tuple(self.parts)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self, i: int, within: frozenset[int] | None = None) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        if within is not None:
            out = [j for j in out if j in within]
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "SkeletonGraph":
        base = int(spec.get("index_base", 0))
        edges = tuple((int(a) - base, int(b) - base) for a, b in spec["edges"])
        order = spec.get("part_order", list(spec["parts"]))
        parts = {str(k): tuple(int(j) - base for j in spec["parts"][k]) for k in order}
        landmarks = {str(k): int(v) - base for k, v in spec.get("landmarks", {}).items()}
        return cls(
            num_joints=int(spec["num_joints"]),
            edges=edges,
            center=int(spec["center"]) - base,
            parts=parts,
            landmarks=landmarks,
            name=str(spec.get("name", "custom")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_joints": self.num_joints,
            "index_base": 0,
            "center": self.center,
            "edges": [list(e) for e in self.edges],
            "parts": {k: list(v) for k, v in self.parts.items()},
            "part_order": list(self.parts),
            "landmarks": dict(self.landmarks),
        }


def load_graph(path: str | Path) -> SkeletonGraph:
    """Load a topology definition (edge list, center, parts) from a JSON file."""
    with open(path) as fh:
        return SkeletonGraph.from_dict(json.load(fh))


def ntu_graph() -> SkeletonGraph:
    """The 25-joint NTU RGB+D layout shipped with the package."""
    text = resources.files("alcagcn.data").joinpath("ntu25.json").read_text()
    return SkeletonGraph.from_dict(json.loads(text))


def hop_distances(graph: SkeletonGraph, source: int, within=None) -> np.ndarray:
    """BFS hop counts from ``source``; ``inf`` where unreachable (optionally inside a joint subset)."""
    allowed = None if within is None else frozenset(within)
    dist = np.full(graph.num_joints, math.inf)
    if allowed is not None and source not in allowed:
        return dist
    dist[source] = 0
    queue = deque([source])
    while queue:
        i = queue.popleft()
        for j in graph.neighbors(i, allowed):
            if dist[j] == math.inf:
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


def shortest_path_distance(graph: SkeletonGraph, i: int, j: int, within=None) -> float:
    for v in (i, j):
        if not 0 <= v < graph.num_joints:
            raise ContractError(f"joint index {v} out of range")
    return float(hop_distances(graph, i, within)[j])


def build_global_relations(graph: SkeletonGraph, tie: str = "centripetal") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Root / centripetal / centrifugal neighbourhoods relative to the center joint.

    Neighbours at the same hop count to the center as the joint itself go to
    ``tie`` ("centripetal" or "centrifugal").
    """
    hop = hop_distances(graph, graph.center)
    if not np.isfinite(hop).all():
        raise TopologyError("center is not reachable from every joint")
    u = graph.num_joints
    root = np.eye(u)
    cp = np.zeros((u, u))
    cf = np.zeros((u, u))
    for i in range(u):
        for j in graph.neighbors(i):
            if hop[j] < hop[i]:
                cp[i, j] = 1.0
            elif hop[j] > hop[i]:
                cf[i, j] = 1.0
            elif tie == "centripetal":
                cp[i, j] = 1.0
            else:
                cf[i, j] = 1.0
    return root, cp, cf


def build_part_adjacency(graph: SkeletonGraph, part: str) -> np.ndarray:
    members = graph.parts[part]
    if not members:
        raise TopologyError(f"part {part!r} is empty")
    inside = frozenset(members)
    a = np.zeros((graph.num_joints, graph.num_joints))
    for i in members:
        d = hop_distances(graph, i, inside)
        for j in members:
            if d[j] <= 1:
                a[i, j] = 1.0
    return a


def normalize_adjacency(a_bar: np.ndarray) -> np.ndarray:
    """Symmetric degree normalisation; zero-degree rows/cols stay zero."""
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if a_bar.ndim != 2 or a_bar.shape[0] != a_bar.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a_bar.shape}")
    deg = a_bar.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    return inv_sqrt[:, None] * a_bar * inv_sqrt[None, :]


@dataclass(frozen=True)
class TopologySet:
    names: tuple[str, ...]
    raw: np.ndarray          # (K, U, U) binary
    normalized: np.ndarray   # (K, U, U)

    @property
    def k(self) -> int:
        return len(self.names)


def build_topology(graph: SkeletonGraph, sampling_strategy: str = "both", tie: str = "centripetal") -> TopologySet:
    """Adjacency stack for one spatial layer.

    ``skeleton_only`` gives the 3 relation matrices, ``part_only`` one matrix per
    body part, ``both`` the concatenation of the two.
    """
    if sampling_strategy not in SAMPLING_STRATEGIES:
        raise TopologyError(f"unknown sampling strategy {sampling_strategy!r}")
    names: list[str] = []
    mats: list[np.ndarray] = []
    if sampling_strategy in ("both", "skeleton_only"):
        names += ["root", "centripetal", "centrifugal"]
        mats += list(build_global_relations(graph, tie))
    if sampling_strategy in ("both", "part_only"):
        for p in graph.part_names:
            names.append(f"part:{p}")
            mats.append(build_part_adjacency(graph, p))
    raw = np.stack(mats)
    norm = np.stack([normalize_adjacency(m) for m in mats])
    return TopologySet(tuple(names), raw, norm)
