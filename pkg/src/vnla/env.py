"""Graph-world navigation environment.

Poses live on viewpoints of an undirected graph whose edges are at most 5 m
long. The agent rotates in 30 degree steps and moves with ``forward``, whose
target depends on the goal set (it follows the shortest path when the next
path viewpoint is roughly in view).
"""
from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from vnla import kernels

ENV_SCHEMA = "vnla-env/1"
MAX_EDGE_LENGTH = 5.0
NUM_HEADINGS = 12
STEP_DEGREES = 30.0
MIN_ELEVATION, MAX_ELEVATION = -1, 1
HALF_FOV = 30.0
_ANGLE_EPS = 1e-9


class InvalidEnvironmentError(ValueError):
    """Raised for malformed environments or references to unknown viewpoints."""


class NavAction(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3
    FORWARD = 4
    STOP = 5
    START = 6  # only ever the "previous action" at t = 0

    @property
    def word(self) -> str:
        return self.name.lower()


NUM_NAV_ACTIONS = 6


@dataclass(frozen=True)
class Pose:
    viewpoint: int
    heading: int = 0
    elevation: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heading", int(self.heading) % NUM_HEADINGS)
        object.__setattr__(
            self, "elevation", min(MAX_ELEVATION, max(MIN_ELEVATION, int(self.elevation)))
        )

    def to_list(self) -> list[int]:
        return [self.viewpoint, self.heading, self.elevation]

    @classmethod
    def from_list(cls, items) -> "Pose":
        return cls(int(items[0]), int(items[1]), int(items[2]))


@dataclass(frozen=True)
class Room:
    id: int
    label: str
    bbox: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def contains(self, pos) -> bool:
        x, y = pos[0], pos[1]
        return self.bbox[0] <= x <= self.bbox[2] and self.bbox[1] <= y <= self.bbox[3]


@dataclass(frozen=True)
class ObjectInstance:
    label: str
    position: tuple[float, float, float]
    room: int
    delegate: int


@dataclass(eq=False)
class EnvironmentGraph:
    """Immutable world description. Derived tables are memoised lazily."""

    env_id: str
    positions: np.ndarray  # (n, 3) metres
    edges: tuple[tuple[int, int], ...]
    rooms: tuple[Room, ...]
    room_of: tuple[int, ...]
    objects: tuple[ObjectInstance, ...] = ()
    _goal_cache: dict = field(default_factory=dict, repr=False)
    _obs_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.positions.setflags(write=False)
        self.edges = tuple(sorted((min(a, b), max(a, b)) for a, b in self.edges))
        self.room_of = tuple(int(r) for r in self.room_of)
        self.validate()

    @property
    def num_viewpoints(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.num_viewpoints
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidEnvironmentError("positions must have shape (n, 3)")
        if len(self.room_of) != n:
            raise InvalidEnvironmentError("room_of must name a room for every viewpoint")
        room_ids = [r.id for r in self.rooms]
        if room_ids != list(range(len(room_ids))):
            raise InvalidEnvironmentError("room ids must be 0..R-1 in order")
        if len(set(self.edges)) != len(self.edges):
            raise InvalidEnvironmentError("duplicate edge")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise InvalidEnvironmentError(f"bad edge ({a}, {b})")
            length = float(np.linalg.norm(self.positions[a] - self.positions[b]))
            if length > MAX_EDGE_LENGTH + 1e-9:
                raise InvalidEnvironmentError(f"edge ({a}, {b}) is {length:.3f} m long")
        for r in self.room_of:
            if not 0 <= r < len(self.rooms):
                raise InvalidEnvironmentError(f"unknown room {r}")
        for obj in self.objects:
            if not 0 <= obj.delegate < n:
                raise InvalidEnvironmentError(f"object delegate {obj.delegate} unknown")
            if self.room_of[obj.delegate] != obj.room:
                raise InvalidEnvironmentError(
                    f"delegate {obj.delegate} of {obj.label!r} is not in room {obj.room}"
                )

    def check_viewpoint(self, v: int) -> None:
        if not 0 <= v < self.num_viewpoints:
            raise InvalidEnvironmentError(f"unknown viewpoint {v} in {self.env_id}")

    # -- graph structure -------------------------------------------------

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.num_viewpoints
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for a, b in self.edges:
            nbrs[a].append(b)
            nbrs[b].append(a)
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices = []
        for v in range(n):
            nbrs[v].sort()
            indices.extend(nbrs[v])
            indptr[v + 1] = len(indices)
        indices = np.asarray(indices, dtype=np.int64)
        src = np.repeat(np.arange(n), np.diff(indptr))
        weights = np.linalg.norm(self.positions[src] - self.positions[indices], axis=1)
        return indptr, indices, np.ascontiguousarray(weights)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        indptr, indices, _ = self.csr
        return tuple(
            tuple(int(i) for i in indices[indptr[v] : indptr[v + 1]])
            for v in range(self.num_viewpoints)
        )

    @cached_property
    def neighbor_weights(self) -> tuple[tuple[float, ...], ...]:
        indptr, _, weights = self.csr
        return tuple(
            tuple(float(w) for w in weights[indptr[v] : indptr[v + 1]])
            for v in range(self.num_viewpoints)
        )

    def distances_from(self, sources) -> np.ndarray:
        indptr, indices, weights = self.csr
        return kernels.dijkstra(indptr, indices, weights, list(sources))

    @cached_property
    def all_pairs(self) -> np.ndarray:
        n = self.num_viewpoints
        out = np.empty((n, n))
        for v in range(n):
            out[v] = self.distances_from([v])
        out.setflags(write=False)
        return out

    def goal_distances(self, goals) -> np.ndarray:
        """Geodesic distance from every viewpoint to the nearest goal."""
        key = frozenset(int(g) for g in goals)
        cached = self._goal_cache.get(key)
        if cached is None:
            if not key:
                raise ValueError("goal set must be non-empty")
            for g in key:
                self.check_viewpoint(g)
            cached = self.distances_from(sorted(key))
            cached.setflags(write=False)
            if len(self._goal_cache) > 4096:
                self._goal_cache.clear()
            self._goal_cache[key] = cached
        return cached

    def next_hop(self, v: int, goals) -> int | None:
        """Next viewpoint on the lexicographically smallest shortest path, or None at a goal."""
        self.check_viewpoint(v)
        dist = self.goal_distances(goals)
        dv = dist[v]
        if dv == 0.0 or not math.isfinite(dv):
            return None
        tol = 1e-9 * (1.0 + dv)
        for u, w in zip(self.neighbors[v], self.neighbor_weights[v]):
            if abs(dv - (w + dist[u])) <= tol:
                return u
        raise AssertionError("shortest-path predecessor not found")  # pragma: no cover

    @cached_property
    def room_neighbors(self) -> tuple[frozenset, ...]:
        adj = [{r.id} for r in self.rooms]
        for a, b in self.edges:
            ra, rb = self.room_of[a], self.room_of[b]
            adj[ra].add(rb)
            adj[rb].add(ra)
        return tuple(frozenset(s) for s in adj)

    def rooms_with_label(self, label: str) -> list[Room]:
        return [r for r in self.rooms if r.label == label]

    def is_connected(self) -> bool:
        return bool(np.all(np.isfinite(self.distances_from([0])))) if self.num_viewpoints else True

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": ENV_SCHEMA,
            "env_id": self.env_id,
            "viewpoints": [
                {"id": v, "pos": [round(float(c), 3) for c in self.positions[v]],
                 "room": self.room_of[v]}
                for v in range(self.num_viewpoints)
            ],
            "edges": [list(e) for e in self.edges],
            "rooms": [
                {"id": r.id, "label": r.label, "bbox": [round(float(c), 3) for c in r.bbox]}
                for r in self.rooms
            ],
            "objects": [
                {"label": o.label, "pos": [round(float(c), 3) for c in o.position],
                 "room": o.room, "delegate": o.delegate}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentGraph":
        if data.get("schema") != ENV_SCHEMA:
            raise InvalidEnvironmentError(f"unsupported schema {data.get('schema')!r}")
        vps = data["viewpoints"]
        if [vp["id"] for vp in vps] != list(range(len(vps))):
            raise InvalidEnvironmentError("viewpoint ids must be 0..n-1 in order")
        return cls(
            env_id=data["env_id"],
            positions=np.array([vp["pos"] for vp in vps], dtype=np.float64).reshape(-1, 3),
            edges=tuple(tuple(e) for e in data["edges"]),
            rooms=tuple(Room(r["id"], r["label"], tuple(r["bbox"])) for r in data["rooms"]),
            room_of=tuple(vp["room"] for vp in vps),
            objects=tuple(
                ObjectInstance(o["label"], tuple(o["pos"]), o["room"], o["delegate"])
                for o in data["objects"]
            ),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EnvironmentGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- geometry -------------------------------------------------------------


def _wrap(deg: float) -> float:
    """Wrap an angle to (-180, 180]."""
    deg = math.fmod(deg, 360.0)
    if deg <= -180.0:
        deg += 360.0
    elif deg > 180.0:
        deg -= 360.0
    return deg


def view_offsets(env: EnvironmentGraph, pose: Pose, target) -> tuple[float, float]:
    """(horizontal, vertical) offset in degrees of a point from the view centre.

    Heading 0 looks along +y; positive horizontal offsets are to the right.
    """
    src = env.positions[pose.viewpoint]
    dx, dy, dz = target[0] - src[0], target[1] - src[1], target[2] - src[2]
    horiz = math.degrees(math.atan2(dx, dy))
    vert = math.degrees(math.atan2(dz, math.hypot(dx, dy)))
    return _wrap(horiz - pose.heading * STEP_DEGREES), vert - pose.elevation * STEP_DEGREES


def _angle_to_center(env: EnvironmentGraph, pose: Pose, target) -> float:
    th = math.radians(pose.heading * STEP_DEGREES)
    ph = math.radians(pose.elevation * STEP_DEGREES)
    view = (math.sin(th) * math.cos(ph), math.cos(th) * math.cos(ph), math.sin(ph))
    d = np.asarray(target, dtype=float) - env.positions[pose.viewpoint]
    norm = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if norm == 0.0:
        return 0.0
    cos = (view[0] * d[0] + view[1] * d[1] + view[2] * d[2]) / norm
    return math.acos(max(-1.0, min(1.0, cos)))


def forward_reaches(env: EnvironmentGraph, pose: Pose, target: int) -> bool:
    """Whether the path viewpoint ``target`` counts as reachable by ``forward``."""
    h_off, v_off = view_offsets(env, pose, env.positions[target])
    if abs(h_off) > HALF_FOV + _ANGLE_EPS:
        return False
    if abs(v_off) <= HALF_FOV + _ANGLE_EPS:
        return True
    # looking further up/down is impossible
    return (v_off > 0 and pose.elevation == MAX_ELEVATION) or (
        v_off < 0 and pose.elevation == MIN_ELEVATION
    )


def closest_to_center(env: EnvironmentGraph, pose: Pose) -> int | None:
    best, best_angle = None, math.inf
    for u in env.neighbors[pose.viewpoint]:  # ascending ids, so ties keep the smallest
        angle = _angle_to_center(env, pose, env.positions[u])
        if angle < best_angle - _ANGLE_EPS:
            best, best_angle = u, angle
    return best


def transition(pose: Pose, action: NavAction, env: EnvironmentGraph, goals) -> Pose:
    """Apply one navigation action."""
    env.check_viewpoint(pose.viewpoint)
    if not goals:
        raise ValueError("goal set must be non-empty")
    action = NavAction(action)
    if action == NavAction.LEFT:
        return Pose(pose.viewpoint, pose.heading - 1, pose.elevation)
    if action == NavAction.RIGHT:
        return Pose(pose.viewpoint, pose.heading + 1, pose.elevation)
    if action == NavAction.UP:
        return Pose(pose.viewpoint, pose.heading, pose.elevation + 1)
    if action == NavAction.DOWN:
        return Pose(pose.viewpoint, pose.heading, pose.elevation - 1)
    if action != NavAction.FORWARD:
        raise ValueError(f"{action.name} is not a movement action")
    nxt = env.next_hop(pose.viewpoint, goals)
    if nxt is None or not forward_reaches(env, pose, nxt):
        nxt = closest_to_center(env, pose)
        if nxt is None:
            return pose
    return Pose(nxt, pose.heading, pose.elevation)


def geodesic_distance(env: EnvironmentGraph, v: int, goals) -> float:
    env.check_viewpoint(v)
    return float(env.goal_distances(goals)[v])


# -- observations -----------------------------------------------------------


def _label_vector(label: str, feature_seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([feature_seed, zlib.crc32(label.encode()), 1])
    return rng.standard_normal(dim)


def observe(env: EnvironmentGraph, pose: Pose, feature_seed: int, dim: int = 64,
            texture_dim: int = 16, texture_scale: float = 0.5) -> np.ndarray:
    """Synthetic first-person features: visible objects plus a per-view texture block.

    Objects count as visible when inside the 60 degree horizontal field of view
    and located in the current room or a room directly connected to it.
    """
    env.check_viewpoint(pose.viewpoint)
    key = (feature_seed, dim, texture_dim, texture_scale, pose.viewpoint, pose.heading)
    cached = env._obs_cache.get(key)
    if cached is not None:
        return cached
    obj_dim = dim - texture_dim
    if obj_dim < 0:
        raise ValueError("texture_dim exceeds feature dimension")
    out = np.zeros(dim)
    visible_rooms = env.room_neighbors[env.room_of[pose.viewpoint]]
    src = env.positions[pose.viewpoint]
    for obj in env.objects:
        if obj.room not in visible_rooms:
            continue
        h_off, _ = view_offsets(env, pose, obj.position)
        if abs(h_off) > HALF_FOV + _ANGLE_EPS:
            continue
        dist = float(np.linalg.norm(np.asarray(obj.position) - src))
        out[:obj_dim] += _label_vector(obj.label, feature_seed, obj_dim) / (1.0 + dist)
    if texture_dim:
        rng = np.random.default_rng(
            [feature_seed, zlib.crc32(env.env_id.encode()), pose.viewpoint, pose.heading, 2]
        )
        out[obj_dim:] = texture_scale * rng.standard_normal(texture_dim)
    out.setflags(write=False)
    env._obs_cache[key] = out
    return out
