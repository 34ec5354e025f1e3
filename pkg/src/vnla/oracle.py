"""Privileged actors: navigation teacher, help-requesting teacher and the advisor."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from vnla.env import (
    HALF_FOV,
    EnvironmentGraph,
    NavAction,
    Pose,
    transition,
    view_offsets,
)
from vnla.language import Subgoal, render_subgoal

ALL_RULES = frozenset("abcde")
LN6 = math.log(6.0)


class NoPathError(RuntimeError):
    pass


class AskAction(enum.IntEnum):
    DO_NOTHING = 0
    REQUEST = 1
    START = 2


class AdvisorMode(str, enum.Enum):
    INDIRECT = "indirect"
    DIRECT_WITH_SUBGOAL = "direct_sub"
    DIRECT_NO_SUBGOAL = "direct_nosub"

    @classmethod
    def parse(cls, value) -> "AdvisorMode":
        if isinstance(value, cls):
            return value
        aliases = {"direct_with_subgoal": "direct_sub", "direct_no_subgoal": "direct_nosub"}
        return cls(aliases.get(value, value))


@dataclass
class TeacherContext:
    """Everything the teachers may look at during one step.

    ``env``, ``pose``, ``goals`` and ``original_path`` are privileged; the
    help-requesting rules b, c and d never touch them.
    """

    tentative_nav_dist: np.ndarray
    t: int
    T_hat: int
    b: int
    stay_counter: int = 0
    env: EnvironmentGraph | None = None
    pose: Pose | None = None
    goals: frozenset = field(default_factory=frozenset)
    original_path: tuple[int, ...] = ()

    def __post_init__(self):
        dist = np.asarray(self.tentative_nav_dist, dtype=float)
        if dist.shape != (6,) or abs(dist.sum() - 1.0) > 1e-6 or np.any(dist < 0):
            raise ValueError("tentative_nav_dist must be a 6-way probability vector")
        if self.b < 0 or not 1 <= self.t <= self.T_hat:
            raise ValueError(f"invalid step/budget: t={self.t} T_hat={self.T_hat} b={self.b}")
        self.tentative_nav_dist = dist


def shortest_path(env: EnvironmentGraph, start: int, goals) -> list[int]:
    env.check_viewpoint(start)
    path = [start]
    v = start
    while True:
        nxt = env.next_hop(v, goals)
        if nxt is None:
            if math.isinf(env.goal_distances(goals)[v]):
                raise NoPathError(f"no path from {start} to {sorted(goals)} in {env.env_id}")
            return path
        path.append(nxt)
        v = nxt


def teacher_action(env: EnvironmentGraph, pose: Pose, goals) -> NavAction:
    """Rotate until ``forward`` would follow the shortest path, then go; stop at a goal."""
    if pose.viewpoint in goals:
        return NavAction.STOP
    nxt = env.next_hop(pose.viewpoint, goals)
    if nxt is None:
        raise NoPathError(f"viewpoint {pose.viewpoint} cannot reach {sorted(goals)}")
    if transition(pose, NavAction.FORWARD, env, goals).viewpoint == nxt:
        return NavAction.FORWARD
    h_off, v_off = view_offsets(env, pose, env.positions[nxt])
    if abs(h_off) > HALF_FOV + 1e-9:
        # h_off lies in (-180, 180]; a 180 degree offset turns right
        return NavAction.RIGHT if h_off > 0 else NavAction.LEFT
    return NavAction.UP if v_off > 0 else NavAction.DOWN


def nav_teacher(ctx: TeacherContext) -> NavAction:
    return teacher_action(ctx.env, ctx.pose, ctx.goals)


def teacher_rollout(env: EnvironmentGraph, pose: Pose, goals, max_steps: int = 1000
                    ) -> list[NavAction]:
    """Teacher actions from ``pose`` up to and including ``stop``."""
    actions = []
    for _ in range(max_steps):
        a = teacher_action(env, pose, goals)
        actions.append(a)
        if a == NavAction.STOP:
            return actions
        pose = transition(pose, a, env, goals)
    raise NoPathError(f"teacher did not stop within {max_steps} steps")


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _deviation(ctx: TeacherContext, metric: str) -> float:
    v = ctx.pose.viewpoint
    path = np.asarray(ctx.original_path, dtype=int)
    if metric == "geodesic":
        return float(ctx.env.all_pairs[v, path].min())
    diffs = ctx.env.positions[path] - ctx.env.positions[v]
    return float(np.sqrt((diffs * diffs).sum(axis=1)).min())


def fired_rules(ctx: TeacherContext, enabled_rules=ALL_RULES, delta: float = 8.0,
                epsilon: float = 1.0, mu: int = 9, deviation: str = "euclidean") -> set[str]:
    rules = set(enabled_rules)
    unknown = rules - ALL_RULES
    if unknown:
        raise ValueError(f"unknown help-requesting rules {sorted(unknown)}")
    fired = set()
    if "a" in rules and _deviation(ctx, deviation) > delta:
        fired.add("a")
    if "b" in rules and LN6 - entropy(ctx.tentative_nav_dist) < epsilon:
        fired.add("b")
    if "c" in rules and ctx.stay_counter >= mu:
        fired.add("c")
    if "d" in rules and ctx.b >= ctx.T_hat - ctx.t:
        fired.add("d")
    if ("e" in rules and ctx.pose.viewpoint in ctx.goals
            and int(np.argmax(ctx.tentative_nav_dist)) == NavAction.FORWARD):
        fired.add("e")
    return fired


def ask_teacher(ctx: TeacherContext, enabled_rules=ALL_RULES, delta: float = 8.0,
                epsilon: float = 1.0, mu: int = 9, deviation: str = "euclidean") -> AskAction:
    """Request iff any enabled rule fires. Budget gating happens in the caller."""
    if fired_rules(ctx, enabled_rules, delta, epsilon, mu, deviation):
        return AskAction.REQUEST
    return AskAction.DO_NOTHING


@dataclass(frozen=True)
class InterventionResponse:
    actions: tuple[NavAction, ...]
    text: str | None
    mode: AdvisorMode

    @property
    def subgoal(self) -> Subgoal | None:
        return None if self.text is None else Subgoal(self.actions, self.text)


def advisor(env: EnvironmentGraph, pose: Pose, goals, k: int, mode="indirect"
            ) -> InterventionResponse:
    """Describe the teacher's next ``k`` actions (padded with ``stop`` after a stop)."""
    if k < 1:
        raise ValueError("k must be positive")
    mode = AdvisorMode.parse(mode)
    actions: list[NavAction] = []
    while len(actions) < k:
        a = teacher_action(env, pose, goals)
        actions.append(a)
        if a == NavAction.STOP:
            actions.extend([NavAction.STOP] * (k - len(actions)))
            break
        pose = transition(pose, a, env, goals)
    text = None if mode == AdvisorMode.DIRECT_NO_SUBGOAL else render_subgoal(actions)
    return InterventionResponse(tuple(actions), text, mode)
