import numpy as np
import pytest

from vnla.env import EnvironmentGraph, ObjectInstance, Room
from vnla.worldgen import DatagenParams, WorldgenParams, generate_dataset, generate_environment


def make_env(points, edges, objects=(), env_id="fixture", labels=None, room_of=None):
    """Environment from 2D or 3D points; one room covering everything unless told otherwise."""
    pts = np.array([tuple(p) + (0.0,) * (3 - len(p)) for p in points], dtype=float)
    if room_of is None:
        room_of = [0] * len(pts)
    labels = labels or ["kitchen"]
    xmin, ymin = pts[:, 0].min() - 1, pts[:, 1].min() - 1
    xmax, ymax = pts[:, 0].max() + 1, pts[:, 1].max() + 1
    rooms = tuple(Room(i, lab, (xmin, ymin, xmax, ymax)) for i, lab in enumerate(labels))
    objs = tuple(ObjectInstance(*o) for o in objects)
    return EnvironmentGraph(env_id, pts, tuple(edges), rooms, tuple(room_of), objs)


def line_env(spacings, axis="y", **kw):
    """Viewpoints on a straight line; ``spacings`` are the edge lengths."""
    coords = np.concatenate([[0.0], np.cumsum(spacings)])
    pts = [(0.0, c) if axis == "y" else (c, 0.0) for c in coords]
    return make_env(pts, [(i, i + 1) for i in range(len(spacings))], **kw)


def random_dyadic_graph(rng, n_max=50):
    """Random graph whose edge lengths are multiples of 0.5 m (sums are exact in floating point).

    Viewpoints sit on a half-metre grid; edges only join axis-aligned pairs
    at most 5 m apart, so every length is a small dyadic rational.
    """
    n = int(rng.integers(2, n_max + 1))
    cells = rng.choice(24 * 24, size=n, replace=False)
    pts = [(0.5 * (c % 24), 0.5 * (c // 24)) for c in cells]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = abs(pts[i][0] - pts[j][0]), abs(pts[i][1] - pts[j][1])
            if (dx == 0 or dy == 0) and dx + dy <= 5.0 and rng.random() < 0.5:
                edges.append((i, j))
    return make_env(pts, edges, env_id=f"dyadic{n}")


def floyd_warshall(env):
    n = env.num_viewpoints
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0.0)
    for a, b in env.edges:
        w = float(np.linalg.norm(env.positions[a] - env.positions[b]))
        D[a, b] = D[b, a] = min(D[a, b], w)
    for k in range(n):
        D = np.minimum(D, D[:, k : k + 1] + D[k : k + 1, :])
    return D


def bellman_ford(env, sources):
    n = env.num_viewpoints
    dist = np.full(n, np.inf)
    dist[list(sources)] = 0.0
    src = np.array([a for a, b in env.edges] + [b for a, b in env.edges], dtype=int)
    dst = np.array([b for a, b in env.edges] + [a for a, b in env.edges], dtype=int)
    w = np.linalg.norm(env.positions[src] - env.positions[dst], axis=1)
    for _ in range(n):
        cand = dist[src] + w
        new = dist.copy()
        np.minimum.at(new, dst, cand)
        if np.array_equal(new, dist):
            break
        dist = new
    return dist


SMALL_WORLD = WorldgenParams(rooms=(4, 6), viewpoints_per_room=(3, 5))


@pytest.fixture(scope="session")
def small_corpus():
    """Twelve small environments (8 train / 2 dev / 2 test) and their dataset."""
    envs = [generate_environment(100 + i, SMALL_WORLD, env_id=f"env{i:03d}") for i in range(12)]
    split = {e.env_id: "train" if i < 8 else "dev" if i < 10 else "test" for i, e in enumerate(envs)}
    params = DatagenParams(eval_split_target=30)
    splits = generate_dataset(envs, split, params, np.random.default_rng(5))
    return {e.env_id: e for e in envs}, split, splits


# -- acceptance summary ----------------------------------------------------------

# criterion number -> measured detail, filled in by test_acceptance.py
ACCEPTANCE_DETAILS: dict = {}
_ACCEPTANCE_LINES: list = []


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = int(name.split("_")[2])
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        line = f"criterion {n:2d}: {verdict}  {ACCEPTANCE_DETAILS.get(n, '')}".rstrip()
        _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
