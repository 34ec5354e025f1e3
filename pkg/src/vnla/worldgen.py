"""Procedural houses and the dataset pipeline (buckets, start sampling, split sampling)."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vnla.env import EnvironmentGraph, ObjectInstance, Pose, Room
from vnla.oracle import teacher_rollout

DATA_SCHEMA = "vnla-data/1"
SPLITS_SCHEMA = "vnla-splits/1"
SPLIT_NAMES = ("train", "dev_seen", "dev_unseen", "test_seen", "test_unseen")


class GenerationError(RuntimeError):
    pass


# object labels per room type; "curtains" is deliberately plural
ROOM_OBJECTS = {
    "hallway": ["picture", "plant", "bench", "rug", "lamp", "clock"],
    "kitchen": ["sink", "oven", "refrigerator", "cup", "stool", "microwave", "kettle"],
    "bathroom": ["sink", "towel", "mirror", "toilet", "bathtub", "shower"],
    "bedroom": ["bed", "pillow", "lamp", "curtains", "wardrobe", "nightstand", "mirror"],
    "living room": ["sofa", "armchair", "television", "lamp", "plant", "fireplace", "cushion"],
    "dining room": ["table", "chair", "vase", "chandelier", "plate", "picture"],
    "office": ["desk", "chair", "computer", "bookshelf", "lamp", "printer"],
    "laundry room": ["washer", "dryer", "basket", "towel", "shelf"],
}
ROOM_WEIGHTS = {
    "bedroom": 3.0, "bathroom": 2.0, "kitchen": 1.0, "living room": 1.0,
    "dining room": 1.0, "office": 1.0, "laundry room": 0.5,
}
UNIQUE_ROOMS = {"kitchen", "living room", "dining room", "laundry room"}
PLURAL_LABELS = {"curtains"}

_IRREGULAR = {
    "shelf": "shelves", "bookshelf": "bookshelves", "knife": "knives", "leaf": "leaves",
    "loaf": "loaves", "half": "halves", "wolf": "wolves", "calf": "calves",
    "thief": "thieves", "wife": "wives", "life": "lives", "person": "people",
    "child": "children", "man": "men", "woman": "women", "foot": "feet",
    "tooth": "teeth", "mouse": "mice", "goose": "geese", "ox": "oxen",
    "cactus": "cacti", "fungus": "fungi", "radius": "radii", "sheep": "sheep",
    "fish": "fish", "deer": "deer", "series": "series", "species": "species",
    "stairs": "stairs", "glasses": "glasses", "scissors": "scissors",
    "clothes": "clothes", "curtains": "curtains",
}
_ALREADY_PLURAL = set(_IRREGULAR.values())


def pluralize(label: str) -> str:
    words = label.split()
    if not words:
        return label
    last = words[-1]
    if last in _IRREGULAR:
        plural = _IRREGULAR[last]
    elif last in _ALREADY_PLURAL:
        plural = last
    elif last.endswith(("s", "x", "z", "ch", "sh")):
        plural = last + "es"
    elif len(last) > 1 and last.endswith("y") and last[-2] not in "aeiou":
        plural = last[:-1] + "ies"
    else:
        plural = last + "s"
    return " ".join(words[:-1] + [plural])


def make_endgoal(object_label: str, count_singular: bool, room_label: str | None = None,
                 room_count: int = 0) -> str:
    if not object_label or (room_label is not None and not room_label):
        raise ValueError("labels must be non-empty")
    if count_singular:
        article = "an" if object_label[0] in "aeiou" else "a"
        obj = f"{article} {object_label}"
    else:
        obj = object_label
    if room_label is None:
        return f"find {obj}"
    if room_count < 1:
        raise ValueError("room_count must be >= 1 when a room label is given")
    if room_count == 1:
        return f"find {obj} in the {room_label}"
    return f"find {obj} in one of the {pluralize(room_label)}"


# -- environments -----------------------------------------------------------


@dataclass
class WorldgenParams:
    rooms: tuple[int, int] = (6, 9)  # total, including the hallway
    viewpoints_per_room: tuple[int, int] = (3, 6)
    objects_per_room: tuple[int, int] = (2, 4)
    room_width: tuple[float, float] = (3.5, 6.0)
    room_depth: tuple[float, float] = (3.5, 5.5)
    hallway_spacing: float = 2.4
    room_edge_radius: float = 3.2
    min_separation: float = 1.5
    outside_object_prob: float = 0.03

    @classmethod
    def from_dict(cls, data: dict) -> "WorldgenParams":
        out = cls(**data)
        for name in ("rooms", "viewpoints_per_room", "objects_per_room", "room_width", "room_depth"):
            setattr(out, name, tuple(getattr(out, name)))
        return out


def _check_range(name, rng_pair, lo):
    a, b = rng_pair
    if a < lo or b < a:
        raise GenerationError(f"infeasible {name} range {rng_pair}")


def _place_room_viewpoints(rng, bbox, n, door_xy, params):
    xmin, ymin, xmax, ymax = bbox
    margin = 0.6
    area = (xmax - xmin - 2 * margin) * (ymax - ymin - 2 * margin)
    sep = min(params.min_separation, 0.8 * math.sqrt(max(area, 0.0) / n))
    for _ in range(200):
        pts = [door_xy] if door_xy is not None else []
        tries = 0
        while len(pts) < n and tries < 400:
            tries += 1
            p = (rng.uniform(xmin + margin, xmax - margin), rng.uniform(ymin + margin, ymax - margin))
            if all(math.dist(p, q) >= sep for q in pts):
                pts.append(p)
        if len(pts) < n:
            continue
        pts = [(round(x, 3), round(y, 3)) for x, y in pts]
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)
                 if math.dist(pts[i], pts[j]) <= params.room_edge_radius]
        # connectivity check
        seen, stack = {0}, [0]
        while stack:
            i = stack.pop()
            for a, b in edges:
                for u, w in ((a, b), (b, a)):
                    if u == i and w not in seen:
                        seen.add(w)
                        stack.append(w)
        if len(seen) == n:
            return pts, edges
    raise GenerationError(f"could not place {n} connected viewpoints in room {bbox}")


def generate_environment(seed: int, params: WorldgenParams | None = None,
                         env_id: str | None = None) -> EnvironmentGraph:
    """A single-floor house: rooms on both sides of a straight hallway."""
    params = params or WorldgenParams()
    _check_range("rooms", params.rooms, 1)
    _check_range("viewpoints_per_room", params.viewpoints_per_room, 1)
    _check_range("objects_per_room", params.objects_per_room, 1)
    rng = np.random.default_rng(seed)
    env_id = env_id or f"env{seed}"
    n_rooms = int(rng.integers(params.rooms[0], params.rooms[1] + 1))

    positions: list[tuple[float, float]] = []
    room_of: list[int] = []
    edges: list[tuple[int, int]] = []
    rooms: list[Room] = []
    objects_spec: list[tuple[int, str]] = []

    if n_rooms == 1:
        label = _draw_room_labels(rng, 1)[0]
        w = rng.uniform(*params.room_width)
        d = rng.uniform(*params.room_depth)
        bbox = (0.0, 0.0, round(w, 3), round(d, 3))
        n = int(rng.integers(params.viewpoints_per_room[0], params.viewpoints_per_room[1] + 1))
        pts, local = _place_room_viewpoints(rng, bbox, n, None, params)
        rooms.append(Room(0, label, bbox))
        positions.extend(pts)
        room_of.extend([0] * n)
        edges.extend(local)
    else:
        labels = _draw_room_labels(rng, n_rooms - 1)
        sides = {"top": [], "bottom": []}
        for i, label in enumerate(labels):
            sides["top" if i % 2 == 0 else "bottom"].append(label)
        layout = []  # (label, bbox, door_x)
        lengths = []
        for side, side_labels in sides.items():
            x = 0.0
            for label in side_labels:
                w = round(rng.uniform(*params.room_width), 3)
                d = round(rng.uniform(*params.room_depth), 3)
                bbox = (x, 1.0, x + w, 1.0 + d) if side == "top" else (x, -1.0 - d, x + w, -1.0)
                door_x = round(rng.uniform(x + 1.0, x + w - 1.0), 3)
                layout.append((label, side, tuple(round(c, 3) for c in bbox), door_x))
                x += w
            lengths.append(x)
        hall_len = max(lengths)
        rooms.append(Room(0, "hallway", (0.0, -1.0, round(hall_len, 3), 1.0)))
        hx = 1.0
        hall_ids = []
        while hx <= hall_len - 0.5:
            hall_ids.append(len(positions))
            positions.append((round(hx, 3), round(float(rng.uniform(-0.2, 0.2)), 3)))
            room_of.append(0)
            hx += params.hallway_spacing + float(rng.uniform(-0.3, 0.3))
        edges.extend(zip(hall_ids[:-1], hall_ids[1:]))
        for label, side, bbox, door_x in layout:
            rid = len(rooms)
            rooms.append(Room(rid, label, bbox))
            n = int(rng.integers(params.viewpoints_per_room[0], params.viewpoints_per_room[1] + 1))
            door_y = bbox[1] + 0.6 if side == "top" else bbox[3] - 0.6
            pts, local = _place_room_viewpoints(rng, bbox, n, (door_x, round(door_y, 3)), params)
            base = len(positions)
            positions.extend(pts)
            room_of.extend([rid] * n)
            edges.extend((base + a, base + b) for a, b in local)
            door_hall = min(hall_ids, key=lambda h: (math.dist(positions[h], pts[0]), h))
            edges.append((door_hall, base))

    for room in rooms:
        pool = list(ROOM_OBJECTS[room.label])
        k = int(rng.integers(params.objects_per_room[0], params.objects_per_room[1] + 1))
        for idx in rng.choice(len(pool), size=min(k, len(pool)), replace=False):
            objects_spec.append((room.id, pool[int(idx)]))

    pos3 = np.array([(x, y, 0.0) for x, y in positions], dtype=np.float64).reshape(-1, 3)
    objects = []
    for rid, label in objects_spec:
        xmin, ymin, xmax, ymax = rooms[rid].bbox
        x = float(rng.uniform(xmin + 0.3, xmax - 0.3))
        y = float(rng.uniform(ymin + 0.3, ymax - 0.3))
        if rng.random() < params.outside_object_prob:
            x = xmax + float(rng.uniform(0.5, 1.5))  # mis-annotated instance
        z = float(rng.uniform(0.3, 2.0))
        p = (round(x, 3), round(y, 3), round(z, 3))
        in_room = [v for v in range(len(positions)) if room_of[v] == rid]
        delegate = min(in_room, key=lambda v: (math.dist(pos3[v], p), v))
        objects.append(ObjectInstance(label, p, rid, delegate))

    env = EnvironmentGraph(
        env_id=env_id,
        positions=pos3,
        edges=tuple(edges),
        rooms=tuple(rooms),
        room_of=tuple(room_of),
        objects=tuple(objects),
    )
    if not env.is_connected():
        raise GenerationError(f"{env_id} is not connected")
    return env


def _draw_room_labels(rng, n):
    labels = []
    for _ in range(n):
        options = [lab for lab in ROOM_WEIGHTS if not (lab in UNIQUE_ROOMS and lab in labels)]
        w = np.array([ROOM_WEIGHTS[lab] for lab in options])
        labels.append(options[int(rng.choice(len(options), p=w / w.sum()))])
    return labels


# -- data points ------------------------------------------------------------


@dataclass(frozen=True)
class DataPoint:
    env_id: str
    start_pose: Pose
    goal_viewpoints: tuple[int, ...]
    end_goal: str
    object_label: str
    room_label: str | None
    path_length: int  # teacher actions to the goal set, including the final stop
    start_room_label: str = ""

    def __post_init__(self):
        if not self.goal_viewpoints:
            raise ValueError("a data point needs at least one goal")

    @property
    def goals(self) -> frozenset:
        return frozenset(self.goal_viewpoints)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_pose"] = self.start_pose.to_list()
        d["goal_viewpoints"] = list(self.goal_viewpoints)
        return {"schema": DATA_SCHEMA, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "DataPoint":
        if d.get("schema", DATA_SCHEMA) != DATA_SCHEMA:
            raise ValueError(f"unsupported data schema {d.get('schema')!r}")
        return cls(
            env_id=d["env_id"],
            start_pose=Pose.from_list(d["start_pose"]),
            goal_viewpoints=tuple(int(g) for g in d["goal_viewpoints"]),
            end_goal=d["end_goal"],
            object_label=d["object_label"],
            room_label=d.get("room_label"),
            path_length=int(d["path_length"]),
            start_room_label=d.get("start_room_label", ""),
        )


@dataclass
class DatagenParams:
    mode: str = "asknav"  # or "noroom"
    starts_per_room: int = 5  # asknav: per (bucket, room)
    starts_per_bucket: int = 12  # noroom: per bucket
    min_path_length: int = 5
    max_path_length: int = 25
    bucket_cap: int | None = None  # N of the split sampler; mode default when None
    eval_split_target: int = 200

    @property
    def cap(self) -> int:
        if self.bucket_cap is not None:
            return self.bucket_cap
        return 10 if self.mode == "asknav" else 20


@dataclass
class DatasetSplits:
    train: list[DataPoint] = field(default_factory=list)
    dev_seen: list[DataPoint] = field(default_factory=list)
    dev_unseen: list[DataPoint] = field(default_factory=list)
    test_seen: list[DataPoint] = field(default_factory=list)
    test_unseen: list[DataPoint] = field(default_factory=list)

    def __getitem__(self, name) -> list[DataPoint]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def items(self):
        return [(n, getattr(self, n)) for n in SPLIT_NAMES]


def bucket_datapoints(env: EnvironmentGraph, params: DatagenParams, rng) -> dict:
    """Valid data points of one environment, grouped by bucket key."""
    if params.mode not in ("asknav", "noroom"):
        raise ValueError(f"unknown dataset mode {params.mode!r}")
    instances = defaultdict(list)
    for obj in env.objects:
        room = env.rooms[obj.room]
        if not room.contains(obj.position):
            continue
        key = (room.label, obj.label) if params.mode == "asknav" else (obj.label,)
        instances[key].append(obj)
    out = {}
    for key in sorted(instances):
        objs = instances[key]
        goals = tuple(sorted({o.delegate for o in objs}))
        goal_set = frozenset(goals)
        object_label = key[-1]
        room_label = key[0] if params.mode == "asknav" else None
        room_count = len(env.rooms_with_label(room_label)) if room_label else 0
        end_goal = make_endgoal(object_label, object_label not in PLURAL_LABELS,
                                room_label, room_count)
        dist = env.goal_distances(goal_set)
        adjacent = {u for g in goals for u in env.neighbors[g]}
        cands = [v for v in range(env.num_viewpoints)
                 if math.isfinite(dist[v]) and v not in goal_set and v not in adjacent]
        if params.mode == "asknav":
            by_room = defaultdict(list)
            for v in cands:
                by_room[env.room_of[v]].append(v)
            starts = []
            for rid in sorted(by_room):
                vs = by_room[rid]
                take = min(params.starts_per_room, len(vs))
                starts.extend(sorted(vs[i] for i in rng.choice(len(vs), size=take, replace=False)))
        else:
            take = min(params.starts_per_bucket, len(cands))
            starts = sorted(cands[i] for i in rng.choice(len(cands), size=take, replace=False)) if cands else []
        points = []
        for v in starts:
            pose = Pose(v, int(rng.integers(12)), 0)
            n_actions = len(teacher_rollout(env, pose, goal_set))
            if params.min_path_length <= n_actions <= params.max_path_length:
                points.append(DataPoint(
                    env_id=env.env_id, start_pose=pose, goal_viewpoints=goals,
                    end_goal=end_goal, object_label=object_label, room_label=room_label,
                    path_length=n_actions,
                    start_room_label=env.rooms[env.room_of[v]].label,
                ))
        if points:
            out[(env.env_id,) + key] = points
    return out


def sample_buckets(buckets: dict, cap: int, target: int, rng):
    """Round-robin split sampler: one bucket per environment per round.

    Returns ``(sampled points, sampled keys)``; sampled buckets are removed
    from ``buckets`` in place.
    """
    out: list = []
    taken = []
    while len(out) < target and buckets:
        order = sorted(buckets)
        rng.shuffle(order)
        sampled_envs = set()
        for key in order:
            env_id = key[0]
            if env_id in sampled_envs:
                continue
            pts = buckets.pop(key)
            take = min(cap, len(pts))
            idx = sorted(int(i) for i in rng.choice(len(pts), size=take, replace=False))
            out.extend(pts[i] for i in idx)
            taken.append((key, idx))
            sampled_envs.add(env_id)
    return out, taken


def generate_dataset(envs, env_split: dict, params: DatagenParams | None = None,
                     rng=None) -> DatasetSplits:
    """``env_split`` maps env_id to "train", "dev" or "test"."""
    params = params or DatagenParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    base = int(rng.integers(2**62))
    by_split: dict[str, dict] = {"train": {}, "dev": {}, "test": {}}
    counts = Counter()
    for i, env in enumerate(sorted(envs, key=lambda e: e.env_id)):
        split = env_split.get(env.env_id)
        if split not in by_split:
            raise GenerationError(f"environment {env.env_id} has no split assignment")
        env_rng = np.random.default_rng([base, i])
        b = bucket_datapoints(env, params, env_rng)
        counts[split] += sum(len(v) for v in b.values())
        by_split[split].update(b)

    sampler_rng = np.random.default_rng([base, len(envs), 7])
    seen_pool = dict(by_split["train"])
    dev_seen, dev_taken = sample_buckets(seen_pool, params.cap, params.eval_split_target, sampler_rng)
    test_seen, test_taken = sample_buckets(seen_pool, params.cap, params.eval_split_target, sampler_rng)
    held = {}
    for key, idx in dev_taken + test_taken:
        held[key] = set(idx)
    train = []
    for key in sorted(by_split["train"]):
        skip = held.get(key, set())
        train.extend(p for j, p in enumerate(by_split["train"][key]) if j not in skip)
    train_envs = {p.env_id for p in train}
    dev_seen = [p for p in dev_seen if p.env_id in train_envs]
    test_seen = [p for p in test_seen if p.env_id in train_envs]
    dev_unseen, _ = sample_buckets(dict(by_split["dev"]), params.cap, params.eval_split_target, sampler_rng)
    test_unseen, _ = sample_buckets(dict(by_split["test"]), params.cap, params.eval_split_target, sampler_rng)
    splits = DatasetSplits(train, dev_seen, dev_unseen, test_seen, test_unseen)
    if not train:
        raise GenerationError(
            f"no valid training data points (valid points per env split: {dict(counts)})"
        )
    return splits


# -- stats and I/O ----------------------------------------------------------


def dataset_stats(splits, top: int = 20) -> dict:
    items = splits.items() if isinstance(splits, DatasetSplits) else dict(splits).items()
    report = {}
    for name, points in items:
        lengths = Counter(p.path_length for p in points)
        report[name] = {
            "count": len(points),
            "num_goals": sum(len(p.goal_viewpoints) for p in points),
            "top_objects": Counter(p.object_label for p in points).most_common(top),
            "start_rooms": Counter(p.start_room_label for p in points).most_common(top),
            "goal_rooms": Counter(p.room_label for p in points if p.room_label).most_common(top),
            "path_lengths": {str(k): lengths[k] for k in sorted(lengths)},
        }
    return report


def save_datapoints(points, path) -> None:
    with open(path, "w") as fh:
        for p in points:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def load_datapoints(path) -> list[DataPoint]:
    with open(path) as fh:
        return [DataPoint.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_splits(splits: DatasetSplits, out_dir, extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"schema": SPLITS_SCHEMA, "files": {}}
    for name, points in splits.items():
        fname = f"{name}.jsonl"
        save_datapoints(points, out_dir / fname)
        manifest["files"][name] = {"path": fname, "count": len(points)}
    manifest.update(extra or {})
    (out_dir / "splits.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_splits(data_dir) -> DatasetSplits:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "splits.json").read_text())
    if manifest.get("schema") != SPLITS_SCHEMA:
        raise ValueError(f"unsupported splits schema {manifest.get('schema')!r}")
    out = DatasetSplits()
    for name in SPLIT_NAMES:
        entry = manifest["files"].get(name)
        if entry:
            setattr(out, name, load_datapoints(data_dir / entry["path"]))
    return out
