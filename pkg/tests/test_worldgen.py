import math
from collections import Counter

import numpy as np
import pytest

from conftest import SMALL_WORLD
from vnla.env import MAX_EDGE_LENGTH
from vnla.oracle import teacher_rollout
from vnla.worldgen import (
    DataPoint,
    DatagenParams,
    GenerationError,
    WorldgenParams,
    bucket_datapoints,
    dataset_stats,
    generate_dataset,
    generate_environment,
    load_splits,
    make_endgoal,
    pluralize,
    sample_buckets,
    save_splits,
)


@pytest.mark.parametrize("label, plural", [
    ("bathroom", "bathrooms"), ("bench", "benches"), ("shelf", "shelves"),
    ("knife", "knives"), ("laundry room", "laundry rooms"), ("box", "boxes"),
    ("toy", "toys"), ("pantry", "pantries"), ("living room", "living rooms"),
    ("glass", "glasses"), ("person", "people"),
])
def test_pluralize(label, plural):
    assert pluralize(label) == plural


@pytest.mark.parametrize("label", ["shelves", "people", "curtains", "stairs"])
def test_pluralize_idempotent_on_irregular_plurals(label):
    assert pluralize(label) == label


def test_make_endgoal():
    assert make_endgoal("cup", True, "bathroom", 2) == "find a cup in one of the bathrooms"
    assert make_endgoal("towel", True, "kitchen", 1) == "find a towel in the kitchen"
    assert make_endgoal("pillow", True) == "find a pillow"
    assert make_endgoal("armchair", True) == "find an armchair"
    assert make_endgoal("curtains", False, "bedroom", 3) == "find curtains in one of the bedrooms"
    with pytest.raises(ValueError):
        make_endgoal("", True)
    with pytest.raises(ValueError):
        make_endgoal("cup", True, "kitchen", 0)


# -- environments ----------------------------------------------------------------


def test_generate_environment_deterministic():
    a = generate_environment(7)
    b = generate_environment(7)
    assert a.to_dict() == b.to_dict()
    assert generate_environment(8).to_dict() != a.to_dict()


def test_single_room():
    env = generate_environment(1, WorldgenParams(rooms=(1, 1), viewpoints_per_room=(3, 3)))
    assert env.num_viewpoints == 3
    assert len(env.rooms) == 1 and set(env.room_of) == {0}
    assert env.is_connected()


def test_infeasible_params():
    with pytest.raises(GenerationError):
        generate_environment(0, WorldgenParams(rooms=(0, 0)))
    with pytest.raises(GenerationError):
        generate_environment(0, WorldgenParams(viewpoints_per_room=(3, 2)))


def test_generated_world_invariants():
    for seed in range(100):
        env = generate_environment(seed)
        for a, b in env.edges:
            assert np.linalg.norm(env.positions[a] - env.positions[b]) <= MAX_EDGE_LENGTH
        assert env.is_connected()
        # every room holds an object whose delegate sits inside that room
        assert {o.room for o in env.objects} == {r.id for r in env.rooms}
        for o in env.objects:
            assert env.room_of[o.delegate] == o.room
        # rooms do not overlap (shared walls allowed)
        boxes = [r.bbox for r in env.rooms]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                overlap_x = min(a[2], b[2]) - max(a[0], b[0])
                overlap_y = min(a[3], b[3]) - max(a[1], b[1])
                assert overlap_x <= 1e-9 or overlap_y <= 1e-9
        # viewpoints lie inside their room
        for v in range(env.num_viewpoints):
            assert env.rooms[env.room_of[v]].contains(env.positions[v])


# -- data points and splits ------------------------------------------------------


def test_sampler_single_bucket_emits_cap_then_stops():
    buckets = {("env0", "kitchen", "cup"): list(range(30))}
    points, taken = sample_buckets(buckets, cap=10, target=5000, rng=np.random.default_rng(0))
    assert len(points) == 10
    assert len(set(points)) == 10
    assert buckets == {}
    assert len(taken) == 1


def test_sampler_one_bucket_per_env_per_round():
    buckets = {("e0", "a"): [1, 2], ("e0", "b"): [3], ("e1", "a"): [4, 5, 6]}
    points, taken = sample_buckets(buckets, cap=10, target=3, rng=np.random.default_rng(1))
    first_round = [key for key, _ in taken[:2]]
    assert len({k[0] for k in first_round}) == 2
    assert len(points) >= 3


def test_bucket_goal_sets_are_delegates_of_surviving_instances():
    env = generate_environment(11)
    buckets = bucket_datapoints(env, DatagenParams(), np.random.default_rng(0))
    for key, points in buckets.items():
        _, room_label, obj_label = key
        delegates = {o.delegate for o in env.objects
                     if o.label == obj_label and env.rooms[o.room].label == room_label
                     and env.rooms[o.room].contains(o.position)}
        for p in points:
            assert set(p.goal_viewpoints) == delegates


def test_outside_objects_are_dropped():
    params = WorldgenParams(outside_object_prob=1.0)
    env = generate_environment(2, params)
    assert all(not env.rooms[o.room].contains(o.position) for o in env.objects)
    with pytest.raises(GenerationError):
        generate_dataset([env], {env.env_id: "train"}, DatagenParams(), np.random.default_rng(0))


def _check_point(p, env):
    goals = p.goals
    assert p.start_pose.viewpoint not in goals
    for g in goals:
        assert p.start_pose.viewpoint not in env.neighbors[g]
    assert p.start_pose.elevation == 0 and 0 <= p.start_pose.heading < 12
    assert 5 <= p.path_length <= 25
    assert len(teacher_rollout(env, p.start_pose, goals)) == p.path_length
    assert math.isfinite(env.goal_distances(goals)[p.start_pose.viewpoint])


def test_dataset_invariants(small_corpus):
    envs, split, splits = small_corpus
    train_envs = {e for e, s in split.items() if s == "train"}
    for name, points in splits.items():
        for p in points:
            _check_point(p, envs[p.env_id])
    assert {p.env_id for p in splits.train} <= train_envs
    for name in ("dev_seen", "test_seen"):
        assert {p.env_id for p in splits[name]} <= {p.env_id for p in splits.train}
    assert {p.env_id for p in splits.dev_unseen} <= {e for e, s in split.items() if s == "dev"}
    assert {p.env_id for p in splits.test_unseen} <= {e for e, s in split.items() if s == "test"}
    # seen evaluation points are held out of train
    train_keys = {(p.env_id, p.start_pose, p.end_goal) for p in splits.train}
    for p in splits.dev_seen + splits.test_seen:
        assert (p.env_id, p.start_pose, p.end_goal) not in train_keys


def test_start_cap_per_room(small_corpus):
    envs, _, splits = small_corpus
    per = Counter((p.env_id, p.end_goal, envs[p.env_id].room_of[p.start_pose.viewpoint])
                  for name, pts in splits.items() for p in pts)
    assert max(per.values()) <= 5


def test_noroom_mode():
    envs = [generate_environment(50 + i, SMALL_WORLD, env_id=f"n{i}") for i in range(4)]
    split = {"n0": "train", "n1": "train", "n2": "dev", "n3": "test"}
    splits = generate_dataset(envs, split, DatagenParams(mode="noroom", eval_split_target=20),
                              np.random.default_rng(0))
    for _, points in splits.items():
        for p in points:
            assert p.room_label is None
            assert " in " not in p.end_goal
    per = Counter((p.env_id, p.object_label) for _, pts in splits.items() for p in pts)
    assert max(per.values()) <= 12


def test_dataset_deterministic(tmp_path):
    envs = [generate_environment(70 + i, SMALL_WORLD, env_id=f"d{i}") for i in range(4)]
    split = {"d0": "train", "d1": "train", "d2": "dev", "d3": "test"}
    out = []
    for run in range(2):
        s = generate_dataset(envs, split, DatagenParams(eval_split_target=10), np.random.default_rng(3))
        save_splits(s, tmp_path / str(run))
        out.append({f.name: f.read_bytes() for f in (tmp_path / str(run)).iterdir()})
    assert out[0] == out[1]
    back = load_splits(tmp_path / "0")
    assert back.train == s.train


def test_datapoint_round_trip():
    from vnla.env import Pose
    p = DataPoint("e", Pose(3, 4, 0), (1, 2), "find a cup", "cup", None, 9, "hallway")
    assert DataPoint.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        DataPoint("e", Pose(3, 4, 0), (), "find a cup", "cup", None, 9)


def test_dataset_stats(small_corpus):
    _, _, splits = small_corpus
    stats = dataset_stats(splits)
    for name, points in splits.items():
        assert stats[name]["count"] == len(points)
        assert sum(stats[name]["path_lengths"].values()) == len(points)
        assert all(5 <= int(k) <= 25 for k in stats[name]["path_lengths"])
    assert dataset_stats({"x": []})["x"]["path_lengths"] == {}
    one = dataset_stats({"x": splits.train[:1]})["x"]
    assert one["path_lengths"] == {str(splits.train[0].path_length): 1}
