import math

import numpy as np
import pytest

from episode_checks import check_episode
from vnla import policy as P
from vnla import training as T
from vnla.language import Vocabulary
from vnla.oracle import AskAction, teacher_rollout
from vnla.training import (
    BudgetState,
    EpisodeSettings,
    TrainConfig,
    TrainingError,
    build_budget_stats,
    random_request_steps,
    run_episode,
    sample_help_budget,
    time_budget_eval,
    time_budget_from_counts,
    time_budget_train,
)

SETTINGS = EpisodeSettings(texture_dim=8)


def small_model(vocab, seed=0):
    cfg = P.PolicyConfig(vocab_size=len(vocab), obs_dim=24, hidden=16, word_emb=8,
                         nav_action_emb=4, ask_action_emb=4, coverage_size=4, ask_hidden=16)
    return P.ModelParams(cfg, seed=seed)


@pytest.fixture(scope="module")
def world(small_corpus):
    envs, _, splits = small_corpus
    vocab = Vocabulary.build(p.end_goal for p in splits.train)
    return envs, splits, vocab


# -- budgets ----------------------------------------------------------------------


def test_help_budget_examples():
    rng = np.random.default_rng(0)
    assert {sample_help_budget(20, 0.4, 4, rng) for _ in range(1000)} == {2}
    draws = np.array([sample_help_budget(25, 0.4, 4, rng) for _ in range(100_000)])
    assert set(draws) == {2, 3}
    assert abs(draws.mean() - 2.5) < 0.01
    assert sample_help_budget(7, 0.0, 4, rng) == 0
    with pytest.raises(ValueError):
        sample_help_budget(10, 1.5, 4, rng)


def test_help_budget_expectation():
    rng = np.random.default_rng(1)
    for T_hat in (5, 11, 17, 23):
        draws = [sample_help_budget(T_hat, 0.4, 4, rng) for _ in range(40_000)]
        assert abs(np.mean(draws) - T_hat * 0.1) < 0.01


def test_time_budget_from_counts():
    assert time_budget_from_counts([10, 12, 14]) == 14
    assert time_budget_from_counts([]) == 25
    assert time_budget_from_counts([7]) == 25
    assert time_budget_from_counts([24, 25, 25, 25, 23]) == 25
    assert time_budget_from_counts([8, 8, 8, 8]) == 8


def test_time_budget_eval_uses_matching_key(world):
    _, splits, _ = world
    stats = build_budget_stats(splits.train)
    for dp in splits.test_unseen[:20]:
        S = stats.get(T.budget_key(dp), [])
        assert time_budget_eval(dp, stats) == time_budget_from_counts(S)


def test_time_budget_train_is_mean_rollout_length(world):
    envs, splits, _ = world
    for dp in splits.train[:60]:
        env = envs[dp.env_id]
        lengths = [len(teacher_rollout(env, dp.start_pose, frozenset([g]))) for g in dp.goal_viewpoints]
        assert time_budget_train(dp, env) == math.floor(sum(lengths) / len(lengths) + 0.5)
        if len(dp.goal_viewpoints) == 1:
            assert time_budget_train(dp, env) == dp.path_length


def test_budget_state_validates():
    with pytest.raises(ValueError):
        BudgetState(10, 2, 3)


# -- baselines --------------------------------------------------------------------


def test_random_request_steps():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        T_hat = int(rng.integers(1, 26))
        B_hat = int(rng.integers(0, 4))
        steps = random_request_steps(T_hat, B_hat, rng)
        assert len(steps) == min(B_hat, T_hat)
        assert all(1 <= s <= T_hat for s in steps)


def test_baseline_ask_rules():
    b = BudgetState(10, 2, 2)
    assert T.baseline_ask("none", 1, b) == AskAction.DO_NOTHING
    assert T.baseline_ask("first", 1, b) == AskAction.REQUEST
    assert T.baseline_ask("first", 5, BudgetState(10, 2, 0)) == AskAction.DO_NOTHING
    assert T.baseline_ask("random", 3, b, random_steps=frozenset({3})) == AskAction.REQUEST
    assert T.baseline_ask("random", 4, b, random_steps=frozenset({3})) == AskAction.DO_NOTHING
    assert T.baseline_ask("learned", 1, b, learned_dist=np.array([0.3, 0.7])) == AskAction.REQUEST


def test_episode_baselines(world):
    envs, splits, vocab = world
    params = small_model(vocab)
    stats = build_budget_stats(splits.train)
    for i, dp in enumerate(splits.test_unseen[:25]):
        env = envs[dp.env_id]
        tr, _, _ = run_episode(dp, env, params, vocab, "eval", "none", rng=np.random.default_rng(i),
                               settings=SETTINGS, budget_stats=stats)
        assert tr.requests == []
        check_episode(tr, dp, env)
        tr, _, _ = run_episode(dp, env, params, vocab, "eval", "first", rng=np.random.default_rng(i),
                               settings=SETTINGS, budget_stats=stats)
        assert tr.requests == list(range(1, min(tr.B_hat, len(tr.steps)) + 1))
        check_episode(tr, dp, env)
        tr, _, _ = run_episode(dp, env, params, vocab, "eval", "random", rng=np.random.default_rng(i),
                               settings=SETTINGS, budget_stats=stats)
        assert len(tr.requests) <= tr.B_hat
        check_episode(tr, dp, env)


# -- episodes ---------------------------------------------------------------------


def test_training_episode_invariants(world):
    envs, splits, vocab = world
    params = small_model(vocab, 3)
    requested = 0
    for i, dp in enumerate(splits.train[:80]):
        env = envs[dp.env_id]
        for kind in ("learned", "random"):
            tape = P.Tape()
            tr, nav, ask = run_episode(dp, env, params, vocab, "train", kind, "indirect",
                                       np.random.default_rng(i), SETTINGS, tape=tape)
            check_episode(tr, dp, env)
            assert math.isfinite(nav) and math.isfinite(ask)
            if kind == "learned":
                assert all(s.ask_decision == s.teacher_ask for s in tr.steps)
            requested += len(tr.requests)
    assert requested > 0


def test_direct_modes_force_advice(world):
    envs, splits, vocab = world
    params = small_model(vocab, 4)
    stats = build_budget_stats(splits.train)
    seen = 0
    for i, dp in enumerate(splits.test_unseen[:30]):
        env = envs[dp.env_id]
        for mode in ("direct_sub", "direct_nosub"):
            tr, _, _ = run_episode(dp, env, params, vocab, "eval", "first", mode,
                                   np.random.default_rng(i), SETTINGS, stats)
            check_episode(tr, dp, env)
            for r in tr.requests:
                s = tr.steps[r - 1]
                window = tr.steps[r - 1 : r - 1 + len(s.advice)]
                # forced actions run until the next request or the end of the episode
                nxt = [q for q in tr.requests if q > r]
                window = [w for w in window if not nxt or w.t < nxt[0]]
                assert [w.nav_action for w in window] == [int(a) for a in s.advice[: len(window)]]
                assert all(w.acting == "forced" for w in window)
                if mode == "direct_nosub":
                    assert s.advice_text is None and s.goal_text == dp.end_goal
                seen += 1
    assert seen > 0


def test_episode_rejects_bad_mode(world):
    envs, splits, vocab = world
    dp = splits.train[0]
    with pytest.raises(ValueError):
        run_episode(dp, envs[dp.env_id], small_model(vocab), vocab, "test", "none")


# -- training loop ----------------------------------------------------------------


def _train(world, out, iterations=4, workers=1, resume=False, **kw):
    envs, splits, vocab = world
    params = small_model(vocab)
    cfg = TrainConfig(iterations=iterations, batch_size=6, lr=3e-3, checkpoint_every=2, **kw)
    return T.train(splits.train, envs, vocab, params.cfg, cfg, SETTINGS, seed=5, out_dir=out,
                   workers=workers, resume=resume)


def test_train_writes_log_and_checkpoint(world, tmp_path):
    path = _train(world, tmp_path)
    rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()
    assert rows[0] == ",".join(T.LOG_HEADER)
    assert [int(r.split(",")[0]) for r in rows[1:]] == [1, 2, 3, 4]
    ck = P.load_checkpoint(path)
    assert ck.header["extra"]["iteration"] == 4
    assert ck.optimizer.step_count == 4


def test_resume_matches_uninterrupted(world, tmp_path):
    _train(world, tmp_path / "full", iterations=4)
    _train(world, tmp_path / "part", iterations=2)
    _train(world, tmp_path / "part", iterations=4, resume=True)
    for name in ("checkpoint.ckpt", "train_log.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_workers_do_not_change_result(world, tmp_path):
    _train(world, tmp_path / "w1", iterations=2, workers=1)
    _train(world, tmp_path / "w4", iterations=2, workers=4)
    for name in ("checkpoint.ckpt", "train_log.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w4" / name).read_bytes()


def test_nonfinite_loss_aborts_with_dump(world, tmp_path, monkeypatch):
    real = T.run_episode

    def broken(*a, **kw):
        trace, nav, ask = real(*a, **kw)
        return trace, float("nan"), ask

    monkeypatch.setattr(T, "run_episode", broken)
    with pytest.raises(TrainingError, match="non-finite"):
        _train(world, tmp_path)
    assert list(tmp_path.glob("nonfinite_it0_ep*.json"))


def test_empty_training_split(world, tmp_path):
    envs, _, vocab = world
    with pytest.raises(TrainingError):
        T.train([], envs, vocab, small_model(vocab).cfg, TrainConfig(), SETTINGS, 0, tmp_path)


def test_overfits_a_handful_of_points(world, tmp_path):
    envs, splits, vocab = world
    points = splits.train[:3]
    params = small_model(vocab)
    cfg = TrainConfig(iterations=60, batch_size=6, lr=1e-2, weight_decay=0.0, checkpoint_every=0)
    T.train(points, envs, vocab, params.cfg, cfg, SETTINGS, seed=1, out_dir=tmp_path)
    rows = [r.split(",") for r in (tmp_path / "train_log.csv").read_text().splitlines()[1:]]
    nav = [float(r[1]) for r in rows]
    assert np.mean(nav[-5:]) < 0.5 * np.mean(nav[:5]), (nav[:5], nav[-5:])
