import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import ASK_BLOCKS, TINY, analytic, gradient_check, make_params
from vnla import kernels
from vnla import policy as P
from vnla.language import Vocabulary

KERNEL_FUNCS = ("lstm_forward", "lstm_backward", "linear_forward", "linear_backward",
                "attention_forward", "attention_backward")


@pytest.fixture(params=list(kernels.implementations()))
def backend(request, monkeypatch):
    impl = kernels.implementations()[request.param]
    for f in KERNEL_FUNCS:
        monkeypatch.setattr(kernels, f, getattr(impl, f))
    return request.param


def test_gradient_check(backend):
    errors = gradient_check()
    assert set(errors) == set(make_params()[0].names)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_ask_loss_leaves_nav_gradients_alone():
    params, obs = make_params(3)
    nav = analytic(params, obs, "nav")
    both = analytic(params, obs, "both")
    for n in params.names:
        if n not in ASK_BLOCKS:
            assert np.array_equal(nav[n], both[n]), n
    ask = analytic(params, obs, "ask")
    for n in params.names:
        if n not in ASK_BLOCKS:
            assert not ask[n].any(), n


def _small(seed=0, **kw):
    cfg = dict(TINY, hidden=16, obs_dim=12, vocab_size=20)
    cfg.update(kw)
    return P.ModelParams(P.PolicyConfig(**cfg), seed=seed)


def test_distributions_normalised_and_finite():
    params = _small()
    rng = np.random.default_rng(0)
    state = P.NavPolicyState(params)
    P.set_goal(state, rng.integers(0, 20, size=7), params)
    prev = 6
    for t in range(2000):
        if t % 97 == 0:
            P.set_goal(state, rng.integers(0, 20, size=rng.integers(1, 12)), params)
        obs = rng.normal(size=12) * 30.0
        o1 = P.decode_pass(state, obs, prev, 2, params, 1)
        pa, _ = P.ask_forward(obs, t, o1.dist, o1.h_dec, o1.h_att, params)
        o2 = P.decode_pass(state, obs, prev, int(rng.integers(2)), params, 2)
        for d, k in ((o1.dist, 6), (pa, 2), (o2.dist, 6)):
            assert d.shape == (k,)
            assert np.all(np.isfinite(d)) and np.all(d >= 0)
            assert abs(d.sum() - 1.0) < 1e-9
        prev = P.select_action(o2.dist)


def test_goal_encoded_only_on_change():
    params = _small()
    state = P.NavPolicyState(params)
    assert P.set_goal(state, [1, 2, 3], params)
    assert params.encode_count == 1
    assert not P.set_goal(state, [1, 2, 3], params)
    assert params.encode_count == 1
    assert P.set_goal(state, [4, 1, 2, 3], params)
    assert params.encode_count == 2
    with pytest.raises(ValueError):
        P.encode_goal([], params)
    with pytest.raises(ValueError):
        P.encode_goal([99], params)


def test_second_pass_equals_first_with_same_ask_action():
    params = _small(1)
    rng = np.random.default_rng(2)
    state = P.NavPolicyState(params)
    P.set_goal(state, [3, 4, 5], params)
    for _ in range(5):
        obs = rng.normal(size=12)
        o1 = P.decode_pass(state, obs, 1, 0, params, 1)
        o2 = P.decode_pass(state, obs, 1, 0, params, 2)
        assert np.array_equal(o1.dist, o2.dist)


def test_first_pass_does_not_advance_state():
    params = _small(1)
    state = P.NavPolicyState(params)
    P.set_goal(state, [3, 4, 5], params)
    obs = np.ones(12)
    a = P.decode_pass(state, obs, 1, 2, params, 1).dist
    b = P.decode_pass(state, obs, 1, 2, params, 1).dist
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        P.decode_pass(state, obs, 1, 2, params, 3)
    with pytest.raises(ValueError):
        P.decode_pass(state, np.ones(5), 1, 2, params, 1)


def test_budget_index_is_clamped():
    params = _small()
    state = P.NavPolicyState(params)
    P.set_goal(state, [1], params)
    obs = np.zeros(12)
    o = P.decode_pass(state, obs, 6, 2, params, 1)
    top = P.ask_forward(obs, params.cfg.max_budget, o.dist, o.h_dec, o.h_att, params)[0]
    over = P.ask_forward(obs, 50, o.dist, o.h_dec, o.h_att, params)[0]
    assert np.array_equal(top, over)
    low = P.ask_forward(obs, 0, o.dist, o.h_dec, o.h_att, params)[0]
    assert np.array_equal(low, P.ask_forward(obs, -4, o.dist, o.h_dec, o.h_att, params)[0])


def test_step_loss():
    loss, grad = P.step_loss(np.eye(6)[2], 2)
    assert loss == 0.0
    loss, grad = P.step_loss(np.full(6, 1 / 6), 4)
    assert math.isclose(loss, math.log(6), rel_tol=1e-12)
    np.testing.assert_allclose(grad, np.full(6, 1 / 6) - np.eye(6)[4])
    loss, _ = P.step_loss(np.eye(6)[0], 3)  # probability floor keeps it finite
    assert math.isclose(loss, -math.log(P.PROB_FLOOR))


def test_select_action_argmax_and_sample():
    d = np.array([0.1, 0.4, 0.4, 0.1])
    assert P.select_action(d) == 1
    assert P.select_action(np.eye(6)[5], "sample", np.random.default_rng(0)) == 5
    with pytest.raises(ValueError):
        P.select_action(d, "sample")
    with pytest.raises(ValueError):
        P.select_action(d, "greedy")


def test_sampling_frequencies():
    d = np.array([0.05, 0.3, 0.15, 0.25, 0.2, 0.05])
    rng = np.random.default_rng(7)
    n = 100_000
    counts = np.bincount([P.select_action(d, "sample", rng) for _ in range(n)], minlength=6)
    sigma = np.sqrt(d * (1 - d) / n)
    assert np.all(np.abs(counts / n - d) <= 3 * sigma), counts / n


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
@settings(max_examples=50)
def test_softmax_properties(z):
    p = P.softmax(np.array(z))
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
    order = np.argsort(z, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_adam_first_step():
    params = _small()
    before = params["nav_out_b"].v.copy()
    params.zero_grad()
    params["nav_out_b"].g[:] = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -0.1])
    opt = P.Adam(params, lr=0.01)
    opt.step()
    # bias-corrected first step moves each weight by lr * sign(g)
    step = before - params["nav_out_b"].v
    np.testing.assert_allclose(step[[0, 1, 2, 4, 5]], 0.01 * np.sign([1, -2, 0.5, 3, -0.1]), rtol=1e-6)
    assert step[3] == 0.0


def _vocab():
    return Vocabulary.build(["find a cup"])


def test_checkpoint_round_trip(tmp_path):
    vocab = _vocab()
    params = _small(4, vocab_size=len(vocab))
    opt = P.Adam(params, lr=0.02, weight_decay=1e-4)
    params.zero_grad()
    for n in params.names:
        params[n].g[...] = 0.01
    opt.step()
    path = tmp_path / "a.ckpt"
    P.save_checkpoint(path, params, vocab, {"x": 1}, opt, {"iteration": 3})
    ck = P.load_checkpoint(path)
    assert ck.vocab == vocab
    assert ck.header["extra"] == {"iteration": 3}
    for n in params.names:
        assert params[n].v.tobytes() == ck.params[n].v.tobytes()
        assert opt.m[n].tobytes() == ck.optimizer.m[n].tobytes()
    assert ck.optimizer.step_count == 1
    # saving the loaded checkpoint reproduces the file byte for byte
    P.save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.vocab, {"x": 1}, ck.optimizer, {"iteration": 3})
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()

    obs = np.linspace(-1, 1, 12)
    dists = []
    for p in (params, ck.params):
        s = P.NavPolicyState(p)
        P.set_goal(s, vocab.encode("find a cup"), p)
        dists.append(P.decode_pass(s, obs, 6, 2, p, 1).dist.tobytes())
    assert dists[0] == dists[1]


def test_checkpoint_errors(tmp_path):
    vocab = _vocab()
    params = _small(vocab_size=len(vocab))
    path = tmp_path / "a.ckpt"
    P.save_checkpoint(path, params, vocab)
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(P.CheckpointError, match="magic"):
        P.load_checkpoint(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(P.CheckpointError, match="truncated"):
        P.load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(P.CheckpointError, match="trailing"):
        P.load_checkpoint(bad)


def test_policy_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        P.PolicyConfig.from_dict({"hidden": 4, "depth": 2})
