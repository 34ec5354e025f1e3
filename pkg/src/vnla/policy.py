"""Learnable agent: encoder-decoder navigation network and feed-forward ask network.

Gradients come from a small tape: every op records a closure that pushes
the output gradient back into its inputs. Parameter gradients accumulate
in place inside the kernels, so one tape covers a whole episode.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from vnla import kernels as K
from vnla.env import NUM_NAV_ACTIONS
from vnla.language import Vocabulary

CHECKPOINT_MAGIC = b"VNLA"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12
NUM_ASK_ACTIONS = 2


class CheckpointError(ValueError):
    pass


# -- tape -------------------------------------------------------------------


class Node:
    __slots__ = ("v", "g", "rg")

    def __init__(self, v, rg=True):
        self.v = v
        self.g = None
        self.rg = rg

    def acc(self, d):
        # out of place on purpose: incoming arrays may be views of other grads
        self.g = d if self.g is None else self.g + d


class Param(Node):
    __slots__ = ()

    def __init__(self, v):
        super().__init__(v, True)
        self.g = np.zeros_like(v)

    def acc(self, d):
        self.g += d


def const(v) -> Node:
    return Node(v, False)


class Tape:
    def __init__(self):
        self.ops = []

    def backward(self):
        for op in reversed(self.ops):
            op()
        self.ops.clear()


def _grad_or_zero(node, n):
    return node.g if node.g is not None else np.zeros(n)


def embed(tape, P: Param, idx: int) -> Node:
    out = Node(P.v[idx].copy())
    if tape is not None:
        def back():
            if out.g is not None:
                P.g[idx] += out.g
        tape.ops.append(back)
    return out


def concat(tape, nodes) -> Node:
    out = Node(np.concatenate([n.v for n in nodes]), any(n.rg for n in nodes))
    if tape is not None and out.rg:
        spans = []
        pos = 0
        for n in nodes:
            spans.append((n, pos, pos + n.v.shape[0]))
            pos += n.v.shape[0]

        def back():
            if out.g is None:
                return
            for n, a, b in spans:
                if n.rg:
                    n.acc(out.g[a:b])
        tape.ops.append(back)
    return out


def stack(tape, nodes) -> Node:
    out = Node(np.stack([n.v for n in nodes]), any(n.rg for n in nodes))
    if tape is not None and out.rg:
        def back():
            if out.g is None:
                return
            for i, n in enumerate(nodes):
                if n.rg:
                    n.acc(out.g[i])
        tape.ops.append(back)
    return out


def add(tape, a: Node, b: Node) -> Node:
    out = Node(a.v + b.v, a.rg or b.rg)
    if tape is not None and out.rg:
        def back():
            if out.g is None:
                return
            if a.rg:
                a.acc(out.g)
            if b.rg:
                b.acc(out.g)
        tape.ops.append(back)
    return out


def scale(tape, x: Node, mask: np.ndarray) -> Node:
    out = Node(x.v * mask, x.rg)
    if tape is not None and x.rg:
        def back():
            if out.g is not None:
                x.acc(out.g * mask)
        tape.ops.append(back)
    return out


def lstm(tape, W: Param, b: Param, x: Node, h: Node, c: Node):
    hn, cn, gates, tanh_c = K.lstm_forward(W.v, b.v, x.v, h.v, c.v)
    H, C = Node(hn), Node(cn)
    if tape is not None:
        def back():
            if H.g is None and C.g is None:
                return
            n = hn.shape[0]
            dx, dh, dc = K.lstm_backward(W.v, x.v, h.v, c.v, gates, tanh_c,
                                         _grad_or_zero(H, n), _grad_or_zero(C, n), W.g, b.g)
            if x.rg:
                x.acc(dx)
            if h.rg:
                h.acc(dh)
            if c.rg:
                c.acc(dc)
        tape.ops.append(back)
    return H, C


def linear(tape, W: Param, b: Param, x: Node, act: int) -> Node:
    y = Node(K.linear_forward(W.v, b.v, x.v, act))
    if tape is not None:
        def back():
            if y.g is None:
                return
            dx = K.linear_backward(W.v, x.v, y.v, y.g, act, W.g, b.g)
            if x.rg:
                x.acc(dx)
        tape.ops.append(back)
    return y


def attention(tape, Wa: Param, M: Node, h: Node, cov: Node, u: Param, v: Param, w: Param):
    alpha, ctx, q, feat = K.attention_forward(Wa.v, M.v, h.v, cov.v, u.v, v.v, w.v)
    A, X = Node(alpha), Node(ctx)
    if tape is not None:
        def back():
            if A.g is None and X.g is None:
                return
            dM = np.zeros_like(M.v)
            dh, dcov = K.attention_backward(
                Wa.v, M.v, h.v, cov.v, u.v, w.v, alpha, q, feat,
                _grad_or_zero(X, ctx.shape[0]), _grad_or_zero(A, alpha.shape[0]),
                Wa.g, dM, u.g, v.g, w.g,
            )
            if M.rg:
                M.acc(dM)
            h.acc(dh)
            if cov.rg:
                cov.acc(dcov)
        tape.ops.append(back)
    return A, X


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def step_loss(dist, teacher_action: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the teacher action and its gradient w.r.t. the logits."""
    dist = np.asarray(dist, dtype=float)
    loss = -math.log(max(float(dist[teacher_action]), PROB_FLOOR))
    dlogits = dist.copy()
    dlogits[teacher_action] -= 1.0
    return loss, dlogits


def nll(tape, logits: Node, dist: np.ndarray, target: int, weight: float = 1.0) -> float:
    loss, dlogits = step_loss(dist, target)
    if tape is not None:
        def back():
            logits.acc(weight * dlogits)
        tape.ops.append(back)
    return loss


def select_action(dist, mode: str = "argmax", rng=None) -> int:
    dist = np.asarray(dist, dtype=float)
    if mode == "argmax":
        return int(np.argmax(dist))  # first maximum wins ties
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        cdf = np.cumsum(dist)
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(dist) - 1))
    raise ValueError(f"unknown selection mode {mode!r}")


# -- parameters -------------------------------------------------------------


@dataclass
class PolicyConfig:
    vocab_size: int = 0
    obs_dim: int = 64
    hidden: int = 64
    word_emb: int = 32
    nav_action_emb: int = 8
    ask_action_emb: int = 8
    budget_emb: int = 4
    coverage_size: int = 10
    ask_hidden: int = 64
    ask_layers: int = 1
    max_budget: int = 4
    dropout: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown policy keys {sorted(unknown)}")
        return cls(**data)


def param_shapes(cfg: PolicyConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; checkpoints store tensors in this order."""
    H, C = cfg.hidden, cfg.coverage_size
    dec_in = cfg.obs_dim + cfg.nav_action_emb + cfg.ask_action_emb
    ask_in = cfg.obs_dim + cfg.budget_emb + NUM_NAV_ACTIONS + 2 * H
    shapes = [
        ("word_emb", (cfg.vocab_size, cfg.word_emb)),
        ("enc_W", (4 * H, cfg.word_emb + H)),
        ("enc_b", (4 * H,)),
        ("nav_action_emb", (NUM_NAV_ACTIONS + 1, cfg.nav_action_emb)),
        ("ask_action_emb", (NUM_ASK_ACTIONS + 1, cfg.ask_action_emb)),
        ("dec_W", (4 * H, dec_in + H)),
        ("dec_b", (4 * H,)),
        ("att_W", (H, H)),
        ("cov_u", (C,)),
        ("cov_v", (C,)),
        ("cov_w", (C,)),
        ("att_out_W", (H, 2 * H)),
        ("att_out_b", (H,)),
        ("nav_out_W", (NUM_NAV_ACTIONS, H)),
        ("nav_out_b", (NUM_NAV_ACTIONS,)),
        ("budget_emb", (cfg.max_budget + 1, cfg.budget_emb)),
    ]
    width = ask_in
    for i in range(cfg.ask_layers):
        shapes += [(f"ask_W{i}", (cfg.ask_hidden, width)), (f"ask_b{i}", (cfg.ask_hidden,))]
        width = cfg.ask_hidden
    shapes += [("ask_out_W", (NUM_ASK_ACTIONS, width)), ("ask_out_b", (NUM_ASK_ACTIONS,))]
    return shapes


class ModelParams:
    def __init__(self, cfg: PolicyConfig, arrays: dict | None = None, seed: int = 0):
        if cfg.vocab_size < 1:
            raise ValueError("vocab_size must be set before building parameters")
        self.cfg = cfg
        self.shapes = param_shapes(cfg)
        rng = np.random.default_rng(seed)
        self.p: dict[str, Param] = {}
        for name, shape in self.shapes:
            if arrays is not None:
                arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
                if arr.shape != shape:
                    raise CheckpointError(f"{name}: shape {arr.shape} != {shape}")
            elif len(shape) == 2:
                bound = 1.0 / math.sqrt(shape[1])
                arr = rng.uniform(-bound, bound, size=shape)
            elif name.startswith("cov_"):
                arr = rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(shape[0])
            else:
                arr = np.zeros(shape)
            self.p[name] = Param(arr)
        self.encode_count = 0

    def __getitem__(self, name) -> Param:
        return self.p[name]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def zero_grad(self) -> None:
        for prm in self.p.values():
            prm.g.fill(0.0)

    def grads(self) -> dict[str, np.ndarray]:
        return {n: self.p[n].g for n in self.names}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.p[n].v for n in self.names}

    def num_parameters(self) -> int:
        return sum(self.p[n].v.size for n in self.names)


# -- networks ---------------------------------------------------------------


class NavPolicyState:
    """Encoder memory, carried decoder state and coverage accumulator."""

    def __init__(self, params: ModelParams):
        H = params.cfg.hidden
        self.h = const(np.zeros(H))
        self.c = const(np.zeros(H))
        self.memory: Node | None = None
        self.coverage: Node | None = None
        self.tokens: tuple[int, ...] = ()


class DecodeOutput(NamedTuple):
    dist: np.ndarray
    logits: Node
    h_att: Node
    h_dec: Node


def encode_goal(tokens, params: ModelParams, tape=None) -> Node:
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot encode an empty goal")
    H = params.cfg.hidden
    h, c = const(np.zeros(H)), const(np.zeros(H))
    outs = []
    for tok in tokens:
        if not 0 <= tok < params.cfg.vocab_size:
            raise ValueError(f"token index {tok} outside the vocabulary")
        e = embed(tape, params["word_emb"], tok)
        h, c = lstm(tape, params["enc_W"], params["enc_b"], e, h, c)
        outs.append(h)
    params.encode_count += 1
    return stack(tape, outs)


def set_goal(state: NavPolicyState, tokens, params: ModelParams, tape=None) -> bool:
    """Re-encode only when the goal tokens change. Returns True if it re-encoded."""
    tokens = tuple(tokens)
    if state.memory is not None and tokens == state.tokens:
        return False
    state.memory = encode_goal(tokens, params, tape)
    state.coverage = const(np.zeros(len(tokens)))
    state.tokens = tokens
    return True


def decode_pass(state: NavPolicyState, obs, prev_nav: int, ask_action: int, params: ModelParams,
                pass_index: int, tape=None, dropout_mask=None) -> DecodeOutput:
    if pass_index not in (1, 2):
        raise ValueError("pass_index must be 1 or 2")
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (params.cfg.obs_dim,):
        raise ValueError(f"observation has shape {obs.shape}, expected ({params.cfg.obs_dim},)")
    x = concat(tape, [
        const(obs),
        embed(tape, params["nav_action_emb"], int(prev_nav)),
        embed(tape, params["ask_action_emb"], int(ask_action)),
    ])
    if dropout_mask is not None:
        x = scale(tape, x, dropout_mask)
    h, c = lstm(tape, params["dec_W"], params["dec_b"], x, state.h, state.c)
    alpha, ctx = attention(tape, params["att_W"], state.memory, h, state.coverage,
                           params["cov_u"], params["cov_v"], params["cov_w"])
    h_att = linear(tape, params["att_out_W"], params["att_out_b"], concat(tape, [ctx, h]), K.ACT_TANH)
    logits = linear(tape, params["nav_out_W"], params["nav_out_b"], h_att, K.ACT_NONE)
    if pass_index == 2:
        state.h, state.c = h, c
        state.coverage = add(tape, state.coverage, alpha)
    return DecodeOutput(softmax(logits.v), logits, h_att, h_dec=h)


def ask_forward(obs, budget_index: int, tentative_dist, h_dec, h_att, params: ModelParams,
                tape=None) -> tuple[np.ndarray, Node]:
    """Ask distribution. Inputs are detached: no gradient reaches the navigation network."""
    cfg = params.cfg
    bidx = min(max(int(budget_index), 0), cfg.max_budget)
    h_dec = h_dec.v if isinstance(h_dec, Node) else h_dec
    h_att = h_att.v if isinstance(h_att, Node) else h_att
    x = concat(tape, [
        const(np.asarray(obs, dtype=np.float64)),
        embed(tape, params["budget_emb"], bidx),
        const(np.asarray(tentative_dist, dtype=np.float64)),
        const(np.array(h_dec, dtype=np.float64)),
        const(np.array(h_att, dtype=np.float64)),
    ])
    for i in range(cfg.ask_layers):
        x = linear(tape, params[f"ask_W{i}"], params[f"ask_b{i}"], x, K.ACT_RELU)
    logits = linear(tape, params["ask_out_W"], params["ask_out_b"], x, K.ACT_NONE)
    return softmax(logits.v), logits


# -- optimizer --------------------------------------------------------------


class Adam:
    """Adam with L2 regularization added to the gradient (coupled weight decay)."""

    def __init__(self, params: ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].v) for n in params.names}
        self.s = {n: np.zeros_like(params[n].v) for n in params.names}

    def step(self, grads: dict | None = None) -> None:
        grads = grads if grads is not None else self.params.grads()
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n in self.params.names:
            w = self.params[n].v
            g = grads[n] + self.weight_decay * w
            m, s = self.m[n], self.s[n]
            m *= b1
            m += (1.0 - b1) * g
            s *= b2
            s += (1.0 - b2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, config_echo: dict | None = None,
                    optimizer: Adam | None = None, extra: dict | None = None) -> None:
    header = {
        "policy": asdict(params.cfg),
        "vocab": list(vocab.tokens),
        "config": config_echo or {},
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay, "step": optimizer.step_count,
        },
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in params.names:
            fh.write(params[n].v.astype("<f8").tobytes())
        if optimizer is not None:
            for n in params.names:
                fh.write(optimizer.m[n].astype("<f8").tobytes())
                fh.write(optimizer.s[n].astype("<f8").tobytes())


class Checkpoint(NamedTuple):
    params: ModelParams
    vocab: Vocabulary
    header: dict
    optimizer: Adam | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + n])
    cfg = PolicyConfig.from_dict(header["policy"])
    offset = 12 + n

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor data")
        arr = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        return arr

    shapes = param_shapes(cfg)
    arrays = {name: take(shape) for name, shape in shapes}
    params = ModelParams(cfg, arrays)
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt = Adam(params, o["lr"], o["betas"], o["eps"], o["weight_decay"])
        opt.step_count = o["step"]
        for name, shape in shapes:
            opt.m[name] = take(shape)
            opt.s[name] = take(shape)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(params, Vocabulary(header["vocab"]), header, opt)
