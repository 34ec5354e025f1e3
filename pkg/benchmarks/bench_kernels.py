"""Compiled vs numpy kernels, per call and for a full training episode.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from vnla import kernels
from vnla import policy as P
from vnla.language import Vocabulary
from vnla.training import EpisodeSettings, run_episode
from vnla.worldgen import DatagenParams, generate_dataset, generate_environment

SWAPPABLE = ("lstm_forward", "lstm_backward", "linear_forward", "linear_backward",
             "attention_forward", "attention_backward", "dijkstra")


def kernel_cases(H=64, nx=80, T=12, C=10):
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(4 * H, nx + H)), rng.normal(size=4 * H)
    x, h, c = rng.normal(size=nx), rng.normal(size=H), rng.normal(size=H)
    Wl, bl, xl = rng.normal(size=(H, 2 * H)), rng.normal(size=H), rng.normal(size=2 * H)
    Wa, M = rng.normal(size=(H, H)), rng.normal(size=(T, H))
    acc, u, v, w = rng.random(T), rng.normal(size=C), rng.normal(size=C), rng.normal(size=C)
    dW, db = np.zeros_like(W), np.zeros_like(b)
    env = generate_environment(3)
    indptr, indices, weights = env.csr

    def lstm(k):
        out = k.lstm_forward(W, b, x, h, c)
        k.lstm_backward(W, x, h, c, out[2], out[3], out[0], out[1], dW, db)

    def linear(k):
        y = k.linear_forward(Wl, bl, xl, kernels.ACT_TANH)
        k.linear_backward(Wl, xl, y, y, kernels.ACT_TANH, np.zeros_like(Wl), np.zeros_like(bl))

    def attention(k):
        alpha, ctx, q, feat = k.attention_forward(Wa, M, h, acc, u, v, w)
        k.attention_backward(Wa, M, h, acc, u, w, alpha, q, feat, ctx, alpha,
                             np.zeros_like(Wa), np.zeros_like(M), np.zeros_like(u),
                             np.zeros_like(v), np.zeros_like(w))

    def dijkstra(k):
        k.dijkstra(indptr, indices, weights, [0])

    return {"lstm fwd+bwd": lstm, "linear fwd+bwd": linear,
            "attention fwd+bwd": attention, "dijkstra": dijkstra}


def episode_case():
    envs = [generate_environment(10 + i, env_id=f"b{i}") for i in range(3)]
    splits = generate_dataset(envs, {"b0": "train", "b1": "dev", "b2": "test"},
                              DatagenParams(eval_split_target=5), np.random.default_rng(0))
    vocab = Vocabulary.build(p.end_goal for p in splits.train)
    params = P.ModelParams(P.PolicyConfig(vocab_size=len(vocab)), seed=0)
    by_id = {e.env_id: e for e in envs}
    points = splits.train[:8]

    def run():
        for i, dp in enumerate(points):
            tape = P.Tape()
            run_episode(dp, by_id[dp.env_id], params, vocab, "train", "learned",
                        rng=np.random.default_rng(i), settings=EpisodeSettings(), tape=tape)
            tape.backward()

    return run


def use_backend(impl):
    for name in SWAPPABLE:
        setattr(kernels, name, getattr(impl, name))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.implementations()
    original = {name: getattr(kernels, name) for name in SWAPPABLE}
    print(f"default backend: {kernels.BACKEND}")
    rows = []
    for label, fn in kernel_cases().items():
        times = {}
        for name, impl in impls.items():
            n = 2000
            times[name] = min(timeit.repeat(lambda: fn(impl), number=n, repeat=args.repeat)) / n * 1e6
        rows.append((label, "us/call", times))
    episode = episode_case()
    times = {}
    for name, impl in impls.items():
        use_backend(impl)
        times[name] = min(timeit.repeat(episode, number=1, repeat=args.repeat)) / 8 * 1e3
    for name, fn in original.items():
        setattr(kernels, name, fn)
    rows.append(("train episode fwd+bwd", "ms/episode", times))

    names = list(impls)
    print(f"{'case':24s} {'unit':11s} " + " ".join(f"{n:>10s}" for n in names) + "    speedup")
    for label, unit, t in rows:
        speed = t["python"] / t[names[-1]] if len(names) > 1 else 1.0
        print(f"{label:24s} {unit:11s} " + " ".join(f"{t[n]:10.2f}" for n in names) + f"  {speed:8.2f}x")


if __name__ == "__main__":
    main()
