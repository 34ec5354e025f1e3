"""Episode rollout (two decoding passes, budgeted requests, BCUI acting) and the training loop."""
from __future__ import annotations

import csv
import enum
import json
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from vnla.env import NavAction, Pose, observe, transition
from vnla.language import Vocabulary, prepend_subgoal
from vnla.oracle import (
    ALL_RULES,
    AdvisorMode,
    AskAction,
    TeacherContext,
    advisor,
    ask_teacher,
    shortest_path,
    teacher_action,
    teacher_rollout,
)
from vnla import policy as P

L_MAX = 25
EVAL_BUDGET_Z = 1.95


class TrainingError(RuntimeError):
    pass


class AskPolicyKind(str, enum.Enum):
    NONE = "none"
    FIRST = "first"
    RANDOM = "random"
    TEACHER = "teacher"
    LEARNED = "learned"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- budgets ----------------------------------------------------------------


@dataclass
class BudgetState:
    T_hat: int
    B_hat: int
    b: int

    def __post_init__(self):
        if not 0 <= self.b <= self.B_hat:
            raise ValueError(f"remaining budget {self.b} outside [0, {self.B_hat}]")


def time_budget_train(dp, env) -> int:
    """Mean teacher action count over the goals, taken one goal at a time."""
    counts = [len(teacher_rollout(env, dp.start_pose, frozenset([g]))) for g in dp.goal_viewpoints]
    return round_half_up(sum(counts) / len(counts))


def budget_key(dp) -> tuple:
    if dp.room_label is not None:
        return ("room", dp.start_room_label, dp.room_label)
    return ("object", dp.start_room_label, dp.object_label)


def build_budget_stats(train_points) -> dict:
    stats: dict = {}
    for dp in train_points:
        stats.setdefault(budget_key(dp), []).append(dp.path_length)
    return stats


def time_budget_eval(dp, train_stats: dict, L_max: int = L_MAX) -> int:
    """Upper confidence bound on the action count of matching training points."""
    S = train_stats.get(budget_key(dp), [])
    return time_budget_from_counts(S, L_max)


def time_budget_from_counts(S, L_max: int = L_MAX) -> int:
    n = len(S)
    if n <= 1:
        return L_max
    S = np.asarray(S, dtype=float)
    upper = S.mean() + EVAL_BUDGET_Z * S.std(ddof=1) / math.sqrt(n)
    return round_half_up(min(upper, L_max))


def sample_help_budget(T_hat: int, tau: float, k: int, rng) -> int:
    if not 0.0 <= tau <= 1.0 or k < 1:
        raise ValueError(f"need tau in [0, 1] and k >= 1 (got tau={tau}, k={k})")
    B = T_hat * tau / k
    base = math.floor(B + 1e-12)
    frac = max(B - base, 0.0)
    return base + int(rng.random() < frac)


def random_request_steps(T_hat: int, B_hat: int, rng) -> frozenset:
    n = min(B_hat, T_hat)
    return frozenset(int(s) + 1 for s in rng.choice(T_hat, size=n, replace=False))


def baseline_ask(kind, t: int, budget: BudgetState, ctx=None, rng=None, learned_dist=None,
                 random_steps=frozenset(), teacher_kwargs=None) -> AskAction:
    kind = AskPolicyKind(kind)
    if kind == AskPolicyKind.NONE:
        return AskAction.DO_NOTHING
    if kind == AskPolicyKind.FIRST:
        return AskAction.REQUEST if budget.b > 0 else AskAction.DO_NOTHING
    if kind == AskPolicyKind.RANDOM:
        return AskAction.REQUEST if t in random_steps else AskAction.DO_NOTHING
    if kind == AskPolicyKind.TEACHER:
        return ask_teacher(ctx, **(teacher_kwargs or {}))
    return AskAction(int(np.argmax(learned_dist)))


# -- episodes ---------------------------------------------------------------


@dataclass
class EpisodeSettings:
    k: int = 4
    tau: float = 0.4
    max_time_budget: int = L_MAX
    feature_seed: int = 0
    texture_dim: int = 16
    rules: frozenset = ALL_RULES
    delta: float = 8.0
    epsilon: float = 1.0
    mu: int = 9
    deviation: str = "euclidean"
    dropout: float = 0.0

    def teacher_kwargs(self) -> dict:
        return {"enabled_rules": self.rules, "delta": self.delta, "epsilon": self.epsilon,
                "mu": self.mu, "deviation": self.deviation}


@dataclass
class StepRecord:
    t: int
    pose: Pose
    tentative_dist: np.ndarray
    final_dist: np.ndarray
    ask_dist: np.ndarray
    ask_decision: int
    ask_actor: str
    granted: bool
    budget_left: int
    goal_text: str
    advice: tuple | None
    advice_text: str | None
    acting: str  # "teacher", "forced" or "learned"
    nav_action: int
    teacher_nav: int | None
    teacher_ask: int | None
    nav_loss: float | None = None
    ask_loss: float | None = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["pose"] = self.pose.to_list()
        for key in ("tentative_dist", "final_dist", "ask_dist"):
            d[key] = [float(x) for x in d[key]]
        if self.advice is not None:
            d["advice"] = [int(a) for a in self.advice]
        return d


@dataclass
class EpisodeTrace:
    env_id: str
    mode: str
    ask_kind: str
    advisor_mode: str
    T_hat: int
    B_hat: int
    steps: list = field(default_factory=list)
    final_viewpoint: int = -1
    stopped: bool = False
    datapoint: int = -1

    @property
    def requests(self) -> list[int]:
        return [s.t for s in self.steps if s.granted]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "steps"}
        d["steps"] = [s.to_dict() for s in self.steps]
        return d


def run_episode(dp, env, params: P.ModelParams, vocab: Vocabulary, mode: str, ask_kind,
                advisor_mode="indirect", rng=None, settings: EpisodeSettings | None = None,
                budget_stats: dict | None = None, tape: P.Tape | None = None,
                loss_weight: float = 1.0) -> tuple[EpisodeTrace, float, float]:
    """Roll out one episode. Returns ``(trace, summed nav loss, summed ask loss)``.

    In train mode with a tape, losses are recorded on it for a later backward.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    settings = settings or EpisodeSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = AskPolicyKind(ask_kind)
    adv_mode = AdvisorMode.parse(advisor_mode)
    training = mode == "train"
    goals = dp.goals
    k = settings.k

    if training:
        T_hat = min(time_budget_train(dp, env), settings.max_time_budget)
    else:
        T_hat = time_budget_eval(dp, budget_stats or {}, settings.max_time_budget)
    B_hat = sample_help_budget(T_hat, settings.tau, k, rng)
    b = B_hat
    random_steps = random_request_steps(T_hat, B_hat, rng) if kind == AskPolicyKind.RANDOM else frozenset()
    needs_path = "a" in settings.rules and (training or kind == AskPolicyKind.TEACHER)
    original_path = tuple(shortest_path(env, dp.start_pose.viewpoint, goals)) if needs_path else ()

    end_goal_tokens = vocab.encode(dp.end_goal)
    goal_text = dp.end_goal
    state = P.NavPolicyState(params)
    P.set_goal(state, end_goal_tokens, params, tape)

    trace = EpisodeTrace(dp.env_id, mode, kind.value, adv_mode.value, T_hat, B_hat)
    pose = dp.start_pose
    prev_nav, prev_ask = int(NavAction.START), int(AskAction.START)
    last_request = None
    forced: list[int] = []
    stay = 0
    nav_total = ask_total = 0.0
    teacher_kw = settings.teacher_kwargs()
    dec_in = params.cfg.obs_dim + params.cfg.nav_action_emb + params.cfg.ask_action_emb

    for t in range(1, T_hat + 1):
        obs = observe(env, pose, settings.feature_seed, dim=params.cfg.obs_dim,
                      texture_dim=settings.texture_dim)
        mask = None
        if training and settings.dropout > 0.0:
            # one mask per step, shared by both passes
            keep = 1.0 - settings.dropout
            mask = (rng.random(dec_in) < keep) / keep
        out1 = P.decode_pass(state, obs, prev_nav, prev_ask, params, 1, tape, mask)
        ask_dist, ask_logits = P.ask_forward(obs, b, out1.dist, out1.h_dec, out1.h_att, params, tape)

        ctx = TeacherContext(out1.dist, t, T_hat, b, stay, env, pose, goals, original_path)
        teacher_ask = None
        if training or kind == AskPolicyKind.TEACHER:
            teacher_ask = ask_teacher(ctx, **teacher_kw)
        budget = BudgetState(T_hat, B_hat, b)
        if training and kind in (AskPolicyKind.TEACHER, AskPolicyKind.LEARNED):
            decision, actor = teacher_ask, "teacher"
        elif kind == AskPolicyKind.TEACHER:
            decision, actor = teacher_ask, "teacher"
        elif kind == AskPolicyKind.LEARNED:
            decision, actor = AskAction(int(np.argmax(ask_dist))), "learned"
        else:
            decision = baseline_ask(kind, t, budget, ctx, rng, ask_dist, random_steps)
            actor = kind.value

        granted = decision == AskAction.REQUEST and b > 0
        advice = advice_text = None
        if granted:
            resp = advisor(env, pose, goals, k, adv_mode)
            advice, advice_text = resp.actions, resp.text
            b -= 1
            last_request = t
            if resp.text is not None:
                goal_text = prepend_subgoal(resp.text, dp.end_goal)
                P.set_goal(state, vocab.encode(goal_text), params, tape)
            if adv_mode != AdvisorMode.INDIRECT:
                forced = [int(a) for a in resp.actions]
        ask_now = int(AskAction.REQUEST if granted else AskAction.DO_NOTHING)

        out2 = P.decode_pass(state, obs, prev_nav, ask_now, params, 2, tape, mask)
        teacher_nav = int(teacher_action(env, pose, goals)) if training else None

        if training and last_request is not None and t - last_request < k:
            action, acting = teacher_nav, "teacher"
        elif not training and forced:
            action, acting = forced.pop(0), "forced"
        elif training:
            action, acting = P.select_action(out2.dist, "sample", rng), "learned"
        else:
            action, acting = P.select_action(out2.dist, "argmax"), "learned"

        nav_loss = ask_loss = None
        if training:
            nav_loss = P.nll(tape, out2.logits, out2.dist, teacher_nav, loss_weight)
            ask_loss = P.nll(tape, ask_logits, ask_dist, int(teacher_ask), loss_weight)
            nav_total += nav_loss
            ask_total += ask_loss

        trace.steps.append(StepRecord(
            t, pose, out1.dist, out2.dist, ask_dist, int(decision), actor, granted, b,
            goal_text, advice, advice_text, acting, int(action), teacher_nav,
            None if teacher_ask is None else int(teacher_ask), nav_loss, ask_loss,
        ))
        prev_nav, prev_ask = int(action), ask_now
        if action == NavAction.STOP:
            trace.stopped = True
            break
        new_pose = transition(pose, NavAction(action), env, goals)
        stay = stay + 1 if new_pose.viewpoint == pose.viewpoint else 0
        pose = new_pose

    trace.final_viewpoint = pose.viewpoint
    return trace, nav_total, ask_total


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    ask_kind: str = "learned"
    advisor_mode: str = "indirect"
    eval_every: int = 0  # 0 disables periodic dev evaluation
    eval_split: str = "dev_unseen"
    eval_size: int = 100
    checkpoint_every: int = 50

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**data)


# state shared with forked workers; set before the pool starts
_WORKER: dict = {}


def _episode_gradients(task):
    arrays, items, mode_args = task
    w = _WORKER
    params = P.ModelParams(w["policy_cfg"], arrays)
    out = []
    for ordinal, dp_index, seed_key in items:
        dp = w["points"][dp_index]
        env = w["envs"][dp.env_id]
        params.zero_grad()
        tape = P.Tape()
        rng = np.random.default_rng(seed_key)
        try:
            trace, nav_loss, ask_loss = run_episode(
                dp, env, params, w["vocab"], "train", mode_args["ask_kind"],
                mode_args["advisor_mode"], rng, w["settings"], tape=tape,
                loss_weight=mode_args["loss_weight"],
            )
        except Exception as exc:  # add episode context
            raise TrainingError(f"episode {ordinal} (datapoint {dp_index}, {dp.env_id}): {exc}") from exc
        if not (math.isfinite(nav_loss) and math.isfinite(ask_loss)):
            trace.datapoint = dp_index
            return [("nonfinite", ordinal, dp_index, trace.to_dict())]
        tape.backward()
        flat = np.concatenate([params[n].g.ravel() for n in params.names])
        out.append(("ok", ordinal, flat, (nav_loss, ask_loss, len(trace.steps))))
    return out


def _chunks(items, n):
    size = max(1, math.ceil(len(items) / n))
    return [items[i : i + size] for i in range(0, len(items), size)]


class EpisodePool:
    """Runs episode tasks serially or over forked workers; results keep submission order."""

    def __init__(self, workers: int, state: dict):
        _WORKER.clear()
        _WORKER.update(state)
        self.workers = max(1, int(workers))
        self.pool = None
        if self.workers > 1:
            self.pool = mp.get_context("fork").Pool(self.workers)

    def map(self, fn, tasks):
        if self.pool is None:
            return [fn(t) for t in tasks]
        return self.pool.map(fn, tasks)

    def close(self):
        if self.pool is not None:
            self.pool.close()
            self.pool.join()
            self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train(train_points, envs: dict, vocab: Vocabulary, policy_cfg: P.PolicyConfig,
          train_cfg: TrainConfig, settings: EpisodeSettings, seed: int, out_dir,
          dev_points=None, workers: int = 1, resume: bool = False, config_echo: dict | None = None,
          log=None) -> Path:
    """Train and write ``checkpoint.ckpt`` plus ``train_log.csv`` into ``out_dir``."""
    if not train_points:
        raise TrainingError("empty training split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "train_log.csv"
    policy_cfg.vocab_size = len(vocab)

    start_it = 0
    if resume and ckpt_path.exists():
        ck = P.load_checkpoint(ckpt_path)
        params, opt = ck.params, ck.optimizer
        if ck.vocab != vocab:
            raise TrainingError("checkpoint vocabulary differs from the dataset vocabulary")
        start_it = int(ck.header["extra"].get("iteration", 0))
        rows = _read_log(log_path)[:start_it]
    else:
        params = P.ModelParams(policy_cfg, seed=seed)
        opt = P.Adam(params, train_cfg.lr, weight_decay=train_cfg.weight_decay)
        rows = []
    _write_log(log_path, rows)

    budget_stats = build_budget_stats(train_points)
    state = {"policy_cfg": params.cfg, "points": list(train_points), "envs": envs,
             "vocab": vocab, "settings": settings}
    mode_args = {"ask_kind": train_cfg.ask_kind, "advisor_mode": train_cfg.advisor_mode,
                 "loss_weight": 1.0 / train_cfg.batch_size}

    def save(it):
        extra = {"iteration": it, "seed": seed}
        P.save_checkpoint(ckpt_path, params, vocab, config_echo, opt, extra)

    with EpisodePool(workers, state) as pool:
        for it in range(start_it, train_cfg.iterations):
            rng = np.random.default_rng([seed, it])
            idx = rng.integers(len(train_points), size=train_cfg.batch_size)
            items = [(e, int(i), [seed, it, e]) for e, i in enumerate(idx)]
            arrays = params.arrays()
            tasks = [(arrays, chunk, mode_args) for chunk in _chunks(items, pool.workers)]
            results = [r for chunk in pool.map(_episode_gradients, tasks) for r in chunk]
            total = None
            nav_sum = ask_sum = 0.0
            n_steps = 0
            for r in results:
                if r[0] == "nonfinite":
                    dump = out_dir / f"nonfinite_it{it}_ep{r[1]}.json"
                    dump.write_text(json.dumps(r[3], indent=1))
                    raise TrainingError(f"non-finite loss at iteration {it}; episode dumped to {dump}")
                _, _, flat, (nl, al, ns) = r
                total = flat.copy() if total is None else total + flat
                nav_sum += nl
                ask_sum += al
                n_steps += ns
            grads = {}
            pos = 0
            for name in params.names:
                size = params[name].v.size
                grads[name] = total[pos : pos + size].reshape(params[name].v.shape)
                pos += size
            opt.step(grads)

            dev = ""
            if dev_points and train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0:
                from vnla.evaluation import run_split, success_rate

                traces = run_split(dev_points[: train_cfg.eval_size], envs, params, vocab,
                                   train_cfg.ask_kind, train_cfg.advisor_mode, seed, settings,
                                   budget_stats, workers=1)
                dev = repr(success_rate(traces, dev_points[: train_cfg.eval_size], envs))
            row = [it + 1, repr(nav_sum / n_steps), repr(ask_sum / n_steps), dev]
            rows.append(row)
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)
            if log is not None:
                log(f"iter {it + 1}: nav {nav_sum / n_steps:.4f} ask {ask_sum / n_steps:.4f}"
                    + (f" dev {dev}" if dev else ""))
            if train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
                save(it + 1)
    save(train_cfg.iterations)
    return ckpt_path


LOG_HEADER = ["iteration", "nav_loss", "ask_loss", "dev_success"]


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        w.writerows(rows)


def _read_log(path):
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]
