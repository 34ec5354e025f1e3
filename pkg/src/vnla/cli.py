"""Command line: ``vnla {worldgen,datagen,train,eval,analyze}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from vnla import policy as P
from vnla.config import ConfigError, load_config, rules_from
from vnla.env import EnvironmentGraph
from vnla.evaluation import (
    analyze_by_label,
    analyze_requests,
    evaluate,
    format_report,
    histogram_to_csv,
)
from vnla.language import Vocabulary
from vnla.training import EpisodeSettings, TrainConfig, build_budget_stats, train
from vnla.worldgen import (
    DatagenParams,
    GenerationError,
    SPLIT_NAMES,
    WorldgenParams,
    dataset_stats,
    generate_dataset,
    generate_environment,
    load_splits,
    save_splits,
)

log = logging.getLogger("vnla")

ENVS_SCHEMA = "vnla-envs/1"
REPORT_SCHEMA = "vnla-report/1"
TRACES_SCHEMA = "vnla-traces/1"
ANALYSIS_SCHEMA = "vnla-analysis/1"


class DataError(RuntimeError):
    pass


def data_root() -> Path:
    return Path(os.environ.get("VNLA_DATA_DIR", "vnla_data"))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise DataError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- builders from a resolved config -----------------------------------------


def worldgen_params(cfg) -> WorldgenParams:
    wg = {k: v for k, v in cfg["worldgen"].items()
          if k not in ("num_envs", "train_fraction", "dev_fraction")}
    return WorldgenParams.from_dict(wg)


def datagen_params(cfg) -> DatagenParams:
    return DatagenParams(**cfg["datagen"])


def episode_settings(cfg) -> EpisodeSettings:
    at, tr = cfg["ask_teacher"], cfg["training"]
    return EpisodeSettings(
        k=tr["k"], tau=tr["tau"], max_time_budget=tr["max_time_budget"],
        feature_seed=cfg["env"]["feature_seed"], texture_dim=cfg["env"]["texture_dim"],
        rules=rules_from(at["rules"]),
        delta=at["delta"], epsilon=at["epsilon"], mu=at["mu"], deviation=at["deviation"],
        dropout=cfg["policy"]["dropout"],
    )


def policy_config(cfg, vocab_size: int) -> P.PolicyConfig:
    pc = dict(cfg["policy"])
    tr = cfg["training"]
    max_budget = -(-tr["max_time_budget"] * tr["tau"] // tr["k"])  # ceil
    return P.PolicyConfig(vocab_size=vocab_size, obs_dim=cfg["env"]["obs_dim"],
                          max_budget=int(max_budget) + 1, **pc)


def train_config(cfg) -> TrainConfig:
    keys = {"iterations", "batch_size", "lr", "weight_decay", "ask_kind", "advisor_mode",
            "eval_every", "eval_split", "eval_size", "checkpoint_every"}
    return TrainConfig(**{k: v for k, v in cfg["training"].items() if k in keys})


# -- loading helpers ---------------------------------------------------------


def split_envs(num_envs: int, train_fraction: float, dev_fraction: float) -> list[str]:
    n_train = max(1, round(num_envs * train_fraction))
    n_dev = round(num_envs * dev_fraction)
    if n_train + n_dev > num_envs:
        raise ConfigError("not enough environments for the requested split fractions")
    return ["train"] * n_train + ["dev"] * n_dev + ["test"] * (num_envs - n_train - n_dev)


def load_envs(env_dir) -> tuple[dict, dict]:
    env_dir = Path(env_dir)
    manifest_path = env_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no environment manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != ENVS_SCHEMA:
        raise DataError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")
    envs, splits = {}, {}
    for entry in manifest["envs"]:
        path = env_dir / entry["file"]
        if not path.exists():
            raise DataError(f"environment {entry['id']} listed in {manifest_path} is missing")
        envs[entry["id"]] = EnvironmentGraph.load(path)
        splits[entry["id"]] = entry["split"]
    return envs, splits


def load_data(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "splits.json").exists():
        raise DataError(f"no dataset manifest at {data_dir / 'splits.json'}")
    splits = load_splits(data_dir)
    vocab_path = data_dir / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    return splits, vocab


def _check_env_ids(points, envs, where):
    missing = sorted({p.env_id for p in points} - set(envs))
    if missing:
        raise DataError(f"{where} references unknown environments {missing[:5]}")


# -- commands ----------------------------------------------------------------


def cmd_worldgen(cfg, seed: int, out: Path, force: bool = False, num_envs: int | None = None) -> dict:
    wg = cfg["worldgen"]
    n = num_envs if num_envs is not None else wg["num_envs"]
    if n < 1:
        raise ConfigError("need at least one environment")
    params = worldgen_params(cfg)
    roles = split_envs(n, wg["train_fraction"], wg["dev_fraction"])
    _prepare_out(out, force)
    entries = []
    for i, role in enumerate(roles):
        env_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        env_id = f"env{i:03d}"
        env = generate_environment(env_seed, params, env_id=env_id)
        fname = f"{env_id}.json"
        env.save(out / fname)
        entries.append({"id": env_id, "file": fname, "split": role,
                        "num_viewpoints": env.num_viewpoints})
    manifest = {"schema": ENVS_SCHEMA, "seed": seed, "config": cfg, "envs": entries}
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


def cmd_datagen(cfg, seed: int, env_dir: Path, out: Path, force: bool = False) -> dict:
    envs, roles = load_envs(env_dir)
    params = datagen_params(cfg)
    splits = generate_dataset(list(envs.values()), roles, params, np.random.default_rng([seed, 1]))
    _prepare_out(out, force)
    extra = {"seed": seed, "config": cfg, "mode": params.mode,
             "env_ids": {r: sorted(e for e, s in roles.items() if s == r) for r in ("train", "dev", "test")}}
    manifest = save_splits(splits, out, extra)
    vocab = Vocabulary.build(p.end_goal for p in splits.train)
    vocab.save(out / "vocab.txt")
    stats = {"schema": "vnla-stats/1", "seed": seed, "stats": dataset_stats(splits)}
    (out / "stats.json").write_text(_dump(stats))
    return manifest


def cmd_train(cfg, seed: int, data_dir: Path, env_dir: Path, out: Path, workers: int = 1,
              resume: bool = False, force: bool = False) -> Path:
    splits, vocab = load_data(data_dir)
    envs, _ = load_envs(env_dir)
    _check_env_ids(splits.train, envs, f"{data_dir}/train.jsonl")
    if vocab is None:
        vocab = Vocabulary.build(p.end_goal for p in splits.train)
    if not resume:
        _prepare_out(out, force)
    tc = train_config(cfg)
    dev = splits[tc.eval_split] if tc.eval_every else None
    return train(splits.train, envs, vocab, policy_config(cfg, len(vocab)), tc,
                 episode_settings(cfg), seed, out, dev_points=dev, workers=workers,
                 resume=resume, config_echo=cfg, log=log.info)


def cmd_eval(cfg, seed: int, checkpoint: Path, data_dir: Path, env_dir: Path, out: Path,
             workers: int = 1, force: bool = False, save_traces: bool = True) -> dict:
    ev = cfg["eval"]
    try:
        ck = P.load_checkpoint(checkpoint)
    except (OSError, P.CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from exc
    if ck.params.cfg.obs_dim != cfg["env"]["obs_dim"]:
        raise DataError("checkpoint observation size does not match env.obs_dim")
    splits, _ = load_data(data_dir)
    envs, _ = load_envs(env_dir)
    if ev["split"] not in SPLIT_NAMES:
        raise ConfigError(f"eval.split must be one of {SPLIT_NAMES}")
    points = splits[ev["split"]]
    if not points:
        raise DataError(f"split {ev['split']} is empty")
    _check_env_ids(points, envs, ev["split"])
    seeds = [int(s) + seed for s in ev["seeds"]]
    report, traces = evaluate(
        ck.params, ck.vocab, points, envs, ev["ask_kind"], ev["advisor_mode"], seeds,
        episode_settings(cfg), build_budget_stats(splits.train), workers=workers,
        d=ev["success_radius"], require_explicit_stop=ev["require_explicit_stop"],
        nav_error_cap=ev["nav_error_cap"],
    )
    _prepare_out(out, force)
    doc = {"schema": REPORT_SCHEMA, "seed": seed, "config": cfg, "split": ev["split"],
           "report": report.to_dict()}
    (out / "report.json").write_text(_dump(doc))
    name = f"{ev['ask_kind']}/{ev['advisor_mode']}"
    (out / "report.txt").write_text(format_report({name: report}))
    all_traces = [t for s in seeds for t in traces[s]]
    (out / "request_hist.csv").write_text(histogram_to_csv(analyze_requests(all_traces)))
    if save_traces:
        with open(out / "traces.jsonl", "w") as fh:
            for s in seeds:
                for t in traces[s]:
                    row = {"schema": TRACES_SCHEMA, "seed": s, "split": ev["split"], **t.to_dict()}
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    return doc


def cmd_analyze(cfg, trace_paths, out: Path, data_dir: Path | None = None,
                env_dir: Path | None = None, force: bool = False) -> dict:
    files = []
    for p in trace_paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.rglob("traces.jsonl")))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"no such trace file or directory: {p}")
    traces = []
    for f in files:
        with open(f) as fh:
            traces.extend(json.loads(line) for line in fh if line.strip())
    hist = analyze_requests(traces)
    tables = {"objects": [], "rooms": []}
    if traces and data_dir is not None and env_dir is not None:
        splits, _ = load_data(data_dir)
        envs, _ = load_envs(env_dir)
        points = [splits[t["split"]][t["datapoint"]] for t in traces]
        tables = analyze_by_label(traces, points, envs, cfg["eval"]["label_threshold"],
                                  cfg["eval"]["success_radius"])
    _prepare_out(out, force)
    (out / "request_hist.csv").write_text(histogram_to_csv(hist))
    doc = {"schema": ANALYSIS_SCHEMA, "config": cfg, "num_traces": len(traces),
           "request_histogram": hist, "by_label": tables}
    (out / "analysis.json").write_text(_dump(doc))
    return doc


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. training.iterations=100")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vnla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("worldgen", parents=[common], help="generate environments")
    p.add_argument("--out", type=Path)
    p.add_argument("--num-envs", type=int)

    p = sub.add_parser("datagen", parents=[common], help="generate dataset splits")
    p.add_argument("--envs", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--mode", choices=["asknav", "noroom"])

    p = sub.add_parser("train", parents=[common], help="train an agent")
    p.add_argument("--data", type=Path)
    p.add_argument("--envs", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--ask", choices=["none", "first", "random", "teacher", "learned"])
    p.add_argument("--advisor", choices=["indirect", "direct_sub", "direct_nosub"])
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--envs", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--split", choices=list(SPLIT_NAMES))
    p.add_argument("--ask", choices=["none", "first", "random", "teacher", "learned"])
    p.add_argument("--advisor", choices=["indirect", "direct_sub", "direct_nosub"])
    p.add_argument("--rules", help='help-requesting rule subset, e.g. "bcd" or ""')
    p.add_argument("--no-traces", action="store_true")

    p = sub.add_parser("analyze", parents=[common], help="request timing and per-label tables")
    p.add_argument("traces", nargs="*", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--envs", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def run(args) -> int:
    overrides = list(args.overrides)
    root = data_root()
    cmd = args.command
    if cmd == "datagen" and args.mode:
        overrides.append(f"datagen.mode={args.mode}")
    if cmd == "train":
        if args.ask:
            overrides.append(f"training.ask_kind={args.ask}")
        if args.advisor:
            overrides.append(f"training.advisor_mode={args.advisor}")
    if cmd == "eval":
        if args.ask:
            overrides.append(f"eval.ask_kind={args.ask}")
        if args.advisor:
            overrides.append(f"eval.advisor_mode={args.advisor}")
        if args.split:
            overrides.append(f"eval.split={args.split}")
        if args.rules is not None:
            overrides.append(f"ask_teacher.rules='{args.rules}'")
    cfg = load_config(args.config, overrides)

    env_dir = getattr(args, "envs", None) or root / "envs"
    if cmd == "worldgen":
        out = args.out or root / "envs"
        m = cmd_worldgen(cfg, args.seed, out, args.force, args.num_envs)
        print(f"wrote {len(m['envs'])} environments to {out}")
    elif cmd == "datagen":
        out = args.out or root / "data" / cfg["datagen"]["mode"]
        m = cmd_datagen(cfg, args.seed, env_dir, out, args.force)
        counts = ", ".join(f"{k}={v['count']}" for k, v in m["files"].items())
        print(f"wrote dataset to {out}: {counts}")
    elif cmd == "train":
        data = args.data or root / "data" / "asknav"
        tr = cfg["training"]
        out = args.out or root / "runs" / f"{tr['ask_kind']}_{tr['advisor_mode']}"
        path = cmd_train(cfg, args.seed, data, env_dir, out, args.workers, args.resume, args.force)
        print(f"wrote {path}")
    elif cmd == "eval":
        data = args.data or root / "data" / "asknav"
        ev = cfg["eval"]
        out = args.out or root / "eval" / f"{ev['ask_kind']}_{ev['advisor_mode']}_{ev['split']}"
        doc = cmd_eval(cfg, args.seed, args.checkpoint, data, env_dir, out, args.workers,
                       args.force, not args.no_traces)
        print((out / "report.txt").read_text(), end="")
    elif cmd == "analyze":
        out = args.out or root / "analysis"
        paths = args.traces or [root / "eval"]
        doc = cmd_analyze(cfg, paths, out, args.data, args.envs, args.force)
        print(f"analyzed {doc['num_traces']} traces into {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, GenerationError, FileNotFoundError, P.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
