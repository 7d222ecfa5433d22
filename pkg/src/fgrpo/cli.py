"""Command-line entry points: ``train``, ``score``, ``mcts-gen`` and ``eval``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import BBox, SourceTag, TrainConfig, seeded_rng
from .mcts import SearchParams, generate_sft_records
from .parse import parse_response
from .policy import TABULAR_POLICY_LR, PolicyParams
from .remote import ENDPOINT_ENV, RemoteJudgeClient
from .rewards import JudgeError, score_response
from .synthenv import EnvConfig, SynthEnv, SynthTask
from .trainer import eval_split, evaluate, train, write_dynamics_csv

log = logging.getLogger("fgrpo")

SECTIONS = ("env", "run")
RUN_DEFAULTS = {"n_eval": 500, "sample_every": 100}
MCTS_DEFAULTS = {"n_tasks": 16, "seed": 0, "quota_direct": 8, "quota_corrected": 2}


class ConfigError(ValueError):
    pass


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    with open(path, "rb") as fh:
        if path.suffix == ".json":
            return json.load(fh)
        return tomllib.load(fh)


def parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    cfg = {k: dict(v) if isinstance(v, dict) else v for k, v in cfg.items()}
    for item in overrides:
        path, value = parse_override(item)
        target = cfg
        for part in path[:-1]:
            target = target.setdefault(part, {})
        target[path[-1]] = value
    return cfg


def build_dataclass(cls, values: dict[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}" if section else f"unknown config key {key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section or 'train'} config: {exc}") from exc


def split_config(raw: dict[str, Any]) -> tuple[TrainConfig, EnvConfig, dict[str, Any]]:
    train_keys = {k: v for k, v in raw.items() if k not in SECTIONS}
    try:
        cfg = TrainConfig.from_dict(train_keys)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    env_cfg = build_dataclass(EnvConfig, raw.get("env", {}), "env")
    run = dict(RUN_DEFAULTS)
    for key, value in raw.get("run", {}).items():
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"unknown config key run.{key}")
        run[key] = int(value)
    return cfg, env_cfg, run


def config_snapshot(cfg: TrainConfig, env_cfg: EnvConfig, run: dict[str, Any]) -> dict[str, Any]:
    return {**cfg.to_dict(), "env": dataclasses.asdict(env_cfg), "run": dict(run)}


# --- train ----------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    raw = load_config_file(args.config)
    raw.setdefault("policy_lr", TABULAR_POLICY_LR)
    extra = list(args.set)
    if args.mode is not None:
        extra.append(f"mode={json.dumps(args.mode)}")
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    if args.steps is not None:
        extra.append(f"total_steps={args.steps}")
    cfg, env_cfg, run = split_config(apply_overrides(raw, extra))

    out = Path(args.out or f"runs/{cfg.mode.value}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config_snapshot(cfg, env_cfg, run), fh, indent=2, sort_keys=True)

    with open(out / "rollouts.jsonl", "w") as samples:

        def keep_samples(entry, batch):
            if run["sample_every"] and entry.step % run["sample_every"] == 0:
                for rec in batch[0].rollouts:
                    samples.write(json.dumps({"step": entry.step, **rec.to_dict()}, sort_keys=True) + "\n")

        result = train(cfg, env_cfg, n_eval=run["n_eval"], callback=keep_samples)

    write_dynamics_csv(result.logs, out / "dynamics.csv")
    result.params.save(out / "policy.json")
    metrics = {**result.metrics.to_dict(), "final_lambdas": result.lagrange.lambdas()}
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(json.dumps(metrics, sort_keys=True))
    return 0


# --- eval -----------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg, env_cfg, run = split_config(load_config_file(run_dir / "config.json"))
    env = SynthEnv(env_cfg)
    params = PolicyParams.load(args.policy or run_dir / "policy.json")
    n = args.n_eval or run["n_eval"]
    print(json.dumps(evaluate(params, eval_split(env, n), env).to_dict(), sort_keys=True))
    return 0


# --- score ----------------------------------------------------------------------


def _score_record(d: dict[str, Any], env: SynthEnv, judges) -> dict[str, Any]:
    task = SynthTask.from_dict(d["task"]) if d.get("task") else None
    gt_boxes = [BBox(*b) for b in d["gt_boxes"]] if d.get("gt_boxes") else None
    if "source_tag" in d:
        tag = SourceTag(d["source_tag"])
    else:
        tag = SourceTag.HAS_GT_BOXES if gt_boxes else SourceTag.NO_GT_BOXES
    resp = parse_response(str(d["raw_response"]))
    scored = score_response(resp, str(d["gt_answer"]), gt_boxes, tag, judges, d.get("question", ""), task)
    return {
        "prompt_id": d.get("prompt_id"),
        "rewards": scored.rewards.to_dict(),
        "sentences": [
            {"index": s.index, "text": s.text, "kind": s.kind.value, "verdict": s.verdict.value}
            for s in scored.sentences
        ],
        "diagnostics": list(resp.diagnostics),
    }


def cmd_score(args: argparse.Namespace) -> int:
    env = SynthEnv(EnvConfig())
    if args.backend == "remote":
        endpoint = args.endpoint or None
        client = RemoteJudgeClient(endpoint) if endpoint else RemoteJudgeClient.from_env()
        judges = client.judges()
    else:
        judges = env.judges()

    results, malformed, n_lines = [], [], 0
    with open(args.input) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                results.append(_score_record(json.loads(line), env, judges))
            except (ValueError, KeyError, TypeError) as exc:
                malformed.append(lineno)
                print(f"{args.input}:{lineno}: skipped malformed record: {exc}", file=sys.stderr)

    with open(args.output, "w") as out:
        for rec in results:
            out.write(json.dumps(rec, sort_keys=True) + "\n")

    rewards = [r["rewards"] for r in results]
    judged_c = [r["r_c"] for r in rewards if r["m_c"]]
    grounded = [r["r_s"] for r in rewards if r["m_s"]]
    summary = {
        "records": len(results),
        "malformed_lines": len(malformed),
        "accuracy": sum(r["r_acc"] for r in rewards) / len(rewards) if rewards else 0.0,
        "inconsistency_rate_judged": 1 - sum(judged_c) / len(judged_c) if judged_c else 0.0,
        "mean_semantic_grounding": sum(grounded) / len(grounded) if grounded else 0.0,
        "consistency_calls": judges.consistency_calls,
        "sentence_calls": judges.sentence_calls,
        "judge_warnings": judges.failures,
    }
    print(json.dumps(summary, sort_keys=True))
    if n_lines and len(malformed) / n_lines >= 0.01:
        return 1
    return 0


# --- mcts-gen -------------------------------------------------------------------


def cmd_mcts_gen(args: argparse.Namespace) -> int:
    raw = apply_overrides(load_config_file(args.config), args.set)
    env_cfg = build_dataclass(EnvConfig, raw.pop("env", {}), "env")
    opts = dict(MCTS_DEFAULTS)
    search = {}
    search_keys = {f.name for f in dataclasses.fields(SearchParams)}
    for key, value in raw.items():
        if key in search_keys:
            search[key] = value
        elif key in opts:
            opts[key] = int(value)
        else:
            raise ConfigError(f"unknown config key {key}")
    if args.n_tasks is not None:
        opts["n_tasks"] = args.n_tasks
    if args.seed is not None:
        opts["seed"] = args.seed
    params = build_dataclass(SearchParams, search, "")
    env = SynthEnv(env_cfg)
    rng = seeded_rng(opts["seed"])
    tasks = env.sample_tasks(rng, opts["n_tasks"], prefix="mcts")
    quota = {"direct": opts["quota_direct"], "corrected": opts["quota_corrected"]}
    records = generate_sft_records(tasks, env, params, rng, quota)
    with open(args.out, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("wrote %d chains for %d tasks to %s", len(records), len(tasks), args.out)
    return 0


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgrpo", description="Constrained group-relative policy optimization toolkit.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy on the synthetic environment")
    t.add_argument("--config", help="TOML or JSON config; top-level keys are training options, [env] and [run] tables")
    t.add_argument("--mode", help="task_only | fgrpo | fgrpo_fixed | coupled_additive | coupled_multiplicative")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted for tables)")
    t.add_argument("--out", help="run directory (default runs/<mode>-seed<seed>)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score responses offline from JSONL")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--backend", choices=("programmatic", "remote"), default="programmatic")
    s.add_argument("--endpoint", help=f"judge URL for the remote backend (default ${ENDPOINT_ENV})")
    s.set_defaults(func=cmd_score)

    m = sub.add_parser("mcts-gen", help="generate direct and corrected SFT chains by tree search")
    m.add_argument("--config", help="TOML or JSON with search params, n_tasks, seed, quotas and an [env] table")
    m.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    m.add_argument("--n-tasks", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mcts_gen)

    e = sub.add_parser("eval", help="greedy evaluation of a trained run on the held-out split")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--policy", help="policy JSON (default <run>/policy.json)")
    e.add_argument("--n-eval", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, JudgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
