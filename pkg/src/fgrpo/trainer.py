"""Alternating primal-dual training loop and greedy evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .advantage import (
    coupled_additive_reward,
    coupled_multiplicative_reward,
    fgrpo_advantage,
    group_normalize,
    whiten_batch,
)
from .core import CONSTRAINTS, LagrangeState, Mode, RolloutGroup, TrainConfig, seeded_rng
from .dual import batch_constraint_score, step_duals
from .parse import parse_response
from .policy import PolicyParams, clipped_surrogate_loss, greedy_actions, make_optimizer, sample_rollouts
from .rewards import EvalRecord, Judges, MetricsReport, compute_metrics, evaluate_response
from .synthenv import EnvConfig, SynthEnv, SynthTask

log = logging.getLogger(__name__)

EVAL_SEED = 2_147_483_647
CSV_COLUMNS = (
    "step",
    "acc",
    "cbar_C",
    "cbar_S",
    "cbar_G",
    "lambda_C",
    "lambda_S",
    "lambda_G",
    "loss",
    "clip_frac",
    "ir_eval",
)


@dataclass
class StepLog:
    step: int
    acc: float
    cbar: dict[str, float | None]
    lambdas: dict[str, float] | None
    loss: float
    clip_frac: float
    kl: float
    ir_eval: float | None = None
    dual_prompt_ids: tuple[str, ...] = ()

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        lam = self.lambdas or {}
        return [
            str(self.step),
            fmt(self.acc),
            *(fmt(self.cbar.get(k)) for k in CONSTRAINTS),
            *(fmt(lam.get(k)) for k in CONSTRAINTS),
            fmt(self.loss),
            fmt(self.clip_frac),
            fmt(self.ir_eval),
        ]


@dataclass
class TrainState:
    params: PolicyParams
    lagrange: LagrangeState
    cfg: TrainConfig
    optimizer: object = None
    step: int = 0

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.cfg)


@dataclass
class RunResult:
    params: PolicyParams
    lagrange: LagrangeState
    logs: list[StepLog]
    metrics: MetricsReport
    eval_tasks: list[SynthTask] = field(repr=False, default_factory=list)


def uses_multipliers(mode: Mode) -> bool:
    return mode in (Mode.FGRPO, Mode.FGRPO_FIXED)


def compute_advantages(batch: Sequence[RolloutGroup], lagrange: LagrangeState, cfg: TrainConfig) -> list[list[float]]:
    """Per-group advantages for ``cfg.mode`` before whitening."""
    eps = cfg.group_norm_eps
    out = []
    for group in batch:
        rvs = [r.rewards for r in group.rollouts]
        if cfg.mode is Mode.TASK_ONLY:
            out.append(group_normalize([rv.r_task for rv in rvs], eps))
        elif cfg.mode is Mode.COUPLED_ADDITIVE:
            out.append(group_normalize([coupled_additive_reward(rv) for rv in rvs], eps))
        elif cfg.mode is Mode.COUPLED_MULTIPLICATIVE:
            out.append(group_normalize([coupled_multiplicative_reward(rv) for rv in rvs], eps))
        else:
            out.append([b.combined for b in fgrpo_advantage(group, lagrange, eps)])
    return out


def train_step(
    state: TrainState,
    tasks: Sequence[SynthTask],
    judges: Judges,
    rng: np.random.Generator,
    env: SynthEnv,
) -> tuple[TrainState, StepLog, list[RolloutGroup]]:
    """One iteration: rollouts, rewards, advantages, primal update, then the dual step."""
    cfg = state.cfg
    batch = [sample_rollouts(state.params, t, cfg.G, rng, env, judges) for t in tasks]
    advantages = whiten_batch(compute_advantages(batch, state.lagrange, cfg), cfg.whiten_eps, cfg.whiten_scope)
    for group, adv in zip(batch, advantages):
        for rec, a in zip(group.rollouts, adv):
            rec.advantage = a

    params = state.params
    first_stats = None
    for _ in range(cfg.inner_iters):
        stats, grad = clipped_surrogate_loss(params, batch, advantages, cfg)
        first_stats = first_stats or stats
        params = state.optimizer.step(params, grad)

    cbar = {k: batch_constraint_score(batch, k)[0] for k in CONSTRAINTS}
    lagrange = state.lagrange
    dual_ids: tuple[str, ...] = ()
    if cfg.mode is Mode.FGRPO:
        lagrange = step_duals(lagrange, batch)
        dual_ids = tuple(g.prompt_id for g in batch)

    acc = float(np.mean([r.rewards.r_acc for g in batch for r in g.rollouts]))
    entry = StepLog(
        step=state.step,
        acc=acc,
        cbar=cbar,
        lambdas=lagrange.lambdas() if uses_multipliers(cfg.mode) else None,
        loss=first_stats.loss,
        clip_frac=first_stats.clip_fraction,
        kl=first_stats.kl_estimate,
        dual_prompt_ids=dual_ids,
    )
    new_state = TrainState(params=params, lagrange=lagrange, cfg=cfg, optimizer=state.optimizer, step=state.step + 1)
    return new_state, entry, batch


def greedy_response(params: PolicyParams, env: SynthEnv, task: SynthTask) -> str:
    return env.decode_actions(task, greedy_actions(params, task.context_id).tolist())


def evaluate(
    params: PolicyParams, tasks: Sequence[SynthTask], env: SynthEnv, judges: Judges | None = None
) -> MetricsReport:
    """Greedy decoding on every task; consistency is judged on all samples."""
    return compute_metrics(evaluation_records(params, tasks, env, judges))


def evaluation_records(
    params: PolicyParams, tasks: Sequence[SynthTask], env: SynthEnv, judges: Judges | None = None
) -> list[EvalRecord]:
    judges = judges or env.judges()
    records = []
    for task in tasks:
        resp = parse_response(greedy_response(params, env, task))
        records.append(evaluate_response(resp, task.gt_label, judges, task.question, task, task.task_id))
    return records


def eval_split(env: SynthEnv, n: int = 500) -> list[SynthTask]:
    """Held-out split: fixed seed, ``eval-`` task ids never used in training."""
    return env.sample_tasks(seeded_rng(EVAL_SEED), n, prefix="eval")


def train(
    cfg: TrainConfig,
    env_cfg: EnvConfig | None = None,
    judges: Judges | None = None,
    *,
    n_eval: int = 500,
    params: PolicyParams | None = None,
    lagrange: LagrangeState | None = None,
    tasks: Sequence[SynthTask] | None = None,
    callback: Callable[[StepLog, list[RolloutGroup]], None] | None = None,
) -> RunResult:
    """Run ``cfg.total_steps`` iterations and evaluate on the held-out split.

    Training prompts are drawn fresh from the environment each step, or
    uniformly from ``tasks`` when a fixed pool is given.
    """
    env = SynthEnv(env_cfg or EnvConfig())
    judges = judges or env.judges()
    rng = seeded_rng(cfg.seed)
    state = TrainState(
        params=params if params is not None else PolicyParams.for_env(env),
        lagrange=lagrange if lagrange is not None else cfg.initial_lagrange(),
        cfg=cfg,
    )
    held_out = eval_split(env, n_eval)
    logs = []
    for step in range(cfg.total_steps):
        if tasks is None:
            batch_tasks = env.sample_tasks(rng, cfg.batch_prompts, prefix=f"train-{step}")
        else:
            batch_tasks = [tasks[i] for i in rng.integers(len(tasks), size=cfg.batch_prompts)]
        state, entry, batch = train_step(state, batch_tasks, judges, rng, env)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            entry.ir_eval = evaluate(state.params, held_out, env).inconsistency_rate
        logs.append(entry)
        if callback is not None:
            callback(entry, batch)
    metrics = evaluate(state.params, held_out, env)
    log.info(
        "mode=%s seed=%d acc=%.3f ir=%.3f sg=%.3f",
        cfg.mode.value,
        cfg.seed,
        metrics.accuracy,
        metrics.inconsistency_rate,
        metrics.mean_semantic_grounding,
    )
    return RunResult(state.params, state.lagrange, logs, metrics, held_out)


def write_dynamics_csv(logs: Sequence[StepLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for entry in logs:
            writer.writerow(entry.csv_row())
