"""Tabular categorical sequence policy and the clipped surrogate objective.

The policy holds one logit row per (context, slot). Illegal actions of a slot
carry no probability mass and never receive gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import RolloutGroup, RolloutRecord, TrainConfig
from .parse import parse_response
from .rewards import Judges, score_response
from .synthenv import SynthEnv, SynthTask


# Logit step size for the tabular softmax policy. Whitened advantages are O(1)
# and the per-term gradient is divided by the batch size, so updates need a
# rate of order ten to move the logits at all within a few thousand steps.
TABULAR_POLICY_LR = 20.0

@dataclass
class PolicyParams:
    logits: np.ndarray  # (contexts, slots, max_actions)
    legal: np.ndarray  # (slots, max_actions) bool
    ref_logits: np.ndarray = field(default=None)  # frozen reference for the KL penalty

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 3 or self.logits.shape[1:] != self.legal.shape:
            raise ValueError("logits must have shape (contexts, slots, actions) matching the legal mask")
        if self.ref_logits is None:
            self.ref_logits = self.logits.copy()
        self.ref_logits.setflags(write=False)

    @classmethod
    def uniform(cls, n_contexts: int, legal: np.ndarray) -> "PolicyParams":
        return cls(np.zeros((n_contexts,) + legal.shape), legal)

    @classmethod
    def for_env(cls, env: SynthEnv) -> "PolicyParams":
        return cls.uniform(env.config.n_contexts, env.schema.legal_mask())

    def replace_logits(self, logits: np.ndarray) -> "PolicyParams":
        return PolicyParams(logits, self.legal, self.ref_logits)

    def copy(self) -> "PolicyParams":
        return self.replace_logits(self.logits.copy())

    def to_dict(self) -> dict:
        return {
            "logits": self.logits.tolist(),
            "legal": self.legal.astype(int).tolist(),
            "ref_logits": self.ref_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(np.array(d["logits"], dtype=float), np.array(d["legal"], dtype=bool), np.array(d["ref_logits"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SurrogateStats:
    loss: float
    mean_ratio: float
    clip_fraction: float
    kl_estimate: float


def _log_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = np.where(legal, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


def log_probs(params: PolicyParams) -> np.ndarray:
    return _log_softmax(params.logits, params.legal)


def action_distribution(params: PolicyParams, context: int, slot: int) -> np.ndarray:
    """Probabilities over the legal actions of ``slot``."""
    lp = _log_softmax(params.logits[context, slot], params.legal[slot])
    return np.exp(lp[params.legal[slot]])


def sample_actions(params: PolicyParams, context: int, n: int, rng: np.random.Generator):
    """Draw ``n`` action sequences slot by slot; returns (actions, log-probs), both (n, slots)."""
    lp = _log_softmax(params.logits[context], params.legal)
    probs = np.exp(lp)
    n_slots = probs.shape[0]
    u = rng.random((n, n_slots))
    cdf = np.cumsum(probs, axis=1)
    actions = np.empty((n, n_slots), dtype=int)
    for s in range(n_slots):
        legal_n = int(params.legal[s].sum())
        actions[:, s] = np.minimum(np.searchsorted(cdf[s], u[:, s] * cdf[s, -1], side="right"), legal_n - 1)
    logp = lp[np.arange(n_slots)[None, :], actions]
    return actions, logp


def greedy_actions(params: PolicyParams, context: int) -> np.ndarray:
    z = np.where(params.legal, params.logits[context], -np.inf)
    return np.argmax(z, axis=1)


def build_record(
    env: SynthEnv, task: SynthTask, actions: Sequence[int], logp: Sequence[float], judges: Judges
) -> RolloutRecord:
    raw = env.decode_actions(task, actions)
    resp = parse_response(raw)
    scored = score_response(resp, task.gt_label, task.gt_boxes, task.source_tag, judges, task.question, task)
    return RolloutRecord(
        prompt_id=task.task_id,
        source_tag=task.source_tag,
        context_id=task.context_id,
        action_sequence=tuple(int(a) for a in actions),
        response=resp,
        rewards=scored.rewards,
        old_logprob_per_step=tuple(min(0.0, float(x)) for x in logp),
        raw_text=raw,
    )


def sample_rollouts(
    params: PolicyParams, task: SynthTask, G: int, rng: np.random.Generator, env: SynthEnv, judges: Judges
) -> RolloutGroup:
    if G < 2:
        raise ValueError("G must be >= 2")
    actions, logp = sample_actions(params, task.context_id, G, rng)
    return RolloutGroup(task.task_id, [build_record(env, task, a, lp, judges) for a, lp in zip(actions, logp)])


@dataclass
class _Flat:
    ctx: np.ndarray
    actions: np.ndarray
    old_lp: np.ndarray
    adv: np.ndarray


def _flatten(batch: Sequence[RolloutGroup], advantages: Sequence[Sequence[float]]) -> _Flat:
    recs = [r for g in batch for r in g.rollouts]
    adv = np.array([a for g in advantages for a in g], dtype=float)
    if len(recs) != len(adv):
        raise ValueError("advantages are not aligned with the batch rollouts")
    return _Flat(
        ctx=np.array([r.context_id for r in recs], dtype=int),
        actions=np.array([r.action_sequence for r in recs], dtype=int),
        old_lp=np.array([r.old_logprob_per_step for r in recs], dtype=float),
        adv=adv,
    )


def _row_kl(lp: np.ndarray, ref_lp: np.ndarray, legal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact KL(new || ref) per row and its gradient with respect to the new logits."""
    p = np.where(legal, np.exp(lp), 0.0)
    diff = np.where(legal, lp, 0.0) - np.where(legal, ref_lp, 0.0)
    kl = (p * diff).sum(axis=-1)
    grad = p * (diff - kl[..., None])
    return kl, grad


def surrogate_and_grad(
    logits: np.ndarray, legal: np.ndarray, ref_logits: np.ndarray, flat: _Flat, clip_ratio: float, kl_coef: float
) -> tuple[SurrogateStats, np.ndarray]:
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    n, n_slots = flat.actions.shape
    total = n * n_slots
    lp_table = _log_softmax(logits, legal)
    slots = np.broadcast_to(np.arange(n_slots), (n, n_slots))
    ctx = np.broadcast_to(flat.ctx[:, None], (n, n_slots))
    new_lp = lp_table[ctx, slots, flat.actions]
    ratio = np.exp(new_lp - flat.old_lp)
    adv = np.broadcast_to(flat.adv[:, None], (n, n_slots))
    lo, hi = 1.0 - clip_ratio, 1.0 + clip_ratio
    unclipped = ratio * adv
    clipped = np.clip(ratio, lo, hi) * adv
    term = np.minimum(unclipped, clipped)
    # the unclipped branch carries gradient unless the ratio has left the trust region on the side the advantage pushes
    active = np.where(adv >= 0, ratio <= hi, ratio >= lo)
    coef = np.where(active, adv * ratio, 0.0) / total  # d(mean term)/d(new log-prob)

    grad = np.zeros_like(logits)
    probs = np.where(legal, np.exp(lp_table), 0.0)
    # d log p_a / dz = onehot(a) - p ; loss is the negative of the mean term
    np.add.at(grad, (ctx, slots, flat.actions), -coef)
    row_weight = np.zeros(logits.shape[:2])
    np.add.at(row_weight, (ctx, slots), coef)
    grad += row_weight[..., None] * probs

    visits = np.zeros(logits.shape[:2])
    np.add.at(visits, (ctx, slots), 1.0 / total)
    ref_lp = _log_softmax(ref_logits, legal)
    kl_rows, kl_grad = _row_kl(lp_table, ref_lp, legal)
    kl = float((visits * kl_rows).sum())
    if kl_coef:
        grad += kl_coef * visits[..., None] * kl_grad

    loss = -float(term.mean()) + kl_coef * kl
    stats = SurrogateStats(
        loss=loss,
        mean_ratio=float(ratio.mean()),
        clip_fraction=float(((ratio < lo) | (ratio > hi)).mean()),
        kl_estimate=kl,
    )
    return stats, np.where(legal, grad, 0.0)


def clipped_surrogate_loss(
    params: PolicyParams,
    batch: Sequence[RolloutGroup],
    whitened_advantages: Sequence[Sequence[float]],
    cfg: TrainConfig,
) -> tuple[SurrogateStats, np.ndarray]:
    """Loss ``-mean(min(r*A, clip(r)*A)) + kl_coef * KL(new || ref)`` and its exact gradient.

    The mean runs over every (rollout, slot) term; the KL is the exact
    categorical divergence of each visited row, weighted by visit frequency.
    """
    flat = _flatten(batch, whitened_advantages)
    return surrogate_and_grad(params.logits, params.legal, params.ref_logits, flat, cfg.clip_ratio, cfg.kl_coef)


def kl_to_reference(params: PolicyParams) -> np.ndarray:
    """Per-row exact KL(new || ref)."""
    kl, _ = _row_kl(log_probs(params), _log_softmax(params.ref_logits, params.legal), params.legal)
    return kl


def apply_gradient(params: PolicyParams, gradient: np.ndarray, lr: float) -> PolicyParams:
    if gradient.shape != params.logits.shape:
        raise ValueError("gradient shape does not match the logits")
    return params.replace_logits(params.logits - lr * gradient)


class AdamW:
    """Decoupled-weight-decay Adam on the logit table (optional optimizer)."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, params: PolicyParams, gradient: np.ndarray) -> PolicyParams:
        if self.m is None:
            self.m = np.zeros_like(gradient)
            self.v = np.zeros_like(gradient)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * gradient
        self.v = b2 * self.v + (1 - b2) * gradient**2
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        step = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params.logits
        return params.replace_logits(params.logits - self.lr * np.where(params.legal, step, 0.0))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, gradient: np.ndarray) -> PolicyParams:
        return apply_gradient(params, gradient, self.lr)


def make_optimizer(cfg: TrainConfig):
    return AdamW(cfg.policy_lr) if cfg.optimizer == "adamw" else SGD(cfg.policy_lr)


def entropy(params: PolicyParams) -> float:
    lp = log_probs(params)
    p = np.where(params.legal, np.exp(lp), 0.0)
    return float(-(p * np.where(params.legal, lp, 0.0)).sum(axis=-1).mean())


__all__ = [
    "AdamW",
    "PolicyParams",
    "SGD",
    "SurrogateStats",
    "action_distribution",
    "apply_gradient",
    "clipped_surrogate_loss",
    "greedy_actions",
    "kl_to_reference",
    "make_optimizer",
    "sample_actions",
    "sample_rollouts",
    "surrogate_and_grad",
]
