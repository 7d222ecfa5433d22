"""Group-relative advantages: plain, masked, decoupled and coupled variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CONSTRAINTS, LagrangeState, RewardVector, RolloutGroup


@dataclass(frozen=True)
class AdvantageBreakdown:
    a_task: float
    a_c: float | None
    a_s: float | None
    a_g: float | None
    combined: float
    whitened: float = 0.0


def _standardize(values: np.ndarray, eps: float) -> np.ndarray:
    # population statistics; a constant input maps to exact zeros
    if values.size == 0 or values.max() == values.min():
        return np.zeros_like(values, dtype=float)
    mu = values.mean()
    sigma = values.std()
    return (values - mu) / (sigma + eps)


def group_normalize(values: Sequence[float], eps: float = 1e-4) -> list[float]:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(values) == 0:
        raise ValueError("cannot normalize an empty group")
    return _standardize(np.asarray(values, dtype=float), eps).tolist()


def masked_group_normalize(values: Sequence[float | None], eps: float = 1e-4) -> list[float | None]:
    """Normalize the present entries among themselves; ``None`` entries stay ``None``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    idx = [i for i, v in enumerate(values) if v is not None]
    out: list[float | None] = [None] * len(values)
    if idx:
        normed = _standardize(np.array([values[i] for i in idx], dtype=float), eps)
        for i, v in zip(idx, normed.tolist()):
            out[i] = v
    return out


def fgrpo_advantage(group: RolloutGroup, lagrange: LagrangeState, eps: float = 1e-4) -> list[AdvantageBreakdown]:
    rvs = [r.rewards for r in group.rollouts]
    a_task = group_normalize([rv.r_task for rv in rvs], eps)
    per_k = {k: masked_group_normalize([rv.constraint(k) for rv in rvs], eps) for k in CONSTRAINTS}
    out = []
    for i in range(len(rvs)):
        combined = a_task[i]
        for k in CONSTRAINTS:
            a_k = per_k[k][i]
            if a_k is not None:
                combined += lagrange.lam(k) * a_k
        out.append(AdvantageBreakdown(a_task[i], per_k["C"][i], per_k["S"][i], per_k["G"][i], combined))
    return out


def coupled_additive_reward(rv: RewardVector) -> float:
    r_c = rv.r_c or 0
    r_g = rv.r_g or 0.0
    return (rv.r_acc + rv.r_acc * r_c + rv.r_fmt * r_g) / 3.0


def coupled_multiplicative_reward(rv: RewardVector) -> float:
    r_c = rv.r_c or 0
    r_g = rv.r_g or 0.0
    return 0.5 * rv.r_acc * r_c + 0.5 * rv.r_fmt * r_g


def whiten(batch_advantages: Sequence[float], eps: float = 1e-8) -> list[float]:
    if len(batch_advantages) == 0:
        raise ValueError("cannot whiten an empty batch")
    return _standardize(np.asarray(batch_advantages, dtype=float), eps).tolist()


def whiten_batch(advantages: Sequence[Sequence[float]], eps: float = 1e-8, scope: str = "batch") -> list[list[float]]:
    """Whiten per-group advantage lists over the whole batch, per group, or not at all."""
    if scope == "none":
        return [list(map(float, g)) for g in advantages]
    if scope == "group":
        return [whiten(g, eps) for g in advantages]
    flat = whiten([a for g in advantages for a in g], eps)
    out, pos = [], 0
    for g in advantages:
        out.append(flat[pos : pos + len(g)])
        pos += len(g)
    return out
