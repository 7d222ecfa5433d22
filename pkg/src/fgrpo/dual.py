"""Masked batch constraint scores and projected dual ascent on the multipliers."""

from __future__ import annotations

import math
from typing import Iterable

from .core import CONSTRAINTS, LagrangeState, RolloutGroup

_SNAP = 1e-9


def batch_constraint_score(batch: Iterable[RolloutGroup], k: str) -> tuple[float | None, int]:
    """Mean of constraint ``k`` over every applicable rollout in the batch."""
    present = [r.rewards.constraint(k) for g in batch for r in g.rollouts]
    present = [v for v in present if v is not None]
    if not present:
        return None, 0
    return math.fsum(present) / len(present), len(present)


def dual_update(state: LagrangeState, k: str, cbar: float | None, applicable_count: int) -> LagrangeState:
    if cbar is None or applicable_count < state.min_applicable:
        return state.with_constraint(k, last_cbar=cbar, last_applicable_count=applicable_count)
    c = state.constraints[k]
    lam = c.lam + state.eta_lambda * (c.tau - cbar)
    # absorb rounding residue so a bound is reached on the step arithmetic predicts
    if lam <= _SNAP:
        lam = 0.0
    elif lam >= state.lambda_max - _SNAP:
        lam = state.lambda_max
    return state.with_constraint(k, lam=lam, last_cbar=cbar, last_applicable_count=applicable_count)


def step_duals(state: LagrangeState, batch: list[RolloutGroup], order: Iterable[str] = CONSTRAINTS) -> LagrangeState:
    for k in order:
        cbar, count = batch_constraint_score(batch, k)
        state = dual_update(state, k, cbar, count)
    return state


def steps_to_bound(lam0: float, tau: float, cbar: float, eta: float, lambda_max: float) -> int:
    """Updates needed for a constant score stream to drive lambda to a bound."""
    drift = eta * (tau - cbar)
    if drift == 0:
        raise ValueError("a score equal to the threshold is a fixed point")
    gap = (lambda_max - lam0) if drift > 0 else lam0
    return max(1, math.ceil(gap / abs(drift) - _SNAP))
