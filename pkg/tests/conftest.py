import itertools
import math
import random

import numpy as np
import pytest

from fgrpo.core import RewardVector, RolloutGroup, RolloutRecord, SourceTag, StructuredResponse
from fgrpo.geometry import ciou
from fgrpo.policy import PolicyParams, sample_actions
from fgrpo.synthenv import EnvConfig, SynthEnv


def make_record(prompt_id="p0", rewards=None, n_steps=5, tag=SourceTag.NO_GT_BOXES, context_id=0):
    return RolloutRecord(
        prompt_id=prompt_id,
        source_tag=tag,
        action_sequence=(0,) * n_steps,
        response=StructuredResponse("", ""),
        rewards=rewards or RewardVector(0, 0),
        old_logprob_per_step=(0.0,) * n_steps,
        context_id=context_id,
    )


def make_group(rvs, prompt_id="p0"):
    return RolloutGroup(prompt_id, [make_record(prompt_id, rv) for rv in rvs])


def random_reward_vector(rng: random.Random) -> RewardVector:
    acc = rng.randint(0, 1)
    return RewardVector(
        r_acc=acc,
        r_fmt=rng.randint(0, 1),
        r_c=rng.randint(0, 1) if acc and rng.random() < 0.8 else None,
        r_s=rng.random() if acc and rng.random() < 0.8 else None,
        r_g=rng.random() if rng.random() < 0.5 else None,
    )


def brute_force(pred, gt, clamp=True):
    best = 0.0
    n, m = len(pred), len(gt)
    if n == 0 or m == 0:
        return 0.0
    best = -math.inf
    small, large = (pred, gt) if n <= m else (gt, pred)
    for perm in itertools.permutations(range(len(large)), len(small)):
        total = 0.0
        for i, j in enumerate(perm):
            s = ciou(small[i], large[j])
            total += min(max(s, 0.0), 1.0) if clamp else s
        best = max(best, total)
    return best


def legal_mask(sizes, width=None):
    width = width or max(sizes)
    mask = np.zeros((len(sizes), width), dtype=bool)
    for s, n in enumerate(sizes):
        mask[s, :n] = True
    return mask


def random_instance(seed, n_ctx=3, sizes=(4, 3, 5), n_groups=3, G=4, scale=1.0):
    """Params, a batch sampled from a nearby 'old' policy, and random advantages."""
    rng = np.random.default_rng(seed)
    legal = legal_mask(sizes)
    old = PolicyParams(rng.normal(0, scale, (n_ctx,) + legal.shape), legal, rng.normal(0, scale, (n_ctx,) + legal.shape))
    groups, advs = [], []
    for g in range(n_groups):
        ctx = int(rng.integers(n_ctx))
        acts, lp = sample_actions(old, ctx, G, rng)
        recs = [
            RolloutRecord(f"p{g}", SourceTag.NO_GT_BOXES, tuple(map(int, a)), StructuredResponse("", ""),
                          RewardVector(0, 0), tuple(map(float, l)), context_id=ctx)
            for a, l in zip(acts, lp)
        ]
        groups.append(RolloutGroup(f"p{g}", recs))
        advs.append(rng.normal(size=G).tolist())
    new = old.replace_logits(old.logits + rng.normal(0, 0.05, old.logits.shape))
    return new, groups, advs


@pytest.fixture(scope="session")
def env():
    return SynthEnv(EnvConfig())


@pytest.fixture
def judges(env):
    return env.judges()


ACCEPTANCE_LINES: list[str] = []


def acceptance_verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
