"""Domain types, configuration and seeded randomness shared by every module."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

import numpy as np

CONSTRAINTS = ("C", "S", "G")


class Mode(str, enum.Enum):
    TASK_ONLY = "task_only"
    FGRPO = "fgrpo"
    FGRPO_FIXED = "fgrpo_fixed"
    COUPLED_ADDITIVE = "coupled_additive"
    COUPLED_MULTIPLICATIVE = "coupled_multiplicative"

    @classmethod
    def parse(cls, value: "Mode | str") -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None


class SourceTag(str, enum.Enum):
    HAS_GT_BOXES = "HAS_GT_BOXES"
    NO_GT_BOXES = "NO_GT_BOXES"


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class StructuredResponse:
    think_text: str
    answer_text: str
    bboxes: tuple[BBox, ...] = ()
    format_ok: bool = False
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class RewardVector:
    """Per-rollout rewards.

    A constraint reward whose mask is 0 is stored as ``None`` so that nothing
    downstream can mistake "not applicable" for a score of 0.
    """

    r_acc: int
    r_fmt: int
    r_c: int | None = None
    r_s: float | None = None
    r_g: float | None = None

    def __post_init__(self):
        if self.r_acc not in (0, 1) or self.r_fmt not in (0, 1):
            raise ValueError("r_acc and r_fmt must be 0 or 1")
        if self.r_c is not None and self.r_c not in (0, 1):
            raise ValueError("r_c must be 0, 1 or None")
        for name in ("r_s", "r_g"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def r_task(self) -> float:
        return 0.5 * self.r_acc + 0.5 * self.r_fmt

    @property
    def m_c(self) -> int:
        return int(self.r_c is not None)

    @property
    def m_s(self) -> int:
        return int(self.r_s is not None)

    @property
    def m_g(self) -> int:
        return int(self.r_g is not None)

    def constraint(self, k: str) -> float | None:
        return {"C": self.r_c, "S": self.r_s, "G": self.r_g}[k]

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_acc": self.r_acc,
            "r_fmt": self.r_fmt,
            "r_task": self.r_task,
            "r_c": self.r_c,
            "m_c": self.m_c,
            "r_s": self.r_s,
            "m_s": self.m_s,
            "r_g": self.r_g,
            "m_g": self.m_g,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RewardVector":
        def masked(key, mask_key):
            return d[key] if d.get(mask_key, int(d.get(key) is not None)) else None

        return cls(
            r_acc=int(d["r_acc"]),
            r_fmt=int(d["r_fmt"]),
            r_c=masked("r_c", "m_c"),
            r_s=masked("r_s", "m_s"),
            r_g=masked("r_g", "m_g"),
        )


@dataclass
class RolloutRecord:
    prompt_id: str
    source_tag: SourceTag
    action_sequence: tuple[int, ...]
    response: StructuredResponse
    rewards: RewardVector
    old_logprob_per_step: tuple[float, ...]
    context_id: int = 0
    advantage: float = 0.0
    raw_text: str = ""

    def __post_init__(self):
        if len(self.old_logprob_per_step) != len(self.action_sequence):
            raise ValueError("one old log-probability is required per action")
        if any(lp > 0 for lp in self.old_logprob_per_step):
            raise ValueError("log-probabilities must be <= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "source_tag": self.source_tag.value,
            "context_id": self.context_id,
            "action_sequence": list(self.action_sequence),
            "raw_text": self.raw_text,
            "response": {
                "think_text": self.response.think_text,
                "answer_text": self.response.answer_text,
                "bboxes": [b.to_list() for b in self.response.bboxes],
                "format_ok": self.response.format_ok,
            },
            "rewards": self.rewards.to_dict(),
            "old_logprob_per_step": list(self.old_logprob_per_step),
            "advantage": self.advantage,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RolloutRecord":
        resp = d["response"]
        return cls(
            prompt_id=d["prompt_id"],
            source_tag=SourceTag(d["source_tag"]),
            context_id=int(d.get("context_id", 0)),
            action_sequence=tuple(d["action_sequence"]),
            raw_text=d.get("raw_text", ""),
            response=StructuredResponse(
                think_text=resp["think_text"],
                answer_text=resp["answer_text"],
                bboxes=tuple(BBox(*b) for b in resp["bboxes"]),
                format_ok=bool(resp["format_ok"]),
            ),
            rewards=RewardVector.from_dict(d["rewards"]),
            old_logprob_per_step=tuple(d["old_logprob_per_step"]),
            advantage=float(d.get("advantage", 0.0)),
        )


@dataclass
class RolloutGroup:
    prompt_id: str
    rollouts: list[RolloutRecord]

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise ValueError("a group needs at least two rollouts")
        tags = {r.source_tag for r in self.rollouts}
        ids = {r.prompt_id for r in self.rollouts}
        if ids != {self.prompt_id} or len(tags) != 1:
            raise ValueError("rollouts of a group must share prompt_id and source_tag")

    def __len__(self):
        return len(self.rollouts)

    def __iter__(self):
        return iter(self.rollouts)


@dataclass(frozen=True)
class ConstraintState:
    lam: float
    tau: float
    last_cbar: float | None = None
    last_applicable_count: int = 0


@dataclass(frozen=True)
class LagrangeState:
    constraints: dict[str, ConstraintState]
    eta_lambda: float = 0.05
    lambda_max: float = 5.0
    min_applicable: int = 8

    def __post_init__(self):
        if self.eta_lambda <= 0 or self.lambda_max <= 0:
            raise ValueError("eta_lambda and lambda_max must be positive")
        for k, c in self.constraints.items():
            if not 0.0 <= c.lam <= self.lambda_max:
                raise ValueError(f"lambda_{k}={c.lam} outside [0, {self.lambda_max}]")
            if not 0.0 <= c.tau <= 1.0:
                raise ValueError(f"tau_{k}={c.tau} outside [0, 1]")

    def lam(self, k: str) -> float:
        return self.constraints[k].lam

    def tau(self, k: str) -> float:
        return self.constraints[k].tau

    def lambdas(self) -> dict[str, float]:
        return {k: c.lam for k, c in self.constraints.items()}

    def with_constraint(self, k: str, **changes) -> "LagrangeState":
        cs = dict(self.constraints)
        cs[k] = replace(cs[k], **changes)
        return replace(self, constraints=cs)

    def with_lambdas(self, value: float) -> "LagrangeState":
        cs = {k: replace(c, lam=value) for k, c in self.constraints.items()}
        return replace(self, constraints=cs)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``kl_coef`` defaults to 0.001; 0.01 is the other commonly used value.
    ``policy_lr`` keeps the network-scale default; the tabular policy in this
    package needs a far larger step (see ``policy.TABULAR_POLICY_LR``).
    """

    G: int = 5
    batch_prompts: int = 8
    clip_ratio: float = 0.28
    kl_coef: float = 0.001
    group_norm_eps: float = 1e-4
    whiten_eps: float = 1e-8
    whiten_scope: str = "batch"
    policy_lr: float = 1e-6
    optimizer: str = "sgd"
    inner_iters: int = 1
    mode: Mode = Mode.FGRPO
    seed: int = 0
    total_steps: int = 100
    # Lagrange settings
    tau_c: float = 0.95
    tau_s: float = 0.95
    tau_g: float = 0.65
    lambda_init: float = 1.0
    eta_lambda: float = 0.05
    lambda_max: float = 5.0
    min_applicable: int = 8
    eval_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.batch_prompts < 1:
            raise ValueError("batch_prompts must be >= 1")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.group_norm_eps <= 0 or self.whiten_eps <= 0:
            raise ValueError("normalization eps must be > 0")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.whiten_scope not in ("batch", "group", "none"):
            raise ValueError("whiten_scope must be batch, group or none")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError("optimizer must be sgd or adamw")
        if self.total_steps < 0 or self.inner_iters < 1:
            raise ValueError("total_steps must be >= 0 and inner_iters >= 1")

    def initial_lagrange(self) -> LagrangeState:
        taus = {"C": self.tau_c, "S": self.tau_s, "G": self.tau_g}
        return LagrangeState(
            constraints={k: ConstraintState(lam=self.lambda_init, tau=taus[k]) for k in CONSTRAINTS},
            eta_lambda=self.eta_lambda,
            lambda_max=self.lambda_max,
            min_applicable=self.min_applicable,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        for key in d:
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
        kwargs = {}
        for key, value in d.items():
            default = known[key].default
            if isinstance(default, bool) or key == "mode":
                kwargs[key] = value
            elif isinstance(default, int) and not isinstance(value, bool):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(f"config key {key!r} expects an integer, got {value!r}")
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def new_default_config() -> TrainConfig:
    return TrainConfig()


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


__all__ = [
    "BBox",
    "CONSTRAINTS",
    "ConstraintState",
    "LagrangeState",
    "Mode",
    "RewardVector",
    "RolloutGroup",
    "RolloutRecord",
    "SourceTag",
    "StructuredResponse",
    "TrainConfig",
    "new_default_config",
    "seeded_rng",
]
