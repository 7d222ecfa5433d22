"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Mode, TrainConfig
from .rewards import MetricsReport
from .synthenv import EnvConfig, SynthEnv, SynthTask, answer_label
from .policy import TABULAR_POLICY_LR, greedy_actions
from .trainer import evaluate, train


class FaithfulGRPO(BaseEstimator):
    """Train a tabular policy on synthetic tasks; predict answer labels greedily.

    ``fit(X)`` trains on prompts drawn from the task pool ``X`` (or fresh
    environment samples when ``X`` is None). ``predict`` returns one answer
    label per task and ``score`` is exact-match accuracy.
    """

    def __init__(
        self,
        mode: str = "fgrpo",
        total_steps: int = 2000,
        G: int = 5,
        batch_prompts: int = 8,
        policy_lr: float = TABULAR_POLICY_LR,
        clip_ratio: float = 0.28,
        kl_coef: float = 0.001,
        tau_c: float = 0.95,
        tau_s: float = 0.95,
        tau_g: float = 0.65,
        eta_lambda: float = 0.05,
        seed: int = 0,
        env_config: EnvConfig | None = None,
        n_eval: int = 500,
    ):
        self.mode = mode
        self.total_steps = total_steps
        self.G = G
        self.batch_prompts = batch_prompts
        self.policy_lr = policy_lr
        self.clip_ratio = clip_ratio
        self.kl_coef = kl_coef
        self.tau_c = tau_c
        self.tau_s = tau_s
        self.tau_g = tau_g
        self.eta_lambda = eta_lambda
        self.seed = seed
        self.env_config = env_config
        self.n_eval = n_eval

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=Mode.parse(self.mode),
            total_steps=self.total_steps,
            G=self.G,
            batch_prompts=self.batch_prompts,
            policy_lr=self.policy_lr,
            clip_ratio=self.clip_ratio,
            kl_coef=self.kl_coef,
            tau_c=self.tau_c,
            tau_s=self.tau_s,
            tau_g=self.tau_g,
            eta_lambda=self.eta_lambda,
            seed=self.seed,
        )

    def fit(self, X: Sequence[SynthTask] | None = None, y=None) -> "FaithfulGRPO":
        env_cfg = self.env_config or EnvConfig()
        pool = list(X) if X is not None else None
        if pool is not None and not pool:
            raise ValueError("cannot fit on an empty task pool")
        result = train(self.train_config(), env_cfg, n_eval=self.n_eval, tasks=pool)
        self.env_ = SynthEnv(env_cfg)
        self.params_ = result.params
        self.lagrange_ = result.lagrange
        self.logs_ = result.logs
        self.metrics_ = result.metrics
        return self

    def predict(self, X: Sequence[SynthTask]) -> list[str]:
        check_is_fitted(self, "params_")
        slot = self.env_.schema.answer_slot
        return [answer_label(int(greedy_actions(self.params_, t.context_id)[slot])) for t in X]

    def score(self, X: Sequence[SynthTask], y: Sequence[str] | None = None) -> float:
        y = [t.gt_label for t in X] if y is None else list(y)
        if len(y) != len(X) or not y:
            raise ValueError("X and y must be non-empty and aligned")
        return sum(p == t for p, t in zip(self.predict(X), y)) / len(y)

    def evaluate(self, X: Sequence[SynthTask]) -> MetricsReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, list(X), self.env_)
