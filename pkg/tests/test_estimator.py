import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fgrpo import FaithfulGRPO
from fgrpo.core import seeded_rng
from fgrpo.synthenv import EnvConfig, SynthEnv


def test_params_roundtrip():
    est = FaithfulGRPO(mode="task_only", total_steps=7)
    params = est.get_params()
    assert params["mode"] == "task_only" and params["total_steps"] == 7
    est.set_params(tau_c=0.9)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_unfitted_predict_raises(env):
    with pytest.raises(NotFittedError):
        FaithfulGRPO().predict(env.sample_tasks(seeded_rng(0), 2))


def test_bad_mode_fails_at_fit():
    with pytest.raises(ValueError):
        FaithfulGRPO(mode="nope", total_steps=1).fit()


def test_fit_predict_score():
    cfg = EnvConfig()
    env = SynthEnv(cfg)
    pool = env.sample_tasks(seeded_rng(11), 64)
    held = env.sample_tasks(seeded_rng(12), 100, prefix="held")
    est = FaithfulGRPO(total_steps=300, n_eval=50, env_config=cfg).fit(pool)
    preds = est.predict(held)
    assert len(preds) == 100 and set(preds) <= {t.gt_label for t in held} | set("ABCDEFGH")
    acc = est.score(held)
    assert acc == sum(p == t.gt_label for p, t in zip(preds, held)) / 100
    assert acc > 0.5
    assert len(est.logs_) == 300
    report = est.evaluate(held)
    assert 0 <= report.inconsistency_rate <= 1


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        FaithfulGRPO(total_steps=1).fit([])
