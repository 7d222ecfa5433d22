import numpy as np

from fgrpo.advantage import group_normalize
from fgrpo.core import CONSTRAINTS, Mode, TrainConfig, seeded_rng
from fgrpo.dual import batch_constraint_score, dual_update
from fgrpo.policy import TABULAR_POLICY_LR, PolicyParams, sample_rollouts
from fgrpo.synthenv import EnvConfig, SynthEnv
from fgrpo.trainer import (
    CSV_COLUMNS,
    TrainState,
    compute_advantages,
    eval_split,
    evaluate,
    train,
    train_step,
    write_dynamics_csv,
)

FAST = dict(policy_lr=TABULAR_POLICY_LR, batch_prompts=8)


def one_step(mode, seed=0, **kw):
    env = SynthEnv(EnvConfig())
    cfg = TrainConfig(mode=mode, seed=seed, **FAST, **kw)
    state = TrainState(PolicyParams.for_env(env), cfg.initial_lagrange(), cfg)
    rng = seeded_rng(seed)
    tasks = env.sample_tasks(rng, cfg.batch_prompts)
    return state, train_step(state, tasks, env.judges(), rng, env)


def test_task_only_contract():
    state, (_, log, batch) = one_step(Mode.TASK_ONLY)
    assert log.lambdas is None
    advs = compute_advantages(batch, state.lagrange, state.cfg)
    assert advs == [group_normalize([r.rewards.r_task for r in g.rollouts]) for g in batch]


def test_fgrpo_raises_lambda_when_violated():
    _, (new, log, batch) = one_step(Mode.FGRPO)
    cbar, count = batch_constraint_score(batch, "C")
    assert count >= 8 and cbar < 0.95
    assert log.lambdas["C"] > 1.0 and new.lagrange.lam("C") == log.lambdas["C"]


def test_fixed_mode_never_updates():
    _, (new, log, _) = one_step(Mode.FGRPO_FIXED)
    assert log.lambdas == {"C": 1.0, "S": 1.0, "G": 1.0}
    assert new.lagrange.lambdas() == {"C": 1.0, "S": 1.0, "G": 1.0}


def test_dual_uses_current_batch_only():
    env_cfg = EnvConfig()
    seen = []

    def record(entry, batch):
        seen.append((entry, [batch_constraint_score(batch, k) for k in CONSTRAINTS]))

    cfg = TrainConfig(mode=Mode.FGRPO, total_steps=20, **FAST)
    train(cfg, env_cfg, n_eval=20, callback=record)
    lag = cfg.initial_lagrange()
    for entry, scores in seen:
        for k, (cbar, count) in zip(CONSTRAINTS, scores):
            assert entry.cbar[k] == cbar
            lag = dual_update(lag, k, cbar, count)
        assert lag.lambdas() == entry.lambdas
        assert len(set(entry.dual_prompt_ids)) == cfg.batch_prompts
        assert all(pid.startswith(f"train-{entry.step}-") for pid in entry.dual_prompt_ids)


def test_pinned_zero_lambdas_match_task_only():
    base = train(TrainConfig(mode=Mode.TASK_ONLY, total_steps=30, **FAST), n_eval=10)
    pinned = train(TrainConfig(mode=Mode.FGRPO_FIXED, lambda_init=0.0, total_steps=30, **FAST), n_eval=10)
    assert np.array_equal(base.params.logits, pinned.params.logits)


def test_determinism():
    a = train(TrainConfig(total_steps=15, seed=3, **FAST), n_eval=20)
    b = train(TrainConfig(total_steps=15, seed=3, **FAST), n_eval=20)
    assert [e.csv_row() for e in a.logs] == [e.csv_row() for e in b.logs]
    assert np.array_equal(a.params.logits, b.params.logits)


def test_zero_steps_evaluates_initial_policy():
    result = train(TrainConfig(total_steps=0), n_eval=50)
    assert result.logs == []
    assert np.array_equal(result.params.logits, np.zeros_like(result.params.logits))
    assert result.metrics.n_total == 50


def test_eval_split_disjoint_and_stable():
    env = SynthEnv(EnvConfig())
    split = eval_split(env, 30)
    assert split == eval_split(env, 30)
    assert all(t.task_id.startswith("eval-") for t in split)


def test_uniform_policy_accuracy_binomial():
    env = SynthEnv(EnvConfig())
    rng = seeded_rng(0)
    params = PolicyParams.for_env(env)
    hits = [r.rewards.r_acc for t in env.sample_tasks(rng, 400) for r in sample_rollouts(params, t, 5, rng, env, env.judges()).rollouts]
    n = len(hits)
    assert abs(np.mean(hits) - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / n)


def test_planted_optimum_is_perfect():
    env = SynthEnv(EnvConfig(shortcut_bias=1.0))
    sch = env.schema
    params = PolicyParams.for_env(env)
    logits = np.zeros_like(params.logits)
    for c in range(env.config.n_contexts):
        a = env.shortcut_answer[c]
        logits[c, 0, env.evidence_fact(a)] = 10
        for s in range(1, sch.n_reasoning):
            logits[c, s, sch.conclusion(a) if s == sch.n_reasoning - 1 else env.evidence_fact(a)] = 10
        logits[c, sch.answer_slot, a] = 10
        logits[c, sch.box_slot, env.answer_location[c][a]] = 10
    m = evaluate(params.replace_logits(logits), eval_split(env, 200), env)
    assert m.accuracy == 1.0 and m.inconsistency_rate == 0.0
    again = evaluate(params.replace_logits(logits), eval_split(env, 200), env)
    assert again == m


def test_dynamics_csv(tmp_path):
    result = train(TrainConfig(total_steps=5, eval_every=2, **FAST), n_eval=20)
    path = tmp_path / "d.csv"
    write_dynamics_csv(result.logs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 6
    assert lines[2].split(",")[-1] != "" and lines[1].split(",")[-1] == ""
