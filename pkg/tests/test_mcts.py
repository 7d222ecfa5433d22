import math

import pytest

from fgrpo.core import seeded_rng
from fgrpo.mcts import (
    Chain,
    ChainKind,
    MctsNode,
    PlantedTreeTeacher,
    SearchParams,
    SynthTeacher,
    generate_sft_records,
    linearize,
    most_visited_terminal,
    puct_score,
    replays_correctly,
    run_search,
    select_child,
)
from fgrpo.parse import parse_response
from fgrpo.synthenv import BACKTRACK_CUE


def node_with(children_stats):
    parent = MctsNode(state=())
    for i, (n, w, p) in enumerate(children_stats):
        parent.children.append(MctsNode(state=(i,), parent=parent, prior=p, visit_count=n, total_value=w, depth=1))
    return parent


def test_puct_examples():
    parent = node_with([(2, 1.0, 0.3), (8, 0.0, 0.3)])
    assert puct_score(parent, parent.children[0], 2.0) == pytest.approx(0.5 + 2 * 0.3 * math.sqrt(10) / 3, abs=1e-12)
    assert puct_score(parent, parent.children[0], 0.0) == 0.5
    ties = node_with([(0, 0.0, 1 / 3)] * 3)
    assert select_child(ties, 2.0) is ties.children[0]


def test_depth_one_correct_child_most_visited():
    tree = run_search(None, PlantedTreeTeacher(depth=1), SearchParams(), seeded_rng(0))
    best = max(tree.root.children, key=lambda c: c.visit_count)
    assert best.state == (0,)


def test_root_only_when_depth_zero():
    tree = run_search(None, PlantedTreeTeacher(), SearchParams(d_max=0), seeded_rng(0))
    assert tree.root.children == [] and tree.root.visit_count == 8 * 2


class AlwaysWrong(PlantedTreeTeacher):
    def reward(self, task, state):
        return 0


def test_all_wrong_is_prior_driven():
    tree = run_search(None, AlwaysWrong(shuffle=False), SearchParams(), seeded_rng(0))
    assert all(n.q() == 0.0 for n in tree.nodes())
    assert linearize(tree) == []


class Flaky(PlantedTreeTeacher):
    def propose(self, task, state, k, rng):
        if state == (0,):
            raise RuntimeError("teacher down")
        return super().propose(task, state, k, rng)


def test_teacher_failure_marks_unexpandable():
    tree = run_search(None, Flaky(shuffle=False), SearchParams(n_sim=12), seeded_rng(0))
    broken = tree.node_at((0,))
    assert broken is not None and not broken.expandable and broken.children == []
    assert tree.root.visit_count == tree.simulations


@pytest.mark.parametrize("seed", range(20))
def test_invariants(seed):
    tree = run_search(None, PlantedTreeTeacher(), SearchParams(), seeded_rng(seed))
    for it, root_n, sims in tree.history:
        assert root_n == sims
    for node in tree.nodes():
        assert 0.0 <= node.q() <= 1.0
        assert sum(c.prior for c in node.children) <= 1 + 1e-9
        assert node.visit_count == sum(c.visit_count for c in node.children) + node.own_simulations


def test_deterministic():
    a = run_search(None, PlantedTreeTeacher(), SearchParams(), seeded_rng(4))
    b = run_search(None, PlantedTreeTeacher(), SearchParams(), seeded_rng(4))
    assert [(n.state, n.visit_count, n.total_value) for n in a.nodes()] == [(n.state, n.visit_count, n.total_value) for n in b.nodes()]


def test_single_correct_leaf_gives_one_direct_chain():
    tree = run_search(None, PlantedTreeTeacher(depth=1, k=1), SearchParams(k=1), seeded_rng(0))
    chains = linearize(tree)
    assert [c.kind for c in chains] == [ChainKind.DIRECT]


def test_linearize_quota_and_validity():
    tree = run_search(None, PlantedTreeTeacher(), SearchParams(), seeded_rng(1))
    chains = linearize(tree)
    direct = [c for c in chains if c.kind is ChainKind.DIRECT]
    corrected = [c for c in chains if c.kind is ChainKind.CORRECTED]
    assert 1 <= len(direct) <= 8 and len(corrected) <= 2
    assert corrected
    for c in chains:
        assert replays_correctly(tree, c)
    for c in corrected:
        assert c.steps.count(BACKTRACK_CUE) == 1
    assert len({c.steps for c in chains}) == len(chains)


def test_chain_cue_invariant():
    with pytest.raises(ValueError):
        Chain(steps=(0, 1), kind=ChainKind.CORRECTED)
    with pytest.raises(ValueError):
        Chain(steps=(0, BACKTRACK_CUE, 1), kind=ChainKind.DIRECT)


def test_synth_teacher_chains(env):
    tasks = env.sample_tasks(seeded_rng(0), 4)
    records = generate_sft_records(tasks, env, SearchParams(), seeded_rng(1))
    assert records
    for rec in records:
        r = parse_response(rec["text"])
        task = next(t for t in tasks if t.task_id == rec["task_id"])
        assert r.format_ok and r.answer_text == task.gt_label
        assert rec["text"].count(BACKTRACK_CUE) == (rec["kind"] == "CORRECTED")
    for task in tasks:
        kinds = [r["kind"] for r in records if r["task_id"] == task.task_id]
        assert kinds.count("DIRECT") <= 8 and kinds.count("CORRECTED") <= 2


def test_synth_teacher_terminal_answer(env):
    task = env.sample_task(seeded_rng(2))
    teacher = SynthTeacher(env)
    tree = run_search(task, teacher, SearchParams(), seeded_rng(3))
    best = most_visited_terminal(tree)
    assert best is None or teacher.is_terminal(task, best.state)
