"""PUCT tree search over reasoning steps and linearization into SFT chains.

The search core is teacher-agnostic. A teacher proposes candidate next steps,
completes partial states to a terminal answer, and scores terminals by exact
match. Two teachers ship here: a stochastic mock over the synthetic
environment's action space and a planted tree used for verification.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterator, Protocol, Sequence

import numpy as np

from .synthenv import BACKTRACK_CUE, SynthEnv, SynthTask, answer_label

log = logging.getLogger(__name__)

Step = Hashable


class Teacher(Protocol):
    def propose(self, task: Any, state: tuple, k: int, rng: np.random.Generator) -> list[Step]: ...

    def complete(self, task: Any, state: tuple, rng: np.random.Generator) -> tuple: ...

    def is_terminal(self, task: Any, state: tuple) -> bool: ...

    def reward(self, task: Any, state: tuple) -> int: ...


@dataclass(frozen=True)
class SearchParams:
    n_sim: int = 8
    c_puct: float = 2.0
    k: int = 3
    n_rollouts: int = 2
    d_max: int = 10


@dataclass(eq=False)
class MctsNode:
    state: tuple
    parent: "MctsNode | None" = None
    prior: float = 1.0
    depth: int = 0
    terminal: bool = False
    terminal_reward: int | None = None
    children: list["MctsNode"] = field(default_factory=list)
    visit_count: int = 0
    total_value: float = 0.0
    own_simulations: int = 0
    expandable: bool = True
    # completed trajectories simulated from this node: (continuation, reward)
    rollouts: list[tuple[tuple, int]] = field(default_factory=list)

    @property
    def step(self) -> Step | None:
        return self.state[-1] if self.state else None

    def q(self) -> float:
        return self.total_value / max(self.visit_count, 1)

    def iter_subtree(self) -> Iterator["MctsNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass
class SearchTree:
    root: MctsNode
    task: Any
    teacher: Teacher
    simulations: int = 0
    # (iteration, root visits, simulations so far) after each iteration
    history: list[tuple[int, int, int]] = field(default_factory=list)

    def nodes(self) -> Iterator[MctsNode]:
        return self.root.iter_subtree()

    def terminals(self) -> list[MctsNode]:
        return [n for n in self.nodes() if n.terminal]

    def node_at(self, state: tuple) -> MctsNode | None:
        node = self.root
        for step in state:
            node = next((c for c in node.children if c.step == step), None)
            if node is None:
                return None
        return node


def puct_score(parent: MctsNode, child: MctsNode, c_puct: float) -> float:
    total = sum(c.visit_count for c in parent.children)
    return child.q() + c_puct * child.prior * math.sqrt(total) / (1 + child.visit_count)


def select_child(node: MctsNode, c_puct: float) -> MctsNode:
    # strict '>' keeps the lowest index on ties
    best, best_score = node.children[0], puct_score(node, node.children[0], c_puct)
    for child in node.children[1:]:
        s = puct_score(node, child, c_puct)
        if s > best_score:
            best, best_score = child, s
    return best


def _backpropagate(node: MctsNode, reward: float) -> None:
    node.own_simulations += 1
    while node is not None:
        node.visit_count += 1
        node.total_value += reward
        node = node.parent


def _simulate(tree: SearchTree, node: MctsNode, n: int, rng: np.random.Generator) -> None:
    for _ in range(n):
        if node.terminal:
            reward, continuation = node.terminal_reward, ()
        else:
            continuation = tuple(tree.teacher.complete(tree.task, node.state, rng))
            reward = int(tree.teacher.reward(tree.task, node.state + continuation))
        node.rollouts.append((continuation, reward))
        _backpropagate(node, reward)
        tree.simulations += 1


def _expand(tree: SearchTree, node: MctsNode, params: SearchParams, rng: np.random.Generator) -> list[MctsNode]:
    try:
        steps = list(dict.fromkeys(tree.teacher.propose(tree.task, node.state, params.k, rng)))
    except Exception as exc:  # teacher failures must not abort the search
        log.warning("teacher failed to expand %r: %s", node.state, exc)
        node.expandable = False
        return []
    if not steps:
        node.expandable = False
        return []
    prior = 1.0 / len(steps)
    for step in steps:
        state = node.state + (step,)
        terminal = tree.teacher.is_terminal(tree.task, state)
        node.children.append(
            MctsNode(
                state=state,
                parent=node,
                prior=prior,
                depth=node.depth + 1,
                terminal=terminal,
                terminal_reward=int(tree.teacher.reward(tree.task, state)) if terminal else None,
            )
        )
    return node.children


def run_search(task: Any, teacher: Teacher, params: SearchParams, rng: np.random.Generator) -> SearchTree:
    """``params.n_sim`` select-expand-simulate-backpropagate iterations."""
    tree = SearchTree(root=MctsNode(state=(), terminal=teacher.is_terminal(task, ())), task=task, teacher=teacher)
    for it in range(params.n_sim):
        node = tree.root
        while node.children and not node.terminal:
            node = select_child(node, params.c_puct)
        if not node.terminal and node.expandable and node.depth < params.d_max:
            for child in _expand(tree, node, params, rng):
                _simulate(tree, child, params.n_rollouts, rng)
            if not node.children:
                _simulate(tree, node, params.n_rollouts, rng)
        else:
            _simulate(tree, node, params.n_rollouts, rng)
        tree.history.append((it, tree.root.visit_count, tree.simulations))
    return tree


def most_visited_terminal(tree: SearchTree) -> MctsNode | None:
    """The search's answer: most visits, ties broken by mean value, then tree order."""
    best = None
    for node in tree.nodes():
        if node.terminal and (best is None or (node.visit_count, node.q()) > (best.visit_count, best.q())):
            best = node
    return best


class ChainKind(str, enum.Enum):
    DIRECT = "DIRECT"
    CORRECTED = "CORRECTED"


@dataclass(frozen=True)
class Chain:
    """A linearized trajectory. Corrected chains hold ``[.., wrong, CUE, ..]``."""

    steps: tuple
    kind: ChainKind
    backtrack_at: int | None = None

    def __post_init__(self):
        cues = sum(1 for s in self.steps if s == BACKTRACK_CUE)
        if self.kind is ChainKind.CORRECTED and cues != 1:
            raise ValueError("a corrected chain carries exactly one backtracking cue")
        if self.kind is ChainKind.DIRECT and cues:
            raise ValueError("a direct chain carries no backtracking cue")

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def wrong_step(self) -> Step | None:
        return None if self.backtrack_at is None else self.steps[self.backtrack_at]

    def replay_steps(self) -> tuple:
        """The trajectory actually executed: the abandoned step and the cue removed."""
        if self.backtrack_at is None:
            return self.steps
        return self.steps[: self.backtrack_at] + self.steps[self.backtrack_at + 2 :]


def _trajectories(tree: SearchTree) -> list[tuple[tuple, int]]:
    seen: dict[tuple, int] = {}
    for node in tree.nodes():
        if node.terminal:
            seen.setdefault(node.state, node.terminal_reward)
        for continuation, reward in node.rollouts:
            seen.setdefault(node.state + continuation, reward)
    return list(seen.items())


def _is_incorrect_branch(node: MctsNode) -> bool:
    if node.terminal:
        return node.terminal_reward == 0
    return node.visit_count > 0 and node.total_value == 0


def linearize(tree: SearchTree, quota: dict[str, int] | None = None) -> list[Chain]:
    """Shortest correct paths (direct) plus wrong-step + cue + correct-path splices (corrected).

    Quotas are upper bounds; trees without enough distinct paths yield fewer.
    """
    quota = {"direct": 8, "corrected": 2, **(quota or {})}
    trajs = _trajectories(tree)
    # stable sort: highest reward first, then shortest
    order = sorted(range(len(trajs)), key=lambda i: (-trajs[i][1], len(trajs[i][0]), i))
    correct = [trajs[i][0] for i in order if trajs[i][1] == 1]
    if not correct:
        return []
    direct = [Chain(steps=s, kind=ChainKind.DIRECT) for s in correct[: quota["direct"]]]

    candidates: dict[tuple, Chain] = {}
    for path in correct:
        for i in range(len(path)):
            branch_point = tree.node_at(path[:i])
            if branch_point is None:
                break
            for child in branch_point.children:
                if child.step != path[i] and _is_incorrect_branch(child):
                    steps = path[:i] + (child.step, BACKTRACK_CUE) + path[i:]
                    candidates.setdefault(steps, Chain(steps=steps, kind=ChainKind.CORRECTED, backtrack_at=i))
    corrected = sorted(candidates.values(), key=lambda c: c.length)[: quota["corrected"]]
    return direct + corrected


def replays_correctly(tree: SearchTree, chain: Chain) -> bool:
    steps = chain.replay_steps()
    return tree.teacher.is_terminal(tree.task, steps) and tree.teacher.reward(tree.task, steps) == 1


# --- teachers -------------------------------------------------------------------


class PlantedTreeTeacher:
    """A ``depth``-level tree with ``k`` steps per level; step 0 is the correct branch.

    Completions are deterministic: from a state on the correct path they follow
    it to the correct terminal, otherwise they end incorrectly. The proposal
    order is shuffled with the search stream.
    """

    def __init__(self, depth: int = 3, k: int = 3, shuffle: bool = True):
        self.depth, self.k, self.shuffle = depth, k, shuffle

    def propose(self, task, state, k, rng):
        steps = list(range(self.k))[:k]
        if self.shuffle:
            rng.shuffle(steps)
        return steps

    def complete(self, task, state, rng):
        fill = 0 if all(s == 0 for s in state) else 1
        return (fill,) * (self.depth - len(state))

    def is_terminal(self, task, state):
        return len(state) >= self.depth

    def answer(self, state) -> str:
        return "correct" if all(s == 0 for s in state) else "wrong"

    def reward(self, task, state):
        return int(self.answer(state) == "correct")


class SynthTeacher:
    """Stochastic mock teacher over the synthetic environment's action space.

    It sees the scene: fact claims are drawn mostly from the true fact set and
    the final (answer, box) step mostly names the evidenced answer with the box
    where that answer sits. Terminals are the full reasoning plus that step.
    """

    def __init__(self, env: SynthEnv, fact_accuracy: float = 0.8, answer_accuracy: float = 0.6, temperature: float = 1.0):
        self.env = env
        self.fact_accuracy = fact_accuracy
        self.answer_accuracy = answer_accuracy
        self.temperature = temperature

    def _reasoning_weights(self, task: SynthTask, state: tuple) -> np.ndarray:
        sch = self.env.schema
        w = np.full(sch.n_facts + sch.n_answers, 1e-3)
        true = sorted(task.fact_set)
        false = [f for f in range(sch.n_facts) if f not in task.fact_set]
        w[true] = self.fact_accuracy / len(true)
        if false:
            w[false] = (1 - self.fact_accuracy) / len(false)
        if len(state) == sch.n_reasoning - 1:
            # last reasoning slot leans toward stating a conclusion
            w[sch.n_facts :] = w[: sch.n_facts].sum() / sch.n_answers
        return w ** (1.0 / self.temperature)

    def _final_weights(self, task: SynthTask, state: tuple) -> tuple[np.ndarray, list[tuple[int, int]]]:
        sch = self.env.schema
        concluded = [a - sch.n_facts for a in state if sch.is_conclusion(a)]
        pairs, weights = [], []
        for a in range(sch.n_answers):
            if concluded:
                p = 0.9 if a == concluded[-1] else 0.1 / (sch.n_answers - 1)
            else:
                p = self.answer_accuracy if a == task.gt_answer else (1 - self.answer_accuracy) / (sch.n_answers - 1)
            pairs.append((a, self.env.answer_location[task.context_id][a]))
            weights.append(p)
        return np.asarray(weights) ** (1.0 / self.temperature), pairs

    def _draw(self, weights: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
        k = min(k, int((weights > 0).sum()))
        return [int(i) for i in rng.choice(len(weights), size=k, replace=False, p=weights / weights.sum())]

    def propose(self, task, state, k, rng):
        if len(state) < self.env.schema.n_reasoning:
            return self._draw(self._reasoning_weights(task, state), k, rng)
        weights, pairs = self._final_weights(task, state)
        return [pairs[i] for i in self._draw(weights, k, rng)]

    def complete(self, task, state, rng):
        out = tuple(state)
        while not self.is_terminal(task, out):
            out = out + tuple(self.propose(task, out, 1, rng))
        return out[len(state) :]

    def is_terminal(self, task, state):
        return len(state) == self.env.schema.n_reasoning + 1

    def actions(self, state: tuple) -> list[int]:
        answer, box = state[-1]
        return list(state[:-1]) + [answer, box]

    def reward(self, task, state):
        answer, _ = state[-1]
        return int(answer_label(answer) == task.gt_label)

    def render(self, task: SynthTask, chain: Chain) -> str:
        if chain.backtrack_at is None:
            return self.env.decode_actions(task, self.actions(chain.steps))
        wrong = chain.wrong_step
        if isinstance(wrong, tuple):
            wrong_text = self.env.reasoning_sentence(self.env.schema.conclusion(wrong[0]))
        else:
            wrong_text = self.env.reasoning_sentence(wrong)
        actions = self.actions(chain.replay_steps())
        return self.env.decode_actions(task, actions, backtrack=(chain.backtrack_at, wrong_text))


def generate_sft_records(
    tasks: Sequence[SynthTask],
    env: SynthEnv,
    params: SearchParams,
    rng: np.random.Generator,
    quota: dict[str, int] | None = None,
    teacher: SynthTeacher | None = None,
) -> list[dict]:
    teacher = teacher or SynthTeacher(env)
    records = []
    for task in tasks:
        tree = run_search(task, teacher, params, rng)
        for chain in linearize(tree, quota):
            records.append({"task_id": task.task_id, "kind": chain.kind.value, "text": teacher.render(task, chain)})
    return records
