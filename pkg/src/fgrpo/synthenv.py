"""Synthetic verifiable environment.

A scene belongs to one of ``n_contexts`` scene types. The policy only sees the
scene type; with probability ``shortcut_bias`` the answer is the type's usual
answer, otherwise it is drawn uniformly. The scene's fact set always contains
the type's background facts plus an evidence fact naming the true answer, so a
reader of the scene could answer every question while a reader of the scene
type alone can only exploit the shortcut.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .core import BBox, SourceTag, seeded_rng
from .rewards import ConsistencyQuery, JudgeVerdictC, JudgeVerdictS, Judges, SentenceQuery, normalize_answer
from .parse import parse_response, split_sentences

log = logging.getLogger(__name__)

BACKTRACK_CUE = "Wait, this seems off. Let's try something else."

_COLORS = ("red", "blue", "green", "yellow", "black", "white", "orange", "purple", "brown", "gray")
_OBJECTS = ("car", "tree", "lamp", "chair", "dog", "cup", "bottle", "sign", "door", "bicycle", "book", "vase")
_RELATIONS = ("left of", "right of", "above", "below", "next to", "behind")
_CONCLUSION_RE = re.compile(r"^Therefore the answer is ([A-Z])\.$")
_REGION_RE = re.compile(r"^The relevant region is <bbox>\[[^\]]*\]</bbox>\.$")


def answer_label(i: int) -> str:
    return chr(ord("A") + i)


@dataclass(frozen=True)
class EnvConfig:
    n_contexts: int = 8
    n_answers: int = 4
    n_facts: int = 12
    n_background: int = 2
    distractor_prob: float = 0.25
    grid: int = 3
    cell: int = 10
    shortcut_bias: float = 0.9
    box_prob: float = 0.5
    reasoning_slots: int = 3
    world_seed: int = 0

    def __post_init__(self):
        if self.n_answers < 2 or self.n_contexts < 1:
            raise ValueError("need at least 2 answers and 1 context")
        if self.n_facts < self.n_answers + self.n_background:
            raise ValueError("n_facts must cover evidence and background facts")
        if self.n_answers > self.grid * self.grid:
            raise ValueError("each answer needs its own candidate box")
        if not 0.0 <= self.shortcut_bias <= 1.0 or not 0.0 <= self.box_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.reasoning_slots < 1:
            raise ValueError("need at least one reasoning slot")
        if self.n_facts > len(_COLORS) * len(_OBJECTS):
            raise ValueError("fact vocabulary larger than the sentence templates can render")


@dataclass(frozen=True)
class ActionSchema:
    """Per-slot action sets: R reasoning slots, one answer slot, one box slot.

    Reasoning actions ``0..F-1`` claim a fact, ``F..F+A-1`` state a conclusion.
    Box action ``B`` means no box.
    """

    n_reasoning: int
    n_facts: int
    n_answers: int
    n_boxes: int

    @property
    def n_slots(self) -> int:
        return self.n_reasoning + 2

    @property
    def answer_slot(self) -> int:
        return self.n_reasoning

    @property
    def box_slot(self) -> int:
        return self.n_reasoning + 1

    @property
    def none_box(self) -> int:
        return self.n_boxes

    def slot_sizes(self) -> list[int]:
        return [self.n_facts + self.n_answers] * self.n_reasoning + [self.n_answers, self.n_boxes + 1]

    @property
    def max_actions(self) -> int:
        return max(self.slot_sizes())

    def legal_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_slots, self.max_actions), dtype=bool)
        for s, n in enumerate(self.slot_sizes()):
            mask[s, :n] = True
        return mask

    def is_conclusion(self, action: int) -> bool:
        return action >= self.n_facts

    def conclusion(self, answer: int) -> int:
        return self.n_facts + answer

    def validate(self, actions: Sequence[int]) -> None:
        sizes = self.slot_sizes()
        if len(actions) != len(sizes):
            raise ValueError(f"expected {len(sizes)} actions, got {len(actions)}")
        for s, (a, n) in enumerate(zip(actions, sizes)):
            if not 0 <= int(a) < n:
                raise ValueError(f"action {a} illegal in slot {s} (size {n})")


@dataclass(frozen=True)
class SynthTask:
    task_id: str
    context_id: int
    fact_set: frozenset[int]
    options: tuple[int, ...]
    gt_answer: int
    gt_box: BBox
    candidate_boxes: tuple[BBox, ...]
    shortcut_bias: float
    source_tag: SourceTag

    def __post_init__(self):
        if self.gt_answer not in self.options:
            raise ValueError("gt_answer must be one of the options")
        if self.gt_box not in self.candidate_boxes:
            raise ValueError("gt_box must be a candidate box")
        if not self.fact_set:
            raise ValueError("a scene needs at least one fact")

    @property
    def gt_label(self) -> str:
        return answer_label(self.gt_answer)

    @property
    def question(self) -> str:
        labels = ", ".join(answer_label(o) for o in self.options)
        return f"In this scene of type {self.context_id}, which option ({labels}) is correct?"

    @property
    def gt_boxes(self) -> list[BBox] | None:
        return [self.gt_box] if self.source_tag is SourceTag.HAS_GT_BOXES else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "context_id": self.context_id,
            "fact_set": sorted(self.fact_set),
            "options": list(self.options),
            "gt_answer": self.gt_answer,
            "gt_box": self.gt_box.to_list(),
            "candidate_boxes": [b.to_list() for b in self.candidate_boxes],
            "shortcut_bias": self.shortcut_bias,
            "source_tag": self.source_tag.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthTask":
        return cls(
            task_id=str(d["task_id"]),
            context_id=int(d["context_id"]),
            fact_set=frozenset(int(f) for f in d["fact_set"]),
            options=tuple(int(o) for o in d["options"]),
            gt_answer=int(d["gt_answer"]),
            gt_box=BBox(*d["gt_box"]),
            candidate_boxes=tuple(BBox(*b) for b in d["candidate_boxes"]),
            shortcut_bias=float(d["shortcut_bias"]),
            source_tag=SourceTag(d["source_tag"]),
        )


@dataclass
class SynthEnv:
    """The fixed world of an :class:`EnvConfig`: shortcuts, background facts, layouts."""

    config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        cfg = self.config
        rng = seeded_rng(cfg.world_seed)
        A, F = cfg.n_answers, cfg.n_facts
        self.shortcut_answer = [int(rng.integers(A)) for _ in range(cfg.n_contexts)]
        non_evidence = np.arange(A, F)
        self.background = [
            frozenset(int(f) for f in rng.choice(non_evidence, size=cfg.n_background, replace=False))
            for _ in range(cfg.n_contexts)
        ]
        n_boxes = cfg.grid * cfg.grid
        self.answer_location = [tuple(int(b) for b in rng.permutation(n_boxes)[:A]) for _ in range(cfg.n_contexts)]
        self.schema = ActionSchema(cfg.reasoning_slots, F, A, n_boxes)
        self.fact_text = [_fact_sentence(f) for f in range(F)]
        self._fact_lookup = {t: f for f, t in enumerate(self.fact_text)}

    @cached_property
    def candidate_boxes(self) -> tuple[BBox, ...]:
        # 2x2-cell windows sliding by one cell: neighbours overlap, so near misses score partially
        c, g = self.config.cell, self.config.grid
        return tuple(BBox(c * i, c * j, c * (i + 2), c * (j + 2)) for j in range(g) for i in range(g))

    def evidence_fact(self, answer: int) -> int:
        return answer

    def fact_id(self, sentence: str) -> int | None:
        return self._fact_lookup.get(sentence)

    # -- tasks -------------------------------------------------------------

    def sample_task(self, rng: np.random.Generator, task_id: str = "task-0") -> SynthTask:
        cfg = self.config
        c = int(rng.integers(cfg.n_contexts))
        if rng.random() < cfg.shortcut_bias:
            gt = self.shortcut_answer[c]
        else:
            gt = int(rng.integers(cfg.n_answers))
        others = [f for f in range(cfg.n_answers, cfg.n_facts) if f not in self.background[c]]
        draws = rng.random(len(others))
        facts = set(self.background[c]) | {self.evidence_fact(gt)}
        facts |= {f for f, u in zip(others, draws) if u < cfg.distractor_prob}
        has_box = rng.random() < cfg.box_prob
        boxes = self.candidate_boxes
        return SynthTask(
            task_id=task_id,
            context_id=c,
            fact_set=frozenset(facts),
            options=tuple(range(cfg.n_answers)),
            gt_answer=gt,
            gt_box=boxes[self.answer_location[c][gt]],
            candidate_boxes=boxes,
            shortcut_bias=cfg.shortcut_bias,
            source_tag=SourceTag.HAS_GT_BOXES if has_box else SourceTag.NO_GT_BOXES,
        )

    def sample_tasks(self, rng: np.random.Generator, n: int, prefix: str = "task") -> list[SynthTask]:
        return [self.sample_task(rng, f"{prefix}-{i}") for i in range(n)]

    # -- rendering -----------------------------------------------------------

    def reasoning_sentence(self, action: int) -> str:
        sch = self.schema
        if sch.is_conclusion(action):
            return f"Therefore the answer is {answer_label(action - sch.n_facts)}."
        return self.fact_text[action]

    def region_sentence(self, box: BBox) -> str:
        coords = ",".join(f"{v:g}" for v in box.to_list())
        return f"The relevant region is <bbox>[{coords}]</bbox>."

    def think_sentences(
        self, task: SynthTask, actions: Sequence[int], backtrack: tuple[int, str] | None = None
    ) -> list[str]:
        self.schema.validate(actions)
        sch = self.schema
        sentences = [self.reasoning_sentence(a) for a in actions[: sch.n_reasoning]]
        if backtrack is not None:
            pos, wrong = backtrack
            sentences[pos:pos] = [wrong, BACKTRACK_CUE]
        box_action = actions[sch.box_slot]
        if box_action != sch.none_box:
            sentences.append(self.region_sentence(task.candidate_boxes[box_action]))
        return sentences

    def decode_actions(
        self, task: SynthTask, actions: Sequence[int], backtrack: tuple[int, str] | None = None
    ) -> str:
        """Render an action sequence as ``<think>..</think><answer>..</answer>`` text.

        ``backtrack=(pos, sentence)`` splices a wrong step and the backtracking
        cue in front of reasoning position ``pos``.
        """
        think = " ".join(self.think_sentences(task, actions, backtrack))
        return f"<think>{think}</think><answer>{answer_label(actions[self.schema.answer_slot])}</answer>"

    def render_malformed(self, task: SynthTask, actions: Sequence[int], defect: str = "missing_answer") -> str:
        """Template-violating renderings, for negative tests of the format reward."""
        think = " ".join(self.think_sentences(task, actions))
        ans = answer_label(actions[self.schema.answer_slot])
        variants = {
            "missing_answer": f"<think>{think}</think>",
            "swapped": f"<answer>{ans}</answer><think>{think}</think>",
            "duplicate_think": f"<think>{think}</think><think>{think}</think><answer>{ans}</answer>",
            "no_tags": f"{think} {ans}",
        }
        return variants[defect]

    def recover_actions(self, task: SynthTask, think_text: str, answer_text: str) -> tuple[int, ...]:
        """Inverse of :meth:`decode_actions` for responses it rendered."""
        sch = self.schema
        reasoning, box = [], sch.none_box
        for s in split_sentences(think_text):
            m = _CONCLUSION_RE.match(s.text)
            if m:
                reasoning.append(sch.conclusion(ord(m.group(1)) - ord("A")))
            elif _REGION_RE.match(s.text):
                (b,) = parse_response(f"<think>{s.text}</think><answer></answer>").bboxes
                box = task.candidate_boxes.index(b)
            else:
                fid = self.fact_id(s.text)
                if fid is None:
                    raise ValueError(f"sentence not produced by this environment: {s.text!r}")
                reasoning.append(fid)
        answer = ord(answer_text.strip().upper()) - ord("A")
        actions = tuple(reasoning) + (answer, box)
        sch.validate(actions)
        return actions

    # -- judges --------------------------------------------------------------

    def programmatic_sentence_judge(self, q: SentenceQuery, task: SynthTask | None = None) -> JudgeVerdictS:
        task = task if task is not None else q.image_ref
        text = q.target_sentence.strip()
        fid = self.fact_id(text)
        if fid is None:
            if not (_CONCLUSION_RE.match(text) or _REGION_RE.match(text) or text == BACKTRACK_CUE):
                log.debug("unrecognised sentence judged SKIP: %r", text)
            return JudgeVerdictS.SKIP
        if text in q.context_sentences:
            return JudgeVerdictS.SKIP
        if not isinstance(task, SynthTask):
            raise ValueError("programmatic sentence judge needs the SynthTask as image_ref")
        return JudgeVerdictS.CORRECT if fid in task.fact_set else JudgeVerdictS.INCORRECT

    def judges(self) -> Judges:
        return Judges(consistency=programmatic_consistency_judge, sentence=self.programmatic_sentence_judge)

    # -- analysis ------------------------------------------------------------

    def best_response_accuracy(self, tasks: Sequence[SynthTask], observe_facts: bool) -> float:
        """Accuracy of the best deterministic answer map on ``tasks``.

        The map sees either the scene type alone or the scene type plus the
        fact set. The optimum decomposes per observation into a majority vote.
        """
        counts: dict[Any, np.ndarray] = {}
        for t in tasks:
            key = (t.context_id, t.fact_set) if observe_facts else t.context_id
            counts.setdefault(key, np.zeros(self.config.n_answers, dtype=int))[t.gt_answer] += 1
        return sum(int(c.max()) for c in counts.values()) / len(tasks)


def exhaustive_best_accuracy(tasks: Sequence[SynthTask], n_answers: int, observe_facts: bool) -> float:
    """Enumerate every deterministic observation->answer map (tiny instances only)."""
    keys = sorted({(t.context_id, tuple(sorted(t.fact_set))) if observe_facts else t.context_id for t in tasks})
    index = {k: i for i, k in enumerate(keys)}
    best = 0
    for policy in itertools.product(range(n_answers), repeat=len(keys)):
        hits = 0
        for t in tasks:
            k = (t.context_id, tuple(sorted(t.fact_set))) if observe_facts else t.context_id
            hits += policy[index[k]] == t.gt_answer
        best = max(best, hits)
    return best / len(tasks)


def _fact_sentence(f: int) -> str:
    color = _COLORS[f % len(_COLORS)]
    obj = _OBJECTS[(f // len(_COLORS)) % len(_OBJECTS)]
    rel = _RELATIONS[f % len(_RELATIONS)]
    anchor = _OBJECTS[(f + 5) % len(_OBJECTS)]
    if anchor == obj:
        anchor = _OBJECTS[(f + 6) % len(_OBJECTS)]
    return f"The {color} {obj} is {rel} the {anchor}."


def programmatic_consistency_judge(q: ConsistencyQuery) -> JudgeVerdictC:
    """YES iff the reasoning states exactly one conclusion and it matches the answer."""
    conclusions = [m.group(1) for s in split_sentences(q.reasoning) if (m := _CONCLUSION_RE.match(s.text))]
    if len(conclusions) != 1:
        return JudgeVerdictC.NO
    answer = normalize_answer(q.answer)
    return JudgeVerdictC.YES if answer and normalize_answer(conclusions[0]) == answer else JudgeVerdictC.NO


def sample_task(rng: np.random.Generator, config: EnvConfig | None = None, task_id: str = "task-0") -> SynthTask:
    return SynthEnv(config or EnvConfig()).sample_task(rng, task_id)
