"""Task reward, masked constraint rewards, judge roles and corpus metrics."""

from __future__ import annotations

import enum
import logging
import math
import string
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from .core import BBox, RewardVector, SourceTag, StructuredResponse
from .geometry import spatial_grounding_reward
from .parse import Sentence, SentenceKind, Verdict, split_sentences

log = logging.getLogger(__name__)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class JudgeVerdictC(str, enum.Enum):
    YES = "YES"
    NO = "NO"


class JudgeVerdictS(str, enum.Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"
    SKIP = "SKIP"


class JudgeError(RuntimeError):
    """A judge could not produce a verdict (transport failure, unparseable reply)."""


@dataclass(frozen=True)
class ConsistencyQuery:
    question: str
    reasoning: str
    answer: str


@dataclass(frozen=True)
class SentenceQuery:
    image_ref: Any
    question: str
    context_sentences: tuple[str, ...]
    target_sentence: str


class ConsistencyJudge(Protocol):
    def __call__(self, query: ConsistencyQuery) -> JudgeVerdictC: ...


class SentenceJudge(Protocol):
    def __call__(self, query: SentenceQuery) -> JudgeVerdictS: ...


@dataclass
class Judges:
    """The two judge roles plus running call/failure counters."""

    consistency: ConsistencyJudge
    sentence: SentenceJudge
    consistency_calls: int = 0
    sentence_calls: int = 0
    failures: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def judge_consistency(self, query: ConsistencyQuery) -> JudgeVerdictC:
        self.consistency_calls += 1
        return JudgeVerdictC(self.consistency(query))

    def judge_sentence(self, query: SentenceQuery) -> JudgeVerdictS:
        self.sentence_calls += 1
        return JudgeVerdictS(self.sentence(query))

    def record_failure(self, message: str) -> None:
        self.failures += 1
        self.diagnostics.append(message)
        log.warning("judge failure: %s", message)


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def accuracy_reward(resp: StructuredResponse, gt_answer: str) -> int:
    pred = normalize_answer(resp.answer_text)
    return int(bool(pred) and pred == normalize_answer(gt_answer))


def format_reward(resp: StructuredResponse) -> int:
    return int(resp.format_ok)


def task_reward(r_acc: int, r_fmt: int) -> float:
    return 0.5 * r_acc + 0.5 * r_fmt


def consistency_reward(judges: Judges, q: ConsistencyQuery, r_acc: int) -> tuple[int | None, int]:
    """Returns (value, mask). The judge is not consulted when the answer is wrong."""
    if not r_acc:
        return None, 0
    try:
        verdict = judges.judge_consistency(q)
    except (JudgeError, ValueError) as exc:
        judges.record_failure(f"consistency: {exc}")
        return None, 0
    return int(verdict is JudgeVerdictC.YES), 1


def judge_sentences(
    judges: Judges, scene: Any, question: str, sentences: Sequence[Sentence]
) -> list[Sentence]:
    """Attach a verdict to every non-trivial sentence; a failed call leaves it UNSCORED."""
    out = []
    context: list[str] = []
    for s in sentences:
        if s.kind is SentenceKind.VISUAL:
            query = SentenceQuery(
                image_ref=scene, question=question, context_sentences=tuple(context), target_sentence=s.text
            )
            try:
                s = s.with_verdict(Verdict(judges.judge_sentence(query).value))
            except (JudgeError, ValueError) as exc:
                judges.record_failure(f"sentence {s.index}: {exc}")
        out.append(s)
        context.append(s.text)
    return out


def grounding_from_verdicts(sentences: Sequence[Sentence]) -> float | None:
    scored = [s.verdict for s in sentences if s.verdict in (Verdict.CORRECT, Verdict.INCORRECT)]
    if not scored:
        return None
    return sum(v is Verdict.CORRECT for v in scored) / len(scored)


def semantic_grounding_reward(
    judges: Judges, scene: Any, question: str, sentences: Sequence[Sentence], r_acc: int
) -> tuple[float | None, int]:
    if not r_acc:
        return None, 0
    value = grounding_from_verdicts(judge_sentences(judges, scene, question, sentences))
    return value, int(value is not None)


@dataclass(frozen=True)
class ScoredResponse:
    rewards: RewardVector
    sentences: tuple[Sentence, ...]


def score_response(
    resp: StructuredResponse,
    gt_answer: str,
    gt_boxes: Sequence[BBox] | None,
    source_tag: SourceTag,
    judges: Judges,
    question: str = "",
    scene: Any = None,
) -> ScoredResponse:
    source_tag = SourceTag(source_tag)
    if source_tag is SourceTag.HAS_GT_BOXES and not gt_boxes:
        raise ValueError("record tagged HAS_GT_BOXES carries no ground-truth boxes")
    r_acc = accuracy_reward(resp, gt_answer)
    r_fmt = format_reward(resp)
    r_c, _ = consistency_reward(judges, ConsistencyQuery(question, resp.think_text, resp.answer_text), r_acc)
    sentences = split_sentences(resp.think_text)
    r_s = None
    if r_acc:
        sentences = judge_sentences(judges, scene, question, sentences)
        r_s = grounding_from_verdicts(sentences)
    r_g = None
    if source_tag is SourceTag.HAS_GT_BOXES:
        r_g = spatial_grounding_reward(list(resp.bboxes), list(gt_boxes))
    return ScoredResponse(RewardVector(r_acc=r_acc, r_fmt=r_fmt, r_c=r_c, r_s=r_s, r_g=r_g), tuple(sentences))


def assemble_reward_vector(
    resp: StructuredResponse,
    gt_answer: str,
    gt_boxes: Sequence[BBox] | None,
    source_tag: SourceTag,
    judges: Judges,
    question: str = "",
    scene: Any = None,
) -> RewardVector:
    return score_response(resp, gt_answer, gt_boxes, source_tag, judges, question, scene).rewards


# --- evaluation metrics -------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    """Evaluation-time verdicts for one sample (consistency is judged unmasked).

    ``consistency`` is None when the response had no parseable answer; such
    samples count as inconsistent.
    """

    prompt_id: str
    correct: bool
    consistency: JudgeVerdictC | None
    semantic_grounding: float | None = None


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    inconsistency_rate: float
    mean_semantic_grounding: float
    n_total: int
    n_correct: int
    n_inconsistent: int
    n_unparseable: int
    n_grounding_scored: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "inconsistency_rate": self.inconsistency_rate,
            "mean_semantic_grounding": self.mean_semantic_grounding,
            "counts": {
                "total": self.n_total,
                "correct": self.n_correct,
                "inconsistent": self.n_inconsistent,
                "unparseable": self.n_unparseable,
                "grounding_scored": self.n_grounding_scored,
            },
        }


def _is_inconsistent(rec: EvalRecord) -> bool:
    return rec.consistency is not JudgeVerdictC.YES


def inconsistency_rate(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("inconsistency rate of an empty record set is undefined")
    return sum(_is_inconsistent(r) for r in records) / len(records)


def evaluate_response(
    resp: StructuredResponse, gt_answer: str, judges: Judges, question: str = "", scene: Any = None, prompt_id: str = ""
) -> EvalRecord:
    """Judge one response for the corpus metrics, without the training-time masks."""
    correct = bool(accuracy_reward(resp, gt_answer))
    verdict = None
    if normalize_answer(resp.answer_text):
        try:
            verdict = judges.judge_consistency(ConsistencyQuery(question, resp.think_text, resp.answer_text))
        except (JudgeError, ValueError) as exc:
            judges.record_failure(f"eval consistency: {exc}")
    sentences = judge_sentences(judges, scene, question, split_sentences(resp.think_text))
    return EvalRecord(prompt_id, correct, verdict, grounding_from_verdicts(sentences))


def compute_metrics(records: Sequence[EvalRecord]) -> MetricsReport:
    if not records:
        raise ValueError("no records to summarize")
    grounded = [r.semantic_grounding for r in records if r.semantic_grounding is not None]
    n_incons = sum(_is_inconsistent(r) for r in records)
    n_correct = sum(r.correct for r in records)
    return MetricsReport(
        accuracy=n_correct / len(records),
        inconsistency_rate=n_incons / len(records),
        mean_semantic_grounding=math.fsum(grounded) / len(grounded) if grounded else 0.0,
        n_total=len(records),
        n_correct=n_correct,
        n_inconsistent=n_incons,
        n_unparseable=sum(r.consistency is None for r in records),
        n_grounding_scored=len(grounded),
    )


def cohen_kappa(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    if len(labels_a) != len(labels_b):
        raise ValueError("label vectors differ in length")
    n = len(labels_a)
    if n == 0:
        raise ValueError("cohen_kappa needs at least one label pair")
    p_o = sum(int(a) == int(b) for a, b in zip(labels_a, labels_b)) / n
    pa1 = sum(int(a) for a in labels_a) / n
    pb1 = sum(int(b) for b in labels_b) / n
    p_e = pa1 * pb1 + (1 - pa1) * (1 - pb1)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1 - p_e)

