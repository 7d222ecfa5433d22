"""Response-template parsing and reasoning-trace sentence handling."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .core import BBox, StructuredResponse

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_TEMPLATE_RE = re.compile(r"\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*", re.DOTALL)
BBOX_RE = re.compile(r"<bbox>(.*?)</bbox>", re.DOTALL)
_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


class SentenceKind(str, enum.Enum):
    VISUAL = "VISUAL"
    TRIVIAL = "TRIVIAL"


class Verdict(str, enum.Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"
    SKIP = "SKIP"
    UNSCORED = "UNSCORED"


@dataclass(frozen=True)
class Sentence:
    text: str
    index: int
    kind: SentenceKind = SentenceKind.VISUAL
    verdict: Verdict = Verdict.UNSCORED

    def with_verdict(self, verdict: Verdict) -> "Sentence":
        if self.verdict is not Verdict.UNSCORED:
            raise ValueError(f"sentence {self.index} already has verdict {self.verdict.value}")
        if self.kind is SentenceKind.TRIVIAL and verdict is not Verdict.UNSCORED:
            raise ValueError("trivial sentences are never scored")
        return replace(self, verdict=Verdict(verdict))


@dataclass(frozen=True)
class Lexicon:
    prefixes: tuple[str, ...]
    visual_terms: tuple[str, ...]

    def __post_init__(self):
        words = frozenset(t for t in self.visual_terms if " " not in t)
        phrases = tuple(t for t in self.visual_terms if " " in t)
        object.__setattr__(self, "_words", words)
        object.__setattr__(
            self,
            "_phrase_re",
            re.compile(r"\b(?:" + "|".join(re.escape(p) for p in phrases) + r")\b") if phrases else None,
        )
        object.__setattr__(
            self,
            "_prefix_re",
            re.compile(
                r"^(?:" + "|".join(_prefix_pattern(p) for p in self.prefixes) + r")",
                re.IGNORECASE,
            )
            if self.prefixes
            else None,
        )

    def has_trivial_prefix(self, text: str) -> bool:
        return self._prefix_re is not None and self._prefix_re.match(text.lstrip()) is not None

    def has_visual_term(self, text: str) -> bool:
        if BBOX_RE.search(text) or "[" in text and re.search(r"\[\s*-?\d", text):
            return True
        lowered = text.lower()
        if any(w in self._words for w in re.findall(r"[a-z]+", lowered)):
            return True
        return self._phrase_re is not None and self._phrase_re.search(lowered) is not None


def _prefix_pattern(prefix: str) -> str:
    pat = re.escape(prefix)
    # a word-final prefix must not match the start of a longer word ("Now" vs "Nowhere")
    return pat + r"(?![A-Za-z])" if prefix[-1].isalnum() else pat


def read_terms(path: str | Path) -> tuple[str, ...]:
    """Read a lexicon file: one term per line, '#' starts a comment."""
    terms = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        term = line.split("#", 1)[0].strip()
        if term:
            terms.append(term)
    return tuple(terms)


def load_lexicon(prefix_path: str | Path, visual_path: str | Path) -> Lexicon:
    return Lexicon(prefixes=read_terms(prefix_path), visual_terms=read_terms(visual_path))


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    data = resources.files("fgrpo") / "data"
    with resources.as_file(data / "trivial_prefixes.txt") as p, resources.as_file(data / "visual_keywords.txt") as v:
        return load_lexicon(p, v)


def _parse_bboxes(think: str) -> tuple[list[BBox], list[str]]:
    boxes, diagnostics = [], []
    for m in BBOX_RE.finditer(think):
        payload = m.group(1).strip()
        try:
            if not (payload.startswith("[") and payload.endswith("]")):
                raise ValueError("expected [x1,y1,x2,y2]")
            nums = [float(x) for x in payload[1:-1].split(",")]
            if len(nums) != 4:
                raise ValueError(f"expected 4 coordinates, got {len(nums)}")
            boxes.append(BBox(*nums))
        except ValueError as exc:
            diagnostics.append(f"dropped bbox {payload!r}: {exc}")
    return boxes, diagnostics


def parse_response(raw: str) -> StructuredResponse:
    """Parse ``<think>..</think><answer>..</answer>`` text. Never raises."""
    if not isinstance(raw, str):
        raw = "" if raw is None else str(raw)
    counts_ok = all(raw.count(tag) == 1 for tag in _TAGS)
    full = _TEMPLATE_RE.fullmatch(raw) if counts_ok else None
    if full:
        think, answer = full.group(1), full.group(2)
    else:
        t, a = _THINK_RE.search(raw), _ANSWER_RE.search(raw)
        think = t.group(1) if t else ""
        answer = a.group(1) if a else ""
    boxes, diagnostics = _parse_bboxes(think)
    return StructuredResponse(
        think_text=think.strip(),
        answer_text=answer.strip(),
        bboxes=tuple(boxes),
        format_ok=full is not None,
        diagnostics=tuple(diagnostics),
    )


def _split_points(text: str):
    depth = 0
    in_tag = False
    for i, ch in enumerate(text):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth = max(0, depth - 1)
        elif ch == "<":
            in_tag = True
        elif ch == ">":
            in_tag = False
        elif ch in ".!?" and depth == 0 and not in_tag:
            if i + 1 < len(text) and text[i + 1].isspace():
                yield i + 1


def split_sentences(think_text: str, lexicon: Lexicon | None = None) -> list[Sentence]:
    """Split on ., ! or ? followed by whitespace; bracketed text is never split."""
    lexicon = lexicon or default_lexicon()
    pieces, start = [], 0
    for cut in _split_points(think_text):
        pieces.append(think_text[start:cut])
        start = cut
    pieces.append(think_text[start:])
    out = []
    for piece in pieces:
        text = piece.strip()
        if text:
            s = Sentence(text=text, index=len(out))
            out.append(replace(s, kind=classify_trivial(s, lexicon)))
    return out


def classify_trivial(s: Sentence | str, lexicon: Lexicon | None = None) -> SentenceKind:
    """TRIVIAL needs both a trivial opener and no visual term anywhere."""
    lexicon = lexicon or default_lexicon()
    text = s.text if isinstance(s, Sentence) else s
    if lexicon.has_trivial_prefix(text) and not lexicon.has_visual_term(text):
        return SentenceKind.TRIVIAL
    return SentenceKind.VISUAL
