import pytest
from hypothesis import given, settings, strategies as st

from fgrpo.core import BBox
from fgrpo.parse import (
    Lexicon,
    Sentence,
    SentenceKind,
    Verdict,
    classify_trivial,
    load_lexicon,
    parse_response,
    read_terms,
    split_sentences,
)


def test_well_formed():
    r = parse_response("<think>A.</think><answer>B</answer>")
    assert r.format_ok and r.think_text == "A." and r.answer_text == "B"


@pytest.mark.parametrize(
    "raw",
    [
        "<answer>B</answer><think>A</think>",
        "<think>A</think>",
        "<think>A</think><think>A</think><answer>B</answer>",
        "A B",
        "<think>A</think>junk<answer>B</answer>",
    ],
)
def test_structural_violations(raw):
    assert not parse_response(raw).format_ok


def test_best_effort_extraction():
    r = parse_response("<answer>B</answer><think>A</think>")
    assert r.answer_text == "B" and r.think_text == "A"


def test_bbox_extraction():
    r = parse_response("<think>see <bbox>[1,2,3,4]</bbox></think><answer>x</answer>")
    assert r.bboxes == (BBox(1, 2, 3, 4),)


def test_bad_bbox_dropped_with_diagnostic():
    r = parse_response("<think>a <bbox>[1,2,x,4]</bbox> b <bbox>[3,3,1,1]</bbox> <bbox>[0,0,1,1]</bbox></think><answer>x</answer>")
    assert r.bboxes == (BBox(0, 0, 1, 1),)
    assert len(r.diagnostics) == 2 and r.format_ok


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_parse_is_total(raw):
    r = parse_response(raw)
    assert isinstance(r.format_ok, bool)


def test_split_examples():
    assert [s.text for s in split_sentences("The cat sits. It is black.")] == ["The cat sits.", "It is black."]
    assert split_sentences("") == []
    assert [s.text for s in split_sentences("Is it left? Yes.")] == ["Is it left?", "Yes."]


def test_split_ignores_bracketed_periods():
    text = "The box is <bbox>[1.5, 2. 3, 4]</bbox> here. Next."
    assert len(split_sentences(text)) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["The cat sits.", "Is it red?", "Wow!", "Let me see.", "x <bbox>[1. 2,3,4]</bbox> y."]), max_size=6))
def test_split_round_trip(parts):
    text = " ".join(parts)
    sentences = split_sentences(text)
    assert " ".join(s.text for s in sentences) == " ".join(text.split())
    assert [s.index for s in sentences] == list(range(len(sentences)))


def test_classify_examples():
    assert classify_trivial("Let me examine the options.") is SentenceKind.TRIVIAL
    assert classify_trivial("The red car is left of the tree.") is SentenceKind.VISUAL
    assert classify_trivial("Therefore the lamp <bbox>[0,0,5,5]</bbox> is closer.") is SentenceKind.VISUAL


@pytest.mark.parametrize("prefix", ["Let me", "Therefore", "Wait", "So,", "Now", "First", "Next", "Thus", "In conclusion"])
def test_default_prefixes(prefix):
    assert classify_trivial(f"{prefix} we proceed.") is SentenceKind.TRIVIAL


def test_prefix_needs_word_boundary():
    assert classify_trivial("Nowhere to proceed.") is SentenceKind.VISUAL


def test_sentence_verdict_rules():
    s = Sentence("The red car.", 0)
    scored = s.with_verdict(Verdict.CORRECT)
    with pytest.raises(ValueError):
        scored.with_verdict(Verdict.SKIP)
    with pytest.raises(ValueError):
        Sentence("Let me see.", 0, SentenceKind.TRIVIAL).with_verdict(Verdict.CORRECT)


def test_custom_lexicon(tmp_path):
    pre = tmp_path / "p.txt"
    pre.write_text("# openers\nHmm\n\n")
    vis = tmp_path / "v.txt"
    vis.write_text("zebra\n")
    assert read_terms(pre) == ("Hmm",)
    lex = load_lexicon(pre, vis)
    assert isinstance(lex, Lexicon)
    assert classify_trivial("Hmm okay.", lex) is SentenceKind.TRIVIAL
    assert classify_trivial("Hmm a zebra.", lex) is SentenceKind.VISUAL
    assert classify_trivial("Let me see.", lex) is SentenceKind.VISUAL
