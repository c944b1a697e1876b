import json

import pytest
from hypothesis import given, settings, strategies as st

from dalm.audio.encoder import EncoderConfig, SpeechEncoder
from dalm.data import world
from dalm.data.metadata import toy_corpus
from dalm.decoder import make_schedule
from dalm.errors import InvalidInputError
from dalm.evaluation import (
    EXTRACTION_RULES_VERSION,
    BenchmarkItem,
    EvalReport,
    ItemResult,
    evaluate,
    extract_answer,
    first_token_constraint,
    format_mc_prompt,
    make_benchmark,
    write_report,
)
from dalm.model import build
from dalm.pipeline import synthesize

from conftest import tiny_config

CHOICES = ["deep", "low", "high", "shrill"]


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("B", 1),
        ("The answer is C.", 2),
        ("(D)", 3),
        ("A", 0),
        ("E", None),  # not a valid option letter, no text match
        ("high", 2),
        ("shrill voice", 3),
        ("it is shril", 3),  # 5 of 6 characters
        ("deep low", None),  # two full matches tie
        ("", None),
        ("zzz", None),
        ("I think E, no B", 1),  # first valid letter wins
    ],
)
def test_extraction_rules(raw, expected):
    assert extract_answer(raw, CHOICES) == expected


def test_lowercase_letters_are_not_answers():
    assert extract_answer("a", ["x1", "y2"]) is None


def test_short_choices_need_full_match():
    assert extract_answer("2", ["1", "2", "3", "4"]) == 1
    assert extract_answer("23", ["1", "2", "3", "4"]) is None


@settings(max_examples=100, deadline=None)
@given(idx=st.integers(0, 3))
def test_option_text_round_trips(idx):
    assert extract_answer(CHOICES[idx], CHOICES) == idx
    assert extract_answer("ABCD"[idx], CHOICES) == idx


def test_item_validation_and_json():
    item = BenchmarkItem("a.wav", "q?", CHOICES, 2, "perception", "id1")
    assert BenchmarkItem.from_json(json.loads(json.dumps(item.to_json()))) == item
    with pytest.raises(InvalidInputError):
        BenchmarkItem("a.wav", "q?", ["x"], 0, "c")
    with pytest.raises(InvalidInputError):
        BenchmarkItem("a.wav", "q?", CHOICES, 4, "c")
    with pytest.raises(InvalidInputError):
        BenchmarkItem("a.wav", "q?", [str(i) for i in range(9)], 0, "c")


def test_prompt_format():
    item = BenchmarkItem("a.wav", "What is the pitch of the voice?", CHOICES, 0, "c")
    assert format_mc_prompt(item).split("\n") == [
        "What is the pitch of the voice?", "A. deep", "B. low", "C. high", "D. shrill", world.MC_INSTRUCTION,
    ]


def test_first_token_constraints(tok):
    item = BenchmarkItem("a.wav", "q?", CHOICES, 0, "c")
    assert first_token_constraint(tok, item, "none") == {}
    assert first_token_constraint(tok, item, "letter") == {0: [tok.token_id(x) for x in "ABCD"]}
    assert first_token_constraint(tok, item, "option") == {0: sorted(tok.token_id(c) for c in CHOICES)}
    with pytest.raises(InvalidInputError):
        first_token_constraint(tok, item, "free")


def record(cat, outcome, error=""):
    pred = {"correct": 0, "incorrect": 1, "abstain": None}[outcome]
    return ItemResult("i", cat, pred, 0, outcome == "correct", "", outcome, error)


def test_report_aggregates():
    rep = EvalReport([record("a", "correct"), record("a", "incorrect"), record("b", "abstain"),
                      record("b", "correct"), record("b", "incorrect", error="missing")])
    assert rep.categories == {"a": (1, 2), "b": (1, 3)}
    assert rep.overall == pytest.approx(2 / 5)
    counts = rep.counts()
    assert counts == {"correct": 2, "incorrect": 2, "abstain": 1, "skipped": 1, "total": 5}
    assert counts["correct"] + counts["incorrect"] + counts["abstain"] == counts["total"]
    table = rep.table().splitlines()
    assert table[-1].split() == ["Overall", "5", "40.00"]
    data = rep.to_json()
    assert data["extraction_rules_version"] == EXTRACTION_RULES_VERSION and len(data["records"]) == 5


@settings(max_examples=50, deadline=None)
@given(outcomes=st.lists(st.tuples(st.sampled_from("xyz"), st.sampled_from(["correct", "incorrect", "abstain"])),
                         min_size=1, max_size=40))
def test_category_breakdown_matches_records(outcomes):
    rep = EvalReport([record(c, o) for c, o in outcomes])
    for cat, (c, n) in rep.categories.items():
        rows = [r for r in rep.records if r.category == cat]
        assert n == len(rows) and c == sum(r.correct for r in rows)
    assert sum(c for c, _ in rep.categories.values()) / len(rep.records) == rep.overall
    counts = rep.counts()
    assert counts["correct"] + counts["incorrect"] + counts["abstain"] == counts["total"] == len(outcomes)


def test_benchmark_generation_is_seeded_and_valid(tmp_path):
    metas = toy_corpus(60, 1)
    entries = [(f"u{i}.wav", m) for i, m in enumerate(metas)]
    items = make_benchmark(entries, seed=3)
    assert items == make_benchmark(entries, seed=3)
    for item, (_, meta) in zip(items, entries):
        kind = item.item_id.rsplit("-", 1)[1]
        assert len(item.choices) == 4 and len(set(item.choices)) == 4
        answer = item.choices[item.answer_index]
        if kind == "word":
            assert answer == meta.words[0] and sum(c in meta.words for c in item.choices) == 1
        elif kind == "word_count":
            assert answer == str(len(meta.words))
        else:
            assert answer == meta.display(kind)
        assert item.category == world.QUESTION_TEMPLATES[kind][0]
    assert {i.category for i in items} == {c for c, _ in world.QUESTION_TEMPLATES.values()}
    positions = [i.answer_index for i in items]
    assert len(set(positions)) == 4


@pytest.fixture(scope="module")
def small_setup(tmp_path_factory, tok):
    work = tmp_path_factory.mktemp("evalset")
    entries = synthesize(toy_corpus(12, 5), work, seed=6)
    items = make_benchmark(entries, seed=7)
    encoder = SpeechEncoder(EncoderConfig(dim=8, layers=1, seed=2))
    model = build(tiny_config(vocab=tok.spec, max_positions=256), seed=0)
    return model, encoder, items


def test_evaluate_untrained_model(small_setup, tok):
    model, encoder, items = small_setup
    rep = evaluate(model, encoder, items, make_schedule(4, 4, 4), tok, batch_size=5)
    assert len(rep.records) == len(items)
    counts = rep.counts()
    assert counts["abstain"] + counts["correct"] + counts["incorrect"] == len(items)
    # the option constraint makes every output start with an option's first token
    for r, item in zip(rep.records, items):
        first = r.raw_output.split()[0] if r.raw_output else ""
        assert any(c.startswith(first) for c in item.choices)
    again = evaluate(model, encoder, items, make_schedule(4, 4, 4), tok, batch_size=12)
    assert [r.raw_output for r in again.records] == [r.raw_output for r in rep.records]


def test_unreadable_audio_scored_incorrect(small_setup, tok, tmp_path):
    model, encoder, items = small_setup
    broken = BenchmarkItem(str(tmp_path / "gone.wav"), "q?", CHOICES, 0, "c", "gone")
    rep = evaluate(model, encoder, [broken] + items[:2], make_schedule(4, 4, 4), tok)
    assert rep.records[0].outcome == "incorrect" and rep.records[0].error
    assert rep.counts()["skipped"] == 1 and rep.counts()["total"] == 3
    write_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["counts"]["skipped"] == 1


def test_unknown_constraint_mode(small_setup, tok):
    model, encoder, items = small_setup
    with pytest.raises(InvalidInputError):
        evaluate(model, encoder, items, make_schedule(4, 4, 4), tok, constraint="bogus")
