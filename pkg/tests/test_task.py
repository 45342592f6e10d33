from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steercot.errors import InputError, SchemaError
from steercot.task import (
    SPLITS,
    TaskConfig,
    TaskInstance,
    build_vocab,
    by_split,
    cued_prompt,
    evaluate_question,
    extract_answer,
    gen_corpus,
    long_cot,
    read_corpus,
    short_cot,
    write_corpus,
)


@pytest.mark.parametrize(
    "text,expected",
    [
        ("...so 5+7=12. Answer: 12", 12),
        ("no marker here", None),
        ("Answer: 3 then more Answer: -4", -4),
        ("Answer:\n 7", 7),
        ("Answer: 2.5", None),
    ],
)
def test_extract_answer(text, expected):
    assert extract_answer(text) == expected


def test_cot_formats():
    assert long_cot([3, 4, 2], ["+", "-"]) == (
        "we start with 3\nthen add 4 : 3 + 4 = 7\nthen subtract 2 : 7 - 2 = 5\nso the result is 5\nAnswer: 5"
    )
    assert short_cot([3, 4, 2], ["+", "-"]) == "directly : 3 + 4 - 2 = 5\nAnswer: 5"
    assert evaluate_question("3 + 4 - 2 = ?") == 5
    with pytest.raises(InputError):
        evaluate_question("3 + 4")


def test_corpus_invariants():
    cfg = TaskConfig()
    corpus = gen_corpus(500, seed=4, cfg=cfg)
    assert len(corpus) == 500
    vocab = build_vocab(cfg)
    for t in corpus:
        assert extract_answer(t.long_cot) == t.gold_answer == extract_answer(t.short_cot)
        assert evaluate_question(t.question) == t.gold_answer
        assert len(vocab.encode(t.long_cot)) > len(vocab.encode(t.short_cot))
        vocab.encode(cued_prompt(t.question, "think step by step"))
    ids = {s: {t.id for t in by_split(corpus, s)} for s in SPLITS}
    questions = {s: {t.question for t in by_split(corpus, s)} for s in SPLITS}
    assert sum(len(v) for v in ids.values()) == 500
    for a in SPLITS:
        for b in SPLITS:
            if a < b:
                assert not ids[a] & ids[b] and not questions[a] & questions[b]
    assert [len(ids[s]) for s in SPLITS] == [400, 35, 15, 50]


def test_corpus_is_deterministic_and_seed_sensitive():
    assert gen_corpus(50, seed=1) == gen_corpus(50, seed=1)
    assert gen_corpus(50, seed=1) != gen_corpus(50, seed=2)


def test_corpus_errors():
    with pytest.raises(InputError):
        gen_corpus(0)
    with pytest.raises(InputError):
        gen_corpus(10, difficulty=(4, 3))
    with pytest.raises(InputError):
        gen_corpus(2000, difficulty=(2, 2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=5), st.data())
def test_long_and_short_agree(operands, data):
    ops = data.draw(st.lists(st.sampled_from("+-"), min_size=len(operands) - 1, max_size=len(operands) - 1))
    assert extract_answer(long_cot(operands, ops)) == extract_answer(short_cot(operands, ops))


def test_corpus_file_roundtrip(tmp_path):
    corpus = gen_corpus(20, seed=0)
    write_corpus(tmp_path / "c.jsonl", corpus)
    assert read_corpus(tmp_path / "c.jsonl") == corpus
    row = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "question", "gold_answer", "long_cot", "short_cot", "split"}
    row["extra"] = 1
    with pytest.raises(SchemaError):
        TaskInstance.from_dict(row)
