from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steercot.directions import DirectionSet
from steercot.engine import Decode, ModelConfig, TinyDecoder
from steercot.errors import EmptyStageError, InputError, SchemaError
from steercot.factory import (
    Baseline,
    ConsistencyStats,
    DualPrompts,
    SampleRecord,
    SFTPair,
    Variant,
    answer_verify,
    build_curriculum_stage,
    build_shortest_only_dataset,
    format_percent,
    read_dataset,
    read_records,
    retained_accuracy,
    round_robin,
    sample_variants,
    sampled_accuracy,
    self_consistency_filter,
    stage_window,
    write_dataset,
    write_histogram,
    write_records,
)
from steercot.steering import InterventionSpec
from steercot.task import TaskConfig, build_vocab, gen_corpus


def rec(rid, base_len, variants, base_ans=5, gold=5, base_collapsed=False, question="1 + 4 = ?"):
    vs = [Variant(a, f"v{a}", n, n / base_len, col, ans) for a, n, ans, col in variants]
    return SampleRecord(rid, question, gold, Baseline("base", base_len, base_ans, base_collapsed), vs)


def test_published_consistency_percentages():
    assert ConsistencyStats(5655, 5655, 5648).accuracy_percent() == "99.88%"
    assert ConsistencyStats(517, 517, 516).accuracy_percent() == "99.81%"
    assert format_percent(1, 8, 2) == "12.50%"
    assert format_percent(1, 800, 2) == "0.13%"  # 0.125 rounds half-up
    assert format_percent(2, 3, 1) == "66.7%"


def test_self_consistency_rules():
    records = [
        rec("agree", 10, [(-0.1, 8, 5, False), (-0.3, 5, 5, False)]),
        rec("disagree", 10, [(-0.1, 8, 5, False), (-0.3, 5, 6, False)]),
        rec("collapsed-ignored", 10, [(-0.1, 8, 5, False), (-0.3, 40, 9, True)]),
        rec("no-answer", 10, [(-0.1, 8, None, False)]),
        rec("quorum-too-small", 10, [(-0.1, 8, 9, True)], base_ans=5),
        rec("wrong-but-consistent", 10, [(-0.1, 8, 7, False)], base_ans=7),
        rec("baseline-collapsed", 10, [(-0.1, 8, 5, False), (-0.3, 6, 5, False)], base_collapsed=True),
    ]
    out, stats = self_consistency_filter(records)
    kept = {r.instance_id: r.verification for r in out}
    assert [k for k, v in kept.items() if v.retained] == ["agree", "collapsed-ignored", "wrong-but-consistent", "baseline-collapsed"]
    assert kept["baseline-collapsed"].baseline_kept is False
    assert kept["agree"].baseline_kept and kept["agree"].consensus_answer == 5
    col = next(r for r in out if r.instance_id == "collapsed-ignored")
    assert [v.kept for v in col.variants] == [True, False]
    assert stats == ConsistencyStats(7, 4, 3)
    assert out[0].verification.mode == "self-consistency"


def test_answer_verify_rules():
    records = [
        rec("a", 10, [(-0.1, 8, 5, False), (-0.3, 5, 4, False), (-0.5, 3, 5, True)]),
        rec("b", 10, [(-0.1, 8, 4, False)], base_ans=4),
    ]
    out = answer_verify(records)
    assert [v.kept for v in out[0].variants] == [True, False, False]
    assert out[0].verification.retained and out[0].verification.baseline_kept
    assert not out[1].verification.retained and not out[1].verification.baseline_kept
    bad = [rec("c", 10, [(-0.1, 8, 5, False)], gold=None)]
    with pytest.raises(InputError):
        answer_verify(bad)


def test_sampled_and_retained_accuracy():
    out, _ = self_consistency_filter([
        rec("a", 10, [(-0.1, 8, 5, False)]),
        rec("b", 10, [(-0.1, 8, 7, False)], base_ans=7),
        rec("c", 10, [(-0.1, 8, 6, False)]),
    ])
    # generations: a 2/2 right, b 0/2, c 1/2 -> 3/6; retained kept variants: a right, b wrong
    assert sampled_accuracy(out) == 0.5
    assert retained_accuracy(out) == 0.5


def test_stage_windows():
    assert stage_window(0) == (0.9, 1.0)
    assert stage_window(9) == (0.0, 1.0)
    assert stage_window(4) == (0.5, 1.0)
    with pytest.raises(InputError):
        stage_window(10)


def _verified(records):
    return self_consistency_filter(records)[0]


def test_stage_bins_are_exact_at_boundaries():
    records = _verified([
        rec("r0", 10, [(-0.1, 9, 5, False), (-0.3, 8, 5, False), (-0.5, 10, 5, False)]),
        rec("r1", 10, [(-0.1, 12, 5, False)]),  # len_r > 1 is never eligible
    ])
    s0 = build_curriculum_stage(records, 0, 10)
    assert sorted(p.len_r for p in s0.system1()) == [0.9, 1.0]
    assert s0.bin_histogram == [(0.9, 1.0, 2)]
    s1 = build_curriculum_stage(records, 1, 10)
    assert [h[2] for h in s1.bin_histogram] == [1, 2]


def _simulate_round_robin(bins, budget):
    out = []
    bins = [list(b) for b in bins]
    while len(out) < budget and any(bins):
        for b in bins:
            if b and len(out) < budget:
                out.append(b.pop(0))
    return out


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(), max_size=6), max_size=6), st.integers(0, 40))
def test_round_robin_matches_simulation(bins, budget):
    assert round_robin(bins, budget) == _simulate_round_robin(bins, budget)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 30), st.lists(st.integers(0, 35), min_size=1, max_size=3)), min_size=1, max_size=12), st.integers(0, 9), st.integers(1, 30))
def test_stage_draws_respect_window_and_budget(rows, stage, budget):
    records = _verified([rec(f"r{i}", b, [(-0.1 * (j + 1), n, 5, False) for j, n in enumerate(ns)]) for i, (b, ns) in enumerate(rows)])
    lo, hi = stage_window(stage)
    try:
        s = build_curriculum_stage(records, stage, budget)
    except EmptyStageError:
        assert not any(lo <= v.len_r <= hi and v.length <= r.baseline.length for r in records for v in r.variants)
        return
    s1 = s.system1()
    assert 1 <= len(s1) <= budget
    assert all(lo - 1e-12 <= p.len_r <= hi for p in s1)
    assert sum(h[2] for h in s.bin_histogram) == len(s1)
    # per-bin counts equal a round-robin simulation over the available items
    lo_bin = 9 - stage
    avail = [0] * (stage + 1)
    for r in records:
        for v in r.variants:
            if v.kept and v.length <= r.baseline.length and 10 * v.length >= lo_bin * r.baseline.length:
                avail[min(10 * v.length // r.baseline.length, 9) - lo_bin] += 1
    sim = _simulate_round_robin([[j] * n for j, n in enumerate(avail)], budget)
    assert [h[2] for h in s.bin_histogram] == [sim.count(j) for j in range(stage + 1)]


def test_stage_is_seeded():
    records = _verified([rec(f"r{i}", 10, [(-0.1, 10 - i % 4, 5, False), (-0.3, 6, 5, False)]) for i in range(20)])
    a = build_curriculum_stage(records, 5, 8, seed=1)
    assert a == build_curriculum_stage(records, 5, 8, seed=1)
    assert a != build_curriculum_stage(records, 5, 8, seed=2)


def test_system2_pairs_only_when_baseline_kept():
    records = _verified([
        rec("kept", 10, [(-0.1, 8, 5, False), (-0.3, 6, 5, False)]),
        rec("base-collapsed", 10, [(-0.1, 8, 5, False), (-0.3, 7, 5, False)], base_collapsed=True),
    ])
    s = build_curriculum_stage(records, 9, 10)
    sys2 = [p for p in s.examples if p.prompt_kind == "system2"]
    assert {p.source_id for p in sys2} == {"kept"}
    assert all(p.target_text == "base" and p.len_r == 1.0 for p in sys2)
    assert all(p.input_text.endswith(DualPrompts().system2) for p in sys2)
    none = build_curriculum_stage(records, 9, 10, system2_ratio=0.0)
    assert all(p.prompt_kind == "system1" for p in none.examples)


def test_empty_stage():
    records = _verified([rec("r", 10, [(-0.1, 5, 5, False), (-0.3, 4, 5, False)])])
    with pytest.raises(EmptyStageError):
        build_curriculum_stage(records, 0, 5)


def test_shortest_only_tie_break():
    records = _verified([
        rec("r", 10, [(-0.5, 6, 5, False), (-0.3, 6, 5, False), (-0.1, 9, 5, False)]),
    ])
    pairs = build_shortest_only_dataset(records, 5, system2_ratio=0.0)
    assert len(pairs) == 1 and pairs[0].target_text == "v-0.3"
    with pytest.raises(EmptyStageError):
        build_shortest_only_dataset(_verified([rec("x", 10, [(-0.1, 9, 6, False)])]), 5)


def test_record_and_dataset_files(tmp_path):
    records = _verified([rec("r", 10, [(-0.1, 8, 5, False)])])
    write_records(tmp_path / "r.jsonl", records)
    assert read_records(tmp_path / "r.jsonl") == records
    s = build_curriculum_stage(records, 2, 4)
    write_dataset(tmp_path / "d.jsonl", s.examples)
    assert read_dataset(tmp_path / "d.jsonl") == s.examples
    write_histogram(tmp_path / "h.csv", s)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_low,bin_high,count"
    with pytest.raises(SchemaError):
        SFTPair.from_dict({"schema_version": 9})


def test_sample_variants_shapes():
    cfg = TaskConfig(2, 3, 9, 30)
    vocab = build_vocab(cfg)
    model = TinyDecoder(ModelConfig(num_layers=3, model_dim=8, num_heads=2, vocab_size=len(vocab), max_context=64, seed=0))
    ds = DirectionSet(np.zeros((4, 1, 8)), np.random.default_rng(0).normal(size=(4, 8)))
    inst = gen_corpus(6, seed=0, cfg=cfg)
    records = sample_variants(model, inst, InterventionSpec(ds, 1, 2, -1.0), [-0.5, -1.0], Decode(), vocab=vocab, max_new=6)
    assert len(records) == 6
    for r, t in zip(records, inst):
        assert r.gold_answer == t.gold_answer and [v.alpha for v in r.variants] == [-0.5, -1.0]
        for v in r.variants:
            assert v.len_r == v.length / r.baseline.length
    hidden = sample_variants(model, inst[:1], InterventionSpec(ds, 1, 2, -1.0), [-0.5], vocab=vocab, max_new=6, keep_gold=False)
    assert hidden[0].gold_answer is None
