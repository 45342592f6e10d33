"""Self-sampled variable-length CoT data: sampling, verification, curriculum datasets."""

from __future__ import annotations

import csv
import json
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .engine import Decode, TinyDecoder, Vocab, generate_batch
from .errors import EmptyStageError, InputError, SchemaError
from .steering import InterventionSpec, SteeringHook
from .task import SYSTEM1_PROMPT, SYSTEM2_PROMPT, TaskInstance, cued_prompt, extract_answer, neutral_prompt

SCHEMA_VERSION = 1
NUM_STAGES = 10
NUM_BINS = 10


@dataclass
class Variant:
    alpha: float
    text: str
    length: int
    len_r: float
    collapsed: bool
    answer: int | None
    kept: bool = False


@dataclass
class Baseline:
    text: str
    length: int
    answer: int | None
    collapsed: bool = False


@dataclass
class Verification:
    mode: str | None = None  # "answer" | "self-consistency"
    retained: bool = False
    consensus_answer: int | None = None
    baseline_kept: bool = False


@dataclass
class SampleRecord:
    instance_id: str
    question: str
    gold_answer: int | None
    baseline: Baseline
    variants: list[Variant]
    verification: Verification = field(default_factory=Verification)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported record schema {d.get('schema_version')}")
        return cls(
            instance_id=d["instance_id"],
            question=d["question"],
            gold_answer=d["gold_answer"],
            baseline=Baseline(**d["baseline"]),
            variants=[Variant(**v) for v in d["variants"]],
            verification=Verification(**d["verification"]),
        )


def write_records(path: str | Path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[SampleRecord]:
    with open(path, encoding="utf-8") as f:
        return [SampleRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def sample_variants(
    model: TinyDecoder,
    instances: Sequence[TaskInstance],
    spec_base: InterventionSpec,
    alphas: Sequence[float],
    decode: Decode = Decode(),
    *,
    vocab: Vocab,
    max_new: int = 96,
    keep_gold: bool = True,
    workers: int = 1,
) -> list[SampleRecord]:
    """One baseline (neutral prompt, no hook) plus one steered generation per alpha."""
    spec_base.validate(model.config.num_layers)
    prompts = [vocab.encode(neutral_prompt(t.question), bos=True) for t in instances]
    base = generate_batch(model, prompts, decode, max_new, vocab=vocab, workers=workers)
    per_alpha = []
    for a in alphas:
        hook = SteeringHook(spec_base.with_alpha(a), model.dtype)
        per_alpha.append(generate_batch(model, prompts, decode, max_new, hook, vocab=vocab, workers=workers))
    records = []
    for i, t in enumerate(instances):
        b = base[i]
        if b.length_tokens == 0:
            raise InputError(f"{t.id}: empty baseline generation")
        variants = [
            Variant(
                alpha=float(a),
                text=outs[i].text,
                length=outs[i].length_tokens,
                len_r=outs[i].length_tokens / b.length_tokens,
                collapsed=outs[i].collapsed,
                answer=extract_answer(outs[i].text),
            )
            for a, outs in zip(alphas, per_alpha)
        ]
        records.append(
            SampleRecord(
                instance_id=t.id,
                question=t.question,
                gold_answer=t.gold_answer if keep_gold else None,
                baseline=Baseline(b.text, b.length_tokens, extract_answer(b.text), b.collapsed),
                variants=variants,
            )
        )
    return records


def answer_verify(records: Sequence[SampleRecord]) -> list[SampleRecord]:
    """Keep variants whose extracted answer equals the gold answer; collapsed variants never count."""
    missing = [r.instance_id for r in records if r.gold_answer is None]
    if missing:
        raise InputError(f"answer verification needs gold answers; missing for {missing[0]} and {len(missing) - 1} more")
    out = []
    for r in records:
        vs = [replace(v, kept=(not v.collapsed and v.answer == r.gold_answer)) for v in r.variants]
        ver = Verification(
            mode="answer",
            retained=any(v.kept for v in vs),
            consensus_answer=r.gold_answer,
            baseline_kept=not r.baseline.collapsed and r.baseline.answer == r.gold_answer,
        )
        out.append(replace(r, variants=vs, verification=ver))
    return out


@dataclass
class ConsistencyStats:
    total: int
    retained: int
    correct: int | None

    @property
    def accuracy(self) -> float | None:
        if self.correct is None or self.retained == 0:
            return None
        return self.correct / self.retained

    def accuracy_percent(self) -> str:
        return format_percent(self.correct, self.retained)


def format_percent(num: int, den: int, places: int = 2) -> str:
    """``num/den`` as a percentage string, rounded half-up in exact decimal arithmetic."""
    from decimal import ROUND_HALF_UP, Decimal

    q = Decimal(100 * num) / Decimal(den)
    return f"{q.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)}%"


def self_consistency_filter(records: Sequence[SampleRecord], min_quorum: int = 2):
    """Retain a record iff the baseline and all non-collapsed variants agree on one answer."""
    out = []
    retained = correct = 0
    have_gold = all(r.gold_answer is not None for r in records)
    for r in records:
        quorum = ([r.baseline.answer] if not r.baseline.collapsed else []) + [
            v.answer for v in r.variants if not v.collapsed
        ]
        ok = len(quorum) >= min_quorum and all(a is not None for a in quorum) and len(set(quorum)) == 1
        consensus = quorum[0] if ok else None
        vs = [replace(v, kept=ok and not v.collapsed) for v in r.variants]
        ver = Verification("self-consistency", ok, consensus, ok and not r.baseline.collapsed)
        out.append(replace(r, variants=vs, verification=ver))
        if ok:
            retained += 1
            if have_gold and consensus == r.gold_answer:
                correct += 1
    return out, ConsistencyStats(len(records), retained, correct if have_gold else None)


def sampled_accuracy(records: Sequence[SampleRecord]) -> float:
    """Accuracy of every non-collapsed generation (baseline and variants) against gold."""
    hits = n = 0
    for r in records:
        gens = ([r.baseline] if not r.baseline.collapsed else []) + [v for v in r.variants if not v.collapsed]
        for g in gens:
            n += 1
            hits += g.answer == r.gold_answer
    return hits / n if n else 0.0


def retained_accuracy(records: Sequence[SampleRecord]) -> float:
    """Accuracy of the kept variants of retained records against gold."""
    hits = n = 0
    for r in records:
        if not r.verification.retained:
            continue
        for v in r.variants:
            if v.kept:
                n += 1
                hits += v.answer == r.gold_answer
    return hits / n if n else 0.0


# ---------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class DualPrompts:
    system1: str = SYSTEM1_PROMPT
    system2: str = SYSTEM2_PROMPT

    def render(self, kind: str, question: str) -> str:
        return cued_prompt(question, self.system1 if kind == "system1" else self.system2)


@dataclass
class SFTPair:
    prompt_kind: str
    input_text: str
    target_text: str
    len_r: float
    source_id: str

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SFTPair":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported dataset schema {d.get('schema_version')}")
        return cls(**{k: v for k, v in d.items() if k != "schema_version"})


@dataclass
class CurriculumStage:
    stage_index: int
    window: tuple[float, float]
    examples: list[SFTPair]
    bin_histogram: list[tuple[float, float, int]]

    def system1(self) -> list[SFTPair]:
        return [e for e in self.examples if e.prompt_kind == "system1"]


def stage_window(stage_index: int) -> tuple[float, float]:
    if not 0 <= stage_index < NUM_STAGES:
        raise InputError(f"stage_index must be in [0, {NUM_STAGES - 1}]")
    return ((NUM_BINS - 1 - stage_index) / NUM_BINS, 1.0)


def _bin(length: int, base: int) -> int:
    # exact integer binning of length/base into 0.1-wide bins; 1.0 falls in the top bin
    return min(NUM_BINS * length // base, NUM_BINS - 1)


def _eligible(r: SampleRecord, v: Variant, lo_bin: int) -> bool:
    b = r.baseline.length
    return v.kept and not v.collapsed and v.length <= b and NUM_BINS * v.length >= lo_bin * b


def round_robin(bins: Sequence[Sequence], budget: int) -> list:
    """Draw one item per non-empty bin in turn until ``budget`` or exhaustion."""
    queues = [list(b) for b in bins]
    out = []
    pos = [0] * len(queues)
    while len(out) < budget:
        progressed = False
        for i, q in enumerate(queues):
            if pos[i] < len(q) and len(out) < budget:
                out.append(q[pos[i]])
                pos[i] += 1
                progressed = True
        if not progressed:
            break
    return out


def _pairs_for(drawn, prompts: DualPrompts, system2_ratio: float) -> list[SFTPair]:
    n2 = round(system2_ratio * len(drawn))
    out = []
    for j, (r, v) in enumerate(drawn):
        out.append(SFTPair("system1", prompts.render("system1", r.question), v.text, v.len_r, r.instance_id))
        if j < n2 and r.verification.baseline_kept:
            out.append(SFTPair("system2", prompts.render("system2", r.question), r.baseline.text, 1.0, r.instance_id))
    return out


def build_curriculum_stage(
    records: Sequence[SampleRecord],
    stage_index: int,
    budget: int,
    seed: int = 0,
    prompts: DualPrompts = DualPrompts(),
    system2_ratio: float = 1.0,
) -> CurriculumStage:
    """Draw kept variants with Len-R in the stage window, spread evenly over 0.1-wide bins."""
    lo, hi = stage_window(stage_index)
    lo_bin = NUM_BINS - 1 - stage_index
    bins: list[list] = [[] for _ in range(stage_index + 1)]
    for r in records:
        if not r.verification.retained:
            continue
        for v in r.variants:
            if _eligible(r, v, lo_bin):
                bins[_bin(v.length, r.baseline.length) - lo_bin].append((r, v))
    if not any(bins):
        raise EmptyStageError(f"stage {stage_index}: no eligible variants with Len-R in [{lo}, {hi}]")
    rng = random.Random(seed)
    for b in bins:
        rng.shuffle(b)
    drawn = round_robin(bins, budget)
    hist = []
    for j in range(len(bins)):
        b_lo = (lo_bin + j) / NUM_BINS
        count = sum(1 for r, v in drawn if _bin(v.length, r.baseline.length) == lo_bin + j)
        hist.append((b_lo, (lo_bin + j + 1) / NUM_BINS, count))
    return CurriculumStage(stage_index, (lo, hi), _pairs_for(drawn, prompts, system2_ratio), hist)


def build_shortest_only_dataset(
    records: Sequence[SampleRecord],
    budget: int,
    seed: int = 0,
    prompts: DualPrompts = DualPrompts(),
    system2_ratio: float = 1.0,
) -> list[SFTPair]:
    """Per retained record, its minimum-Len-R kept variant (ties: smaller |alpha|)."""
    chosen = []
    for r in records:
        if not r.verification.retained:
            continue
        cands = [v for v in r.variants if v.kept and not v.collapsed]
        if not cands:
            continue
        best = min(cands, key=lambda v: (v.len_r, abs(v.alpha)))
        chosen.append((r, best))
    if not chosen:
        raise EmptyStageError("no retained records with kept variants")
    rng = random.Random(seed)
    rng.shuffle(chosen)
    return _pairs_for(chosen[:budget], prompts, system2_ratio)


def write_dataset(path: str | Path, pairs: Iterable[SFTPair]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> list[SFTPair]:
    with open(path, encoding="utf-8") as f:
        return [SFTPair.from_dict(json.loads(line)) for line in f if line.strip()]


def write_histogram(path: str | Path, stage: CurriculumStage) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, n in stage.bin_histogram:
            w.writerow([f"{lo:.1f}", f"{hi:.1f}", n])
