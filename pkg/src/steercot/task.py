"""Synthetic arithmetic chain-of-thought task with a long and a short solution style."""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .engine import Vocab
from .errors import InputError, SchemaError

SPLITS = ("train", "pilot", "validation", "test")

# A cue is a style phrase followed by a closing word from a pool shared by both
# styles. The last prompt token therefore differs between a long and a short
# prompt only lexically and at random; the style signal has to be gathered from
# the phrase by attention.
_LONG_PHRASES = (
    "think step by step", "explain every step", "show all your work", "reason in full detail",
    "walk through it slowly", "give a detailed derivation", "spell out the method", "be thorough",
)
_SHORT_PHRASES = (
    "be concise", "answer briefly", "just give the result", "keep it short",
    "no explanation needed", "be brief", "skip the details", "short answer only",
)
_NEUTRAL_PHRASES = ("solve this", "what is the value", "compute it", "find the answer", "work this out", "tell me")
CUE_CLOSERS = ("please", "now", "thanks", "here", "today", "ok")
LONG_CUES = tuple(f"{p} {c}" for p in _LONG_PHRASES for c in CUE_CLOSERS)
SHORT_CUES = tuple(f"{p} {c}" for p in _SHORT_PHRASES for c in CUE_CLOSERS)
# style-free instructions with the same layout as the cues; the model answers
# them in the long style
NEUTRAL_CUES = tuple(f"{p} {c}" for p in _NEUTRAL_PHRASES for c in CUE_CLOSERS)
SYSTEM1_PROMPT = "Answer directly and concisely."
SYSTEM2_PROMPT = "Think step by step in detail."

_TEMPLATE_WORDS = "directly we start with then add subtract so the result is Answer: + - = ? :".split()
_ANSWER_RE = re.compile(r"Answer:\s*(-?\d+)(?![\d.])")


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    gold_answer: int
    long_cot: str
    short_cot: str
    split: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        want = {"id", "question", "gold_answer", "long_cot", "short_cot", "split"}
        if set(d) != want:
            raise SchemaError(f"task instance fields {sorted(d)} != {sorted(want)}")
        if d["split"] not in SPLITS:
            raise SchemaError(f"unknown split {d['split']!r}")
        return cls(**d)


@dataclass(frozen=True)
class TaskConfig:
    min_operands: int = 2
    max_operands: int = 5
    max_operand: int = 9
    max_value: int = 40
    split_fractions: tuple[float, float, float, float] = (0.8, 0.07, 0.03, 0.1)

    @property
    def difficulty(self) -> tuple[int, int]:
        return (self.min_operands, self.max_operands)


def build_vocab(cfg: TaskConfig = TaskConfig(), extra_prompts: Iterable[str] = ()) -> Vocab:
    words = [str(i) for i in range(cfg.max_value + 1)]
    words += _TEMPLATE_WORDS + ["\n"]
    for text in (*LONG_CUES, *SHORT_CUES, *NEUTRAL_CUES, SYSTEM1_PROMPT, SYSTEM2_PROMPT, *extra_prompts):
        words += Vocab.split(text)
    return Vocab(words)


def evaluate_question(question: str) -> int:
    toks = question.split()
    if len(toks) < 3 or toks[-2:] != ["=", "?"]:
        raise InputError(f"malformed question {question!r}")
    expr = toks[:-2]
    value = int(expr[0])
    for op, num in zip(expr[1::2], expr[2::2]):
        value = value + int(num) if op == "+" else value - int(num)
    return value


def _expression(operands: Sequence[int], ops: Sequence[str]) -> str:
    return " ".join([str(operands[0])] + [f"{o} {x}" for o, x in zip(ops, operands[1:])])


def long_cot(operands: Sequence[int], ops: Sequence[str]) -> str:
    lines = [f"we start with {operands[0]}"]
    value = operands[0]
    for op, x in zip(ops, operands[1:]):
        new = value + x if op == "+" else value - x
        verb = "add" if op == "+" else "subtract"
        lines.append(f"then {verb} {x} : {value} {op} {x} = {new}")
        value = new
    lines.append(f"so the result is {value}")
    lines.append(f"Answer: {value}")
    return "\n".join(lines)


def short_cot(operands: Sequence[int], ops: Sequence[str]) -> str:
    expr = _expression(operands, ops)
    value = evaluate_question(expr + " = ?")
    # opens with a style word like the long form, so the style choice at the
    # first answer token carries no arithmetic content
    return f"directly : {expr} = {value}\nAnswer: {value}"


def _sample_problem(rng: random.Random, k: int, cfg: TaskConfig):
    operands = [rng.randint(1, cfg.max_operand)]
    ops = []
    value = operands[0]
    for _ in range(k - 1):
        choices = []
        for op in "+-":
            for x in range(1, cfg.max_operand + 1):
                nv = value + x if op == "+" else value - x
                if 0 <= nv <= cfg.max_value:
                    choices.append((op, x))
        op, x = rng.choice(choices)
        ops.append(op)
        operands.append(x)
        value = value + x if op == "+" else value - x
    return operands, ops


def gen_corpus(count: int, difficulty: tuple[int, int] | None = None, seed: int = 0, cfg: TaskConfig = TaskConfig()):
    """``count`` unique problems, split by ``cfg.split_fractions``; deterministic in ``seed``."""
    if count < 1:
        raise InputError("count must be >= 1")
    lo, hi = difficulty if difficulty is not None else cfg.difficulty
    if lo > hi or lo < 2:
        raise InputError(f"empty or invalid operand-count range ({lo}, {hi})")
    rng = random.Random(seed)
    seen: set[str] = set()
    problems = []
    attempts = 0
    while len(problems) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise InputError(f"cannot draw {count} distinct problems from range ({lo}, {hi})")
        operands, ops = _sample_problem(rng, rng.randint(lo, hi), cfg)
        q = " ".join([str(operands[0])] + [f"{o} {x}" for o, x in zip(ops, operands[1:])]) + " = ?"
        if q in seen:
            continue
        seen.add(q)
        problems.append((q, operands, ops))
    # split assignment: largest-remainder counts, then a seeded shuffle
    fr = cfg.split_fractions
    sizes = [int(count * f) for f in fr]
    rest = sorted(range(4), key=lambda i: -(count * fr[i] - sizes[i]))
    for i in rest[: count - sum(sizes)]:
        sizes[i] += 1
    labels = [s for s, n in zip(SPLITS, sizes) for _ in range(n)]
    rng.shuffle(labels)
    out = []
    for i, ((q, operands, ops), split) in enumerate(zip(problems, labels)):
        gold = evaluate_question(q)
        inst = TaskInstance(f"q{seed}-{i:05d}", q, gold, long_cot(operands, ops), short_cot(operands, ops), split)
        if extract_answer(inst.long_cot) != gold or extract_answer(inst.short_cot) != gold:
            raise AssertionError(f"generator self-check failed for {q}")
        out.append(inst)
    return out


def by_split(instances: Iterable[TaskInstance], split: str) -> list[TaskInstance]:
    return [t for t in instances if t.split == split]


def extract_answer(response: str) -> int | None:
    """Integer after the last ``Answer:`` marker, or None."""
    matches = _ANSWER_RE.findall(" ".join(response.split()))
    return int(matches[-1]) if matches else None


def neutral_prompt(question: str, cue: str = NEUTRAL_CUES[0]) -> str:
    return cued_prompt(question, cue)


def cued_prompt(question: str, cue: str) -> str:
    return f"{question} {cue}"


def write_corpus(path: str | Path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in instances:
            f.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[TaskInstance]:
    with open(path, encoding="utf-8") as f:
        return [TaskInstance.from_dict(json.loads(line)) for line in f if line.strip()]
