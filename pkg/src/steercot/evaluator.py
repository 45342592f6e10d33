"""Accuracy, mean generated length, and the accuracy-efficiency score (AES)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .engine import Decode, TinyDecoder, Vocab, generate_batch
from .errors import InputError, SchemaError, UndefinedMetricError
from .seeding import derive_seed
from .task import TaskInstance, extract_answer, neutral_prompt

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AesParams:
    omega: float = 1.0
    beta: float = 5.0
    gamma: float = 10.0


@dataclass
class EvalReport:
    dataset_id: str
    n_items: int
    accuracy: float
    mean_length: float
    per_item: list[dict] = field(default_factory=list)
    repeats: int = 1

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported report schema {d.get('schema_version')}")
        return cls(**{k: v for k, v in d.items() if k != "schema_version"})


def evaluate(
    model: TinyDecoder,
    dataset: Sequence[TaskInstance],
    decode: Decode = Decode(),
    repeats: int = 3,
    *,
    vocab: Vocab,
    adapters=None,
    prompt: Callable[[str], str] = neutral_prompt,
    max_new: int = 96,
    dataset_id: str = "eval",
    workers: int = 1,
) -> EvalReport:
    """Correctness by extracted answer; lengths count generated tokens only.

    Repeat ``r`` decodes with a seed derived from ``decode.seed`` and ``r``.
    """
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    if not dataset:
        raise InputError("empty evaluation dataset")
    prompts = [vocab.encode(prompt(t.question), bos=True) for t in dataset]
    runs = []
    for r in range(repeats):
        dec = decode.with_seed(derive_seed(decode.seed, "eval-repeat", r))
        runs.append(generate_batch(model, prompts, dec, max_new, vocab=vocab, adapters=adapters, workers=workers))
    per_item = []
    hits = total_len = 0
    for i, t in enumerate(dataset):
        correct = [extract_answer(run[i].text) == t.gold_answer for run in runs]
        lengths = [run[i].length_tokens for run in runs]
        hits += sum(correct)
        total_len += sum(lengths)
        per_item.append({"id": t.id, "correct": correct, "lengths": lengths})
    n = len(dataset) * repeats
    return EvalReport(dataset_id, len(dataset), hits / n, total_len / n, per_item, repeats)


def aes_values(base_acc: float, base_len: float, acc: float, length: float, p: AesParams = AesParams()) -> float:
    if base_len <= 0 or base_acc <= 0:
        raise UndefinedMetricError("AES needs a positive baseline accuracy and length")
    d_len = (base_len - length) / base_len
    d_acc = (acc - base_acc) / base_acc
    if d_acc >= 0:
        return p.omega * d_len + p.beta * abs(d_acc)
    return p.omega * d_len - p.gamma * abs(d_acc)


def aes(base: EvalReport, method: EvalReport, p: AesParams = AesParams()) -> float:
    """Relative length reduction plus asymmetric reward/penalty on relative accuracy change."""
    return aes_values(base.accuracy, base.mean_length, method.accuracy, method.mean_length, p)


def write_report(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_comparison_csv(path: str | Path, base: EvalReport, rows: dict[str, EvalReport], p: AesParams = AesParams()):
    """One row per method: accuracy, length and AES against ``base`` (blank for the base row)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "dataset", "accuracy", "length", "aes"])
        w.writerow(["standard", base.dataset_id, f"{base.accuracy:.4f}", f"{base.mean_length:.2f}", ""])
        for name, rep in rows.items():
            w.writerow([name, rep.dataset_id, f"{rep.accuracy:.4f}", f"{rep.mean_length:.2f}", f"{aes(base, rep, p):.4f}"])
