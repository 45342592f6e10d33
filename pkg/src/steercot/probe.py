"""Grid search over (block size, alpha) on a pilot set."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .directions import DirectionSet
from .engine import Decode, TinyDecoder, Vocab, generate_batch
from .errors import InputError, SchemaError
from .steering import InterventionSpec, steer_batch
from .task import TaskInstance, neutral_prompt

REFERENCE_BLOCKS = (1, 5, 10, 15)
REFERENCE_ALPHAS = (-0.1, -0.2, -0.3, -0.4, -0.5, -0.8, -1.0)
SCHEMA_VERSION = 1


@dataclass
class SweepCell:
    block_size: int
    alpha: float
    mean_len_r: float | None
    collapse_count: int
    sample_count: int
    all_collapsed: bool

    @property
    def collapse_frac(self) -> float:
        return self.collapse_count / self.sample_count


@dataclass
class SweepReport:
    grid: list[SweepCell]
    pilot_size: int
    anchor: int
    scope: str = "generated"
    recommendation: tuple[int, list[float]] | None = None

    def cells_for(self, block_size: int) -> list[SweepCell]:
        return [c for c in self.grid if c.block_size == block_size]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "pilot_size": self.pilot_size,
            "anchor": self.anchor,
            "scope": self.scope,
            "grid": [asdict(c) for c in self.grid],
            "recommendation": None
            if self.recommendation is None
            else {"block_size": self.recommendation[0], "alphas": list(self.recommendation[1])},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported sweep report schema {d.get('schema_version')}")
        rec = d["recommendation"]
        return cls(
            grid=[SweepCell(**c) for c in d["grid"]],
            pilot_size=d["pilot_size"],
            anchor=d["anchor"],
            scope=d.get("scope", "generated"),
            recommendation=None if rec is None else (rec["block_size"], list(rec["alphas"])),
        )


def run_sweep(
    model: TinyDecoder,
    directions: DirectionSet,
    anchor: int,
    pilot: Sequence[TaskInstance],
    ks: Sequence[int],
    alphas: Sequence[float],
    decode: Decode = Decode(),
    *,
    vocab: Vocab,
    max_new: int = 96,
    scope: str = "generated",
    workers: int = 1,
) -> SweepReport:
    if not pilot:
        raise InputError("pilot set is empty")
    if any(a == 0 for a in alphas):
        raise InputError("sweep alphas must be nonzero")
    L = model.config.num_layers
    if anchor < 1 or anchor + max(ks) > L + 1:
        raise InputError(f"anchor {anchor} + block {max(ks)} exceeds the model's {L} layers")
    prompts = [vocab.encode(neutral_prompt(t.question), bos=True) for t in pilot]
    baselines = generate_batch(model, prompts, decode, max_new, vocab=vocab)
    cells = [(k, a) for k in ks for a in alphas]

    def run(cell):
        k, a = cell
        spec = InterventionSpec(directions, anchor, k, a, scope)
        res = steer_batch(model, prompts, spec, decode, max_new, vocab=vocab, baselines=baselines)
        ok = [r.len_r for r in res if not r.collapsed]
        n_col = len(res) - len(ok)
        return SweepCell(k, a, sum(ok) / len(ok) if ok else None, n_col, len(res), n_col == len(res))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            grid = list(ex.map(run, cells))
    else:
        grid = [run(c) for c in cells]
    return SweepReport(grid, len(pilot), anchor, scope)


def recommend_setting(
    report: SweepReport, target_band: tuple[float, float] = (0.3, 0.9), max_collapse_frac: float = 0.1, min_alphas: int = 3
) -> tuple[int, list[float]] | None:
    """Smallest block size with >= ``min_alphas`` alphas whose cells are inside
    the Len-R band and under the collapse limit; alphas sorted by magnitude."""
    lo, hi = target_band
    for k in sorted({c.block_size for c in report.grid}):
        good = [
            c.alpha
            for c in report.cells_for(k)
            if c.mean_len_r is not None and lo <= c.mean_len_r <= hi and c.collapse_frac <= max_collapse_frac
        ]
        if len(good) >= min_alphas:
            return k, sorted(good, key=abs)
    return None


def write_sweep(path: str | Path, report: SweepReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_sweep(path: str | Path) -> SweepReport:
    return SweepReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_sweep_csv(path: str | Path, report: SweepReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["k", "alpha", "mean_len_r", "collapse_count"])
        for c in report.grid:
            w.writerow([c.block_size, c.alpha, "" if c.mean_len_r is None else c.mean_len_r, c.collapse_count])
