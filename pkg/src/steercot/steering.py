"""Additive interventions ``h <- h + alpha * d^(l)`` on a contiguous block of layers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .directions import DirectionSet
from .engine import Decode, GenerationOutput, TinyDecoder, Vocab, detect_collapse, generate_batch
from .errors import InputError, UndefinedMetricError
from .task import extract_answer

__all__ = [
    "InterventionSpec",
    "SteeringHook",
    "SteeredResult",
    "detect_collapse",
    "len_ratio",
    "steered_generate",
    "steer_batch",
]

SCOPES = ("generated", "all")


@dataclass(frozen=True)
class InterventionSpec:
    directions: DirectionSet
    anchor: int
    block_size: int
    alpha: float
    scope: str = "generated"

    @property
    def layers(self) -> range:
        return range(self.anchor, self.anchor + self.block_size)

    def with_alpha(self, alpha: float) -> "InterventionSpec":
        return InterventionSpec(self.directions, self.anchor, self.block_size, alpha, self.scope)

    def validate(self, num_layers: int) -> None:
        if self.anchor < 1 or self.block_size < 1:
            raise InputError("anchor and block_size must be >= 1")
        if self.anchor + self.block_size > num_layers + 1:
            raise InputError(
                f"block [{self.anchor}, {self.anchor + self.block_size}) exceeds the {num_layers} editable layers"
            )
        if not math.isfinite(self.alpha):
            raise InputError("alpha must be finite")
        if self.scope not in SCOPES:
            raise InputError(f"scope must be one of {SCOPES}")
        if self.directions.num_layers < self.anchor + self.block_size - 1:
            raise InputError("direction set has fewer layers than the block needs")


class SteeringHook:
    def __init__(self, spec: InterventionSpec, dtype=torch.float32):
        self.layers = frozenset(spec.layers)
        self.scope = spec.scope
        # alpha * d in float64, then cast once: alpha == 0 gives exact zeros
        self._shift = {
            layer: torch.as_tensor(spec.alpha * spec.directions.layer(layer), dtype=torch.float64).to(dtype)
            for layer in spec.layers
        }

    def __call__(self, layer: int, h: torch.Tensor) -> torch.Tensor:
        return h + self._shift[layer]


@dataclass
class SteeredResult:
    baseline: GenerationOutput
    steered: GenerationOutput
    len_r: float
    collapsed: bool


def len_ratio(steered_len: int, baseline_len: int) -> float:
    if baseline_len <= 0:
        raise UndefinedMetricError("baseline output is empty; Len-R is undefined")
    return steered_len / baseline_len


def steer_batch(
    model: TinyDecoder,
    prompts: Sequence[Sequence[int]],
    spec: InterventionSpec,
    decode: Decode = Decode(),
    max_new: int = 96,
    *,
    vocab: Vocab | None = None,
    baselines: Sequence[GenerationOutput] | None = None,
    workers: int = 1,
) -> list[SteeredResult]:
    """Baseline (no hook) and steered runs with identical decode settings."""
    spec.validate(model.config.num_layers)
    if baselines is None:
        baselines = generate_batch(model, prompts, decode, max_new, vocab=vocab, workers=workers)
    hook = SteeringHook(spec, model.dtype)
    steered = generate_batch(model, prompts, decode, max_new, hook, vocab=vocab, workers=workers)
    return [SteeredResult(b, s, len_ratio(s.length_tokens, b.length_tokens), s.collapsed) for b, s in zip(baselines, steered)]


def steered_generate(
    model: TinyDecoder, prompt: Sequence[int], spec: InterventionSpec, decode: Decode = Decode(), max_new: int = 96, **kw
) -> SteeredResult:
    return steer_batch(model, [prompt], spec, decode, max_new, **kw)[0]


def write_steering_log(path: str | Path, rows: Sequence[tuple[str, InterventionSpec, SteeredResult]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for instance_id, spec, res in rows:
            f.write(
                json.dumps(
                    {
                        "schema_version": 1,
                        "instance_id": instance_id,
                        "alpha": spec.alpha,
                        "block": [spec.anchor, spec.anchor + spec.block_size],
                        "len_r": res.len_r,
                        "collapsed": res.collapsed,
                        "baseline_len": res.baseline.length_tokens,
                        "steered_len": res.steered.length_tokens,
                        "answer_extracted": extract_answer(res.steered.text),
                    }
                )
                + "\n"
            )
