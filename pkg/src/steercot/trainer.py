"""Style pretraining, low-rank adapters, and curriculum fine-tuning with checkpoint selection."""

from __future__ import annotations

import copy
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .engine import Decode, TinyDecoder, Vocab, forward, generate_batch, loss, sft_example
from .errors import DivergenceError, EmptyStageError, InputError, SchemaError
from .evaluator import AesParams, EvalReport, aes, evaluate
from .factory import CurriculumStage, DualPrompts, SampleRecord, SFTPair, build_curriculum_stage, NUM_STAGES
from .seeding import derive_seed
from .task import LONG_CUES, NEUTRAL_CUES, SHORT_CUES, TaskInstance, cued_prompt, extract_answer, neutral_prompt
from .tensorio import read_tensor_file, write_tensor_file


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 64
    steps_per_stage: int = 100
    seed: int = 0
    optimizer: str = "adam"  # adam | sgd
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    schedule: str = "constant"  # constant | cosine
    eval_every: int = 25

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps_per_stage < 0:
            raise InputError("learning_rate and batch_size must be positive, steps non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate)
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.98))


def _lr(cfg: TrainConfig, step: int, total: int) -> float:
    lr = cfg.learning_rate
    if cfg.warmup_steps:
        lr *= min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.schedule == "cosine":
        lr *= 0.5 * (1 + math.cos(math.pi * step / max(total, 1)))
    return lr


def _snapshot(params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [p.detach().clone() for p in params]


def train_loop(model, params, examples, cfg: TrainConfig, steps: int, adapters=None, on_step=None, stop_after: int | None = None) -> list[float]:
    """Minibatch descent on ``examples`` (inputs, targets, mask) over ``params``.

    ``on_step(step)`` runs after each update (1-based step). ``stop_after`` ends the
    loop early while keeping the learning-rate schedule of the full ``steps``.
    Raises DivergenceError carrying the last finite parameter values on a non-finite loss.
    """
    params = list(params)
    opt = _optimizer(params, cfg)
    rng = random.Random(cfg.seed)
    losses = []
    for step in range(steps if stop_after is None else min(steps, stop_after)):
        for g in opt.param_groups:
            g["lr"] = _lr(cfg, step, steps)
        batch = [examples[rng.randrange(len(examples))] for _ in range(cfg.batch_size)]
        good = _snapshot(params)
        value = loss(model, batch, adapters=adapters)
        if not torch.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}", last_good=good)
        opt.zero_grad(set_to_none=True)
        value.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        losses.append(value.item())
        if on_step is not None:
            on_step(step + 1)
    return losses


# ---------------------------------------------------------------------------
# style pretraining


def style_examples(instances: Sequence[TaskInstance], vocab: Vocab, seed: int = 0):
    """Three examples per instance: long cue -> long CoT, short cue -> short CoT, neutral instruction -> long CoT."""
    rng = random.Random(seed)
    out = []
    for t in instances:
        for prompt, target in (
            (cued_prompt(t.question, rng.choice(LONG_CUES)), t.long_cot),
            (cued_prompt(t.question, rng.choice(SHORT_CUES)), t.short_cot),
            (neutral_prompt(t.question, rng.choice(NEUTRAL_CUES)), t.long_cot),
        ):
            out.append(sft_example(vocab.encode(prompt, bos=True), vocab.encode(target), vocab.eos_id))
    return out


def pretrain_styles(
    model: TinyDecoder, instances: Sequence[TaskInstance], config: TrainConfig, *, vocab: Vocab, steps: int | None = None, stop_after: int | None = None
):
    """Train a copy of ``model`` on the cue-conditioned mixture. Returns (model, loss curve)."""
    if not instances:
        raise InputError("empty pretraining corpus")
    trained = copy.deepcopy(model)
    examples = style_examples(instances, vocab, config.seed)
    n = config.steps_per_stage if steps is None else steps
    trained.train()
    try:
        losses = train_loop(trained, trained.parameters(), examples, config, n, stop_after=stop_after)
    except DivergenceError as e:
        if e.last_good is not None:
            with torch.no_grad():
                for p, g in zip(trained.parameters(), e.last_good):
                    p.copy_(g)
            e.last_good = trained.state_dict()
        raise
    trained.eval()
    return trained, losses


@dataclass
class StyleGateReport:
    long_accuracy: float
    short_accuracy: float
    neutral_accuracy: float
    style_conditional_accuracy: float
    shorter_when_concise: float


def style_gate(model: TinyDecoder, held_out: Sequence[TaskInstance], *, vocab: Vocab, max_new: int = 96) -> StyleGateReport:
    """Held-out check that cues steer both correctness and length regime.

    An answer counts as style-conditionally correct when it is right and its
    length is closer to the cued style's reference CoT than to the other one.
    """
    longs = [vocab.encode(cued_prompt(t.question, LONG_CUES[i % len(LONG_CUES)]), bos=True) for i, t in enumerate(held_out)]
    shorts = [vocab.encode(cued_prompt(t.question, SHORT_CUES[i % len(SHORT_CUES)]), bos=True) for i, t in enumerate(held_out)]
    neutral = [vocab.encode(neutral_prompt(t.question), bos=True) for t in held_out]
    lo = generate_batch(model, longs, max_new=max_new, vocab=vocab)
    so = generate_batch(model, shorts, max_new=max_new, vocab=vocab)
    no = generate_batch(model, neutral, max_new=max_new, vocab=vocab)
    n = len(held_out)
    hit = lambda outs: [extract_answer(o.text) == t.gold_answer for o, t in zip(outs, held_out)]
    lh, sh, nh = hit(lo), hit(so), hit(no)
    cond = 0
    for t, a, b, ok_l, ok_s in zip(held_out, lo, so, lh, sh):
        ll, sl = len(vocab.encode(t.long_cot)), len(vocab.encode(t.short_cot))
        cond += ok_l and abs(a.length_tokens - ll) < abs(a.length_tokens - sl)
        cond += ok_s and abs(b.length_tokens - sl) < abs(b.length_tokens - ll)
    shorter = sum(b.length_tokens < a.length_tokens for a, b in zip(lo, so))
    return StyleGateReport(sum(lh) / n, sum(sh) / n, sum(nh) / n, cond / (2 * n), shorter / n)


# ---------------------------------------------------------------------------
# low-rank adapters


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("wq", "wk", "wv", "wo", "w_up", "w_down")

    def __post_init__(self):
        if self.rank < 1 or self.alpha <= 0:
            raise InputError("adapter rank and alpha must be positive")


class LoraAdapters(nn.Module):
    """``W x + (alpha / r) * B A x`` on each target projection; B starts at zero."""

    def __init__(self, model: TinyDecoder, config: AdapterConfig = AdapterConfig(), seed: int = 0):
        super().__init__()
        if config.rank > model.config.model_dim:
            raise InputError(f"adapter rank {config.rank} exceeds model_dim {model.config.model_dim}")
        self.config = config
        self.scale = config.alpha / config.rank
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        gen = torch.Generator().manual_seed(seed)
        for i, blk in enumerate(model.layers):
            for t in config.targets:
                w = getattr(blk, t)
                out_f, in_f = w.shape
                key = f"layers_{i}_{t}"
                a = torch.randn(config.rank, in_f, generator=gen, dtype=torch.float64) / math.sqrt(in_f)
                self.A[key] = nn.Parameter(a.to(w.dtype))
                self.B[key] = nn.Parameter(torch.zeros(out_f, config.rank, dtype=w.dtype))

    def delta(self, name: str, x: torch.Tensor):
        key = name.replace(".", "_")
        if key not in self.A:
            return None
        return ((x @ self.A[key].T) @ self.B[key].T) * self.scale

    def check(self, model: TinyDecoder) -> None:
        for i, blk in enumerate(model.layers):
            for t in self.config.targets:
                key = f"layers_{i}_{t}"
                w = getattr(blk, t)
                if key not in self.A or self.A[key].shape[1] != w.shape[1] or self.B[key].shape[0] != w.shape[0]:
                    raise InputError(f"adapter {key} does not match the model's {t} shape {tuple(w.shape)}")

    def merged(self, model: TinyDecoder) -> TinyDecoder:
        """A copy of ``model`` with ``scale * B @ A`` folded into each target weight."""
        out = copy.deepcopy(model)
        with torch.no_grad():
            for i, blk in enumerate(out.layers):
                for t in self.config.targets:
                    key = f"layers_{i}_{t}"
                    w = getattr(blk, t)
                    w.add_((self.B[key].double() @ self.A[key].double() * self.scale).to(w.dtype))
        return out


def adapter_forward(model: TinyDecoder, adapters: LoraAdapters, tokens, capture="final"):
    adapters.check(model)
    return forward(model, tokens, capture, adapters=adapters)


def save_adapters(path, adapters: LoraAdapters, extra: dict | None = None) -> None:
    cfg = adapters.config
    header = {"kind": "adapters", "schema_version": 1, "rank": cfg.rank, "alpha": cfg.alpha, "targets": list(cfg.targets), **(extra or {})}
    tensors = {f"A.{k}": v.detach().float().numpy() for k, v in adapters.A.items()}
    tensors.update({f"B.{k}": v.detach().float().numpy() for k, v in adapters.B.items()})
    write_tensor_file(path, header, tensors)


def load_adapters(path, model: TinyDecoder) -> LoraAdapters:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "adapters" or header.get("schema_version") != 1:
        raise SchemaError(f"{path}: not a version-1 adapter file")
    ad = LoraAdapters(model, AdapterConfig(header["rank"], header["alpha"], tuple(header["targets"])))
    with torch.no_grad():
        for k in ad.A:
            ad.A[k].copy_(torch.from_numpy(tensors[f"A.{k}"].copy()))
            ad.B[k].copy_(torch.from_numpy(tensors[f"B.{k}"].copy()))
    ad.check(model)
    return ad


# ---------------------------------------------------------------------------
# curriculum training


@dataclass
class StageReport:
    stage_index: int
    chosen_step: int | None
    val_accuracy: float | None
    val_mean_length: float | None
    val_aes: float | None
    num_examples: int = 0
    first_loss: float | None = None
    last_loss: float | None = None
    note: str = ""


def pair_examples(pairs: Sequence[SFTPair], vocab: Vocab):
    return [sft_example(vocab.encode(p.input_text, bos=True), vocab.encode(p.target_text), vocab.eos_id) for p in pairs]


@dataclass(frozen=True)
class SelectionSettings:
    """How checkpoints are scored on the validation set."""

    decode: Decode = Decode()
    prompts: DualPrompts = DualPrompts()
    max_new: int = 96
    aes: AesParams = AesParams()


def train_stage(
    model: TinyDecoder,
    adapters: LoraAdapters,
    stage: CurriculumStage | Sequence[SFTPair],
    validation: Sequence[TaskInstance],
    config: TrainConfig,
    *,
    vocab: Vocab,
    baseline: EvalReport,
    selection: SelectionSettings = SelectionSettings(),
    steps: int | None = None,
) -> tuple[LoraAdapters, StageReport]:
    """Optimize a copy of ``adapters`` (base frozen); keep the checkpoint with the best
    validation AES against ``baseline``, evaluated every ``config.eval_every`` steps."""
    pairs = stage.examples if isinstance(stage, CurriculumStage) else list(stage)
    index = stage.stage_index if isinstance(stage, CurriculumStage) else -1
    if not pairs:
        raise InputError("train_stage needs a non-empty stage")
    adapters.check(model)
    work = copy.deepcopy(adapters)
    examples = pair_examples(pairs, vocab)
    n = config.steps_per_stage if steps is None else steps
    system1 = lambda q: selection.prompts.render("system1", q)
    best: dict = {"aes": None}

    def on_step(step):
        if step % config.eval_every and step != n:
            return
        work.eval()
        rep = evaluate(model, validation, selection.decode, 1, vocab=vocab, adapters=work, prompt=system1, max_new=selection.max_new, dataset_id="validation")
        score = aes(baseline, rep, selection.aes)
        if best["aes"] is None or score > best["aes"]:
            best.update(aes=score, step=step, report=rep, state=copy.deepcopy(work.state_dict()))

    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        losses = train_loop(model, work.parameters(), examples, config, n, adapters=work, on_step=on_step)
    finally:
        for p, f in zip(model.parameters(), frozen):
            p.requires_grad_(f)
    if best["aes"] is None:
        return work, StageReport(index, None, None, None, None, len(pairs), note="no steps run")
    work.load_state_dict(best["state"])
    rep = best["report"]
    return work, StageReport(index, best["step"], rep.accuracy, rep.mean_length, best["aes"], len(pairs), losses[0], losses[-1])


@dataclass
class CurriculumResult:
    adapters: LoraAdapters
    reports: list[StageReport]
    stages: list[CurriculumStage] = field(default_factory=list)


def run_curriculum(
    model: TinyDecoder,
    records: Sequence[SampleRecord],
    validation: Sequence[TaskInstance],
    config: TrainConfig,
    adapter_config: AdapterConfig = AdapterConfig(),
    *,
    vocab: Vocab,
    baseline: EvalReport,
    budget: int = 256,
    selection: SelectionSettings = SelectionSettings(),
    aes_floor: float | None = None,
    restart_each_stage: bool = False,
    system2_ratio: float = 1.0,
    stages: Sequence[int] = range(NUM_STAGES),
    ledger_path: str | Path | None = None,
) -> CurriculumResult:
    """Stages 0..9 with widening Len-R windows; each continues from the previous
    stage's selected checkpoint unless ``restart_each_stage``."""
    fresh = LoraAdapters(model, adapter_config, seed=derive_seed(config.seed, "adapters"))
    current = fresh
    reports, built = [], []
    for s in stages:
        try:
            stage = build_curriculum_stage(records, s, budget, derive_seed(config.seed, "stage", s), selection.prompts, system2_ratio)
        except EmptyStageError as e:
            reports.append(StageReport(s, None, None, None, None, note=f"skipped: {e}"))
            continue
        built.append(stage)
        start = copy.deepcopy(fresh) if restart_each_stage else current
        cfg = TrainConfig(**{**asdict(config), "seed": derive_seed(config.seed, "train", s)})
        trained, rep = train_stage(model, start, stage, validation, cfg, vocab=vocab, baseline=baseline, selection=selection)
        if aes_floor is not None and rep.val_aes is not None and rep.val_aes < aes_floor:
            rep.note = f"aborted: AES {rep.val_aes:.4f} below floor {aes_floor}"
            reports.append(rep)
            break
        current = trained
        reports.append(rep)
    if ledger_path is not None:
        with open(ledger_path, "a", encoding="utf-8") as f:
            for r in reports:
                f.write(json.dumps({"schema_version": 1, **asdict(r)}) + "\n")
    return CurriculumResult(current, reports, built)
