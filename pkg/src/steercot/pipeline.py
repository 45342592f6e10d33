"""End-to-end stages over one output directory.

Each stage reads its inputs from ``out`` and writes its artifacts there, so any
stage can be rerun in isolation with the same config and seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, dump_config
from .directions import (
    ContrastiveCorpus,
    capture_final_token_activations,
    detect_anchor_layer,
    extract_directions,
    layer_diagnostics,
    load_directions,
    save_directions,
    write_diagnostics,
)
from .engine import Decode, ModelConfig, TinyDecoder, Vocab, load_model, save_model
from .errors import GateError, InputError
from .evaluator import EvalReport, aes, evaluate, read_report, write_comparison_csv, write_report
from .factory import (
    DualPrompts,
    answer_verify,
    build_shortest_only_dataset,
    read_records,
    retained_accuracy,
    sampled_accuracy,
    self_consistency_filter,
    write_dataset,
    write_histogram,
    write_records,
)
from .probe import SweepReport, read_sweep, recommend_setting, run_sweep, write_sweep, write_sweep_csv
from .seeding import derive_seed
from .steering import InterventionSpec
from .task import LONG_CUES, SHORT_CUES, TaskConfig, build_vocab, by_split, cued_prompt, gen_corpus, read_corpus, write_corpus
from .tensorio import read_tensor_file, write_tensor_file
from .trainer import (
    AdapterConfig,
    SelectionSettings,
    TrainConfig,
    load_adapters,
    pretrain_styles,
    run_curriculum,
    save_adapters,
    style_gate,
    train_stage,
    LoraAdapters,
)

log = logging.getLogger(__name__)
MANIFEST_SCHEMA = 1


def task_config(cfg: RunConfig) -> TaskConfig:
    t = cfg.task
    return TaskConfig(t.min_operands, t.max_operands, t.max_operand, t.max_value)


def vocab_for(cfg: RunConfig) -> Vocab:
    return build_vocab(task_config(cfg))


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"missing input artifact {path.name}; run the stage that produces it first")
    return path


def _corpus(out: Path):
    return read_corpus(_need(out / "corpus.jsonl"))


def _model(out: Path) -> TinyDecoder:
    return load_model(_need(out / "model.sctf"))[0]


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig, out: Path) -> None:
    corpus = gen_corpus(cfg.task.count, seed=cfg.seed, cfg=task_config(cfg))
    write_corpus(out / "corpus.jsonl", corpus)


def initial_model(cfg: RunConfig, vocab: Vocab) -> TinyDecoder:
    m = cfg.model
    return TinyDecoder(ModelConfig(m.num_layers, m.model_dim, m.num_heads, len(vocab), m.max_context, derive_seed(cfg.seed, "init")))


def pretrain_config(cfg: RunConfig) -> TrainConfig:
    p = cfg.pretrain
    return TrainConfig(p.learning_rate, p.batch_size, p.steps, derive_seed(cfg.seed, "pretrain"), "adam", p.grad_clip, p.warmup_steps, "cosine")


def pretrain(cfg: RunConfig, out: Path) -> None:
    vocab = vocab_for(cfg)
    corpus = _corpus(out)
    p = cfg.pretrain
    model, losses = pretrain_styles(initial_model(cfg, vocab), by_split(corpus, "train"), pretrain_config(cfg), vocab=vocab)
    save_model(out / "model.sctf", model)
    with open(out / "pretrain_loss.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows((i, f"{v:.6f}") for i, v in enumerate(losses))
    gate = style_gate(model, by_split(corpus, "validation")[: p.gate_items], vocab=vocab)
    _json(out / "style_gate.json", {"schema_version": 1, "threshold": p.gate, **asdict(gate)})
    if p.enforce_gate and gate.style_conditional_accuracy < p.gate:
        raise GateError(f"style-conditional accuracy {gate.style_conditional_accuracy:.3f} below gate {p.gate}")


def contrastive_corpus(cfg: RunConfig, corpus, vocab: Vocab) -> ContrastiveCorpus:
    train = by_split(corpus, "train")[: cfg.directions.pairs]
    # cues drawn per pair with different closing words, so every pair differs at the
    # last token and the pairs do not share one lexical contrast
    rng = random.Random(derive_seed(cfg.seed, "contrastive"))
    cues = []
    for _ in train:
        lc = rng.choice(LONG_CUES)
        cues.append((lc, rng.choice([c for c in SHORT_CUES if c.split()[-1] != lc.split()[-1]])))
    return ContrastiveCorpus(
        [vocab.encode(cued_prompt(t.question, lc), bos=True) for t, (lc, _) in zip(train, cues)],
        [vocab.encode(cued_prompt(t.question, sc), bos=True) for t, (_, sc) in zip(train, cues)],
        [t.id for t in train],
    )


def extract(cfg: RunConfig, out: Path) -> None:
    vocab = vocab_for(cfg)
    model = _model(out)
    cc = contrastive_corpus(cfg, _corpus(out), vocab)
    long_a, short_a = capture_final_token_activations(model, cc)
    write_tensor_file(out / "activations.sctf", {"kind": "activations", "schema_version": 1, "ids": cc.instance_ids}, {"long": long_a, "short": short_a})
    save_directions(out / "directions.sctf", extract_directions(long_a, short_a), {"pairs": len(cc)})


def diagnose(cfg: RunConfig, out: Path) -> int:
    _, acts = read_tensor_file(_need(out / "activations.sctf"))
    diag = layer_diagnostics(acts["long"], acts["short"], cfg.directions.n_components)
    d = cfg.directions
    anchor = detect_anchor_layer(diag, d.tau_sep, d.tau_ang, d.persist)
    diag.anchor_layer = anchor
    write_diagnostics(out / "diagnostics.jsonl", diag)
    _json(out / "anchor.json", {"schema_version": 1, "anchor": anchor})
    if anchor is None:
        raise GateError("no anchor layer satisfies the separation and angle-variance thresholds")
    return anchor


def _anchor(out: Path) -> int:
    anchor = json.loads(_need(out / "anchor.json").read_text())["anchor"]
    if anchor is None:
        raise GateError("diagnostics found no anchor layer")
    return anchor


def probe(cfg: RunConfig, out: Path) -> SweepReport:
    vocab = vocab_for(cfg)
    model = _model(out)
    directions, _ = load_directions(_need(out / "directions.sctf"))
    anchor = _anchor(out)
    L = model.config.num_layers
    ks = [k for k in cfg.probe.ks if anchor + k <= L + 1]
    if not ks:
        raise GateError(f"no block size in {list(cfg.probe.ks)} fits after anchor {anchor}")
    pilot = by_split(_corpus(out), "pilot")[: cfg.probe.pilot_size]
    p = cfg.probe
    report = run_sweep(model, directions, anchor, pilot, ks, p.alphas, vocab=vocab, max_new=p.max_new, scope=p.scope, workers=cfg.num_workers)
    report.recommendation = recommend_setting(report, (p.target_low, p.target_high), p.max_collapse_frac, p.min_alphas)
    write_sweep(out / "sweep.json", report)
    write_sweep_csv(out / "sweep.csv", report)
    if report.recommendation is None:
        raise GateError("the sweep found no block size with enough usable alphas")
    return report


def pick_alphas(alphas: list[float], n: int) -> list[float]:
    """``n`` alphas spread evenly over a magnitude-sorted list (ends included)."""
    if len(alphas) <= n:
        return list(alphas)
    if n == 1:
        return [alphas[len(alphas) // 2]]
    idx = sorted({round(i * (len(alphas) - 1) / (n - 1)) for i in range(n)})
    return [alphas[i] for i in idx]


def sample(cfg: RunConfig, out: Path) -> None:
    from .factory import sample_variants

    vocab = vocab_for(cfg)
    model = _model(out)
    directions, _ = load_directions(_need(out / "directions.sctf"))
    rec = read_sweep(_need(out / "sweep.json")).recommendation
    if rec is None:
        raise GateError("sweep has no recommendation")
    k, good = rec
    alphas = pick_alphas(good, cfg.sample.num_alphas)
    train = by_split(_corpus(out), "train")[: cfg.sample.size]
    s = cfg.sample
    decode = Decode(s.temperature, derive_seed(cfg.seed, "sample"))
    spec = InterventionSpec(directions, _anchor(out), k, alphas[0], cfg.probe.scope)
    records = sample_variants(model, train, spec, alphas, decode, vocab=vocab, max_new=s.max_new, workers=cfg.num_workers)
    write_records(out / "samples.jsonl", records)


def verify(cfg: RunConfig, out: Path) -> dict:
    records = read_records(_need(out / "samples.jsonl"))
    if cfg.sample.verify == "answer":
        kept = answer_verify(records)
        summary = {"mode": "answer", "total": len(kept), "retained": sum(r.verification.retained for r in kept)}
    elif cfg.sample.verify == "consistency":
        kept, stats = self_consistency_filter(records)
        summary = {"mode": "self-consistency", **asdict(stats)}
        if stats.correct is not None and stats.retained:
            summary["accuracy_percent"] = stats.accuracy_percent()
    else:
        raise InputError(f"unknown verify mode {cfg.sample.verify!r}")
    if all(r.gold_answer is not None for r in kept):
        summary["sampled_accuracy"] = sampled_accuracy(kept)
        summary["retained_accuracy"] = retained_accuracy(kept) if any(r.verification.retained for r in kept) else None
    write_records(out / "verified.jsonl", kept)
    _json(out / "consistency.json", {"schema_version": 1, **summary})
    return summary


def _selection(cfg: RunConfig) -> SelectionSettings:
    return SelectionSettings(Decode(), DualPrompts(), cfg.curriculum.max_new)


def _stage_train_config(cfg: RunConfig, label: str) -> TrainConfig:
    c = cfg.curriculum
    return TrainConfig(c.learning_rate, c.batch_size, c.steps_per_stage, derive_seed(cfg.seed, label), "adam", 1.0, 0, "constant", c.eval_every)


def _validation_baseline(cfg: RunConfig, out: Path, model, vocab, validation) -> EvalReport:
    path = out / "baseline_validation.json"
    if path.exists():
        return read_report(path)
    rep = evaluate(model, validation, Decode(), 1, vocab=vocab, max_new=cfg.curriculum.max_new, dataset_id="validation", workers=cfg.num_workers)
    write_report(path, rep)
    return rep


def curriculum(cfg: RunConfig, out: Path) -> None:
    vocab = vocab_for(cfg)
    model = _model(out)
    records = read_records(_need(out / "verified.jsonl"))
    c = cfg.curriculum
    validation = by_split(_corpus(out), "validation")[: c.validation_size]
    baseline = _validation_baseline(cfg, out, model, vocab, validation)
    ledger = out / "run_ledger.jsonl"
    ledger.unlink(missing_ok=True)
    result = run_curriculum(
        model,
        records,
        validation,
        _stage_train_config(cfg, "curriculum"),
        AdapterConfig(c.rank, c.adapter_alpha),
        vocab=vocab,
        baseline=baseline,
        budget=c.budget,
        selection=_selection(cfg),
        aes_floor=c.aes_floor,
        restart_each_stage=c.restart_each_stage,
        system2_ratio=c.system2_ratio,
        ledger_path=ledger,
    )
    for stage in result.stages:
        write_dataset(out / f"stage_{stage.stage_index}.jsonl", stage.examples)
        write_histogram(out / f"stage_{stage.stage_index}_hist.csv", stage)
    save_adapters(out / "adapters.sctf", result.adapters)


def sft_shortest(cfg: RunConfig, out: Path) -> None:
    """Ablation: one training run on each record's shortest kept variant, with the
    same total step count and checkpoint selection as the full curriculum."""
    from .factory import NUM_STAGES

    vocab = vocab_for(cfg)
    model = _model(out)
    records = read_records(_need(out / "verified.jsonl"))
    c = cfg.curriculum
    validation = by_split(_corpus(out), "validation")[: c.validation_size]
    baseline = _validation_baseline(cfg, out, model, vocab, validation)
    pairs = build_shortest_only_dataset(records, c.budget * NUM_STAGES, derive_seed(cfg.seed, "shortest"), DualPrompts(), c.system2_ratio)
    write_dataset(out / "shortest_only.jsonl", pairs)
    tc = _stage_train_config(cfg, "shortest")
    adapters = LoraAdapters(model, AdapterConfig(c.rank, c.adapter_alpha), seed=derive_seed(tc.seed, "adapters"))
    trained, report = train_stage(model, adapters, pairs, validation, tc, vocab=vocab, baseline=baseline, selection=_selection(cfg), steps=c.steps_per_stage * NUM_STAGES)
    save_adapters(out / "adapters_shortest.sctf", trained)
    _json(out / "shortest_report.json", {"schema_version": 1, **asdict(report)})


def evaluate_stage(cfg: RunConfig, out: Path) -> dict:
    vocab = vocab_for(cfg)
    model = _model(out)
    test = by_split(_corpus(out), "test")[: cfg.eval.test_size]
    e = cfg.eval
    decode = Decode(e.temperature, derive_seed(cfg.seed, "eval"))
    system1 = lambda q: DualPrompts().render("system1", q)
    kw = dict(vocab=vocab, max_new=e.max_new, workers=cfg.num_workers)
    base = evaluate(model, test, decode, e.repeats, dataset_id="test", **kw)
    write_report(out / "eval_baseline.json", base)
    rows = {}
    for name, fname in (("curriculum", "adapters.sctf"), ("shortest_only", "adapters_shortest.sctf")):
        if (out / fname).exists():
            ad = load_adapters(out / fname, model)
            rows[name] = evaluate(model, test, decode, e.repeats, adapters=ad, prompt=system1, dataset_id="test", **kw)
            write_report(out / f"eval_{name}.json", rows[name])
    write_comparison_csv(out / "comparison.csv", base, rows)
    return {"baseline": base, **rows, "aes": {k: aes(base, v) for k, v in rows.items()}}


STAGES: dict[str, Callable[[RunConfig, Path], object]] = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "extract-direction": extract,
    "diagnose": diagnose,
    "probe": probe,
    "sample": sample,
    "verify": verify,
    "curriculum": curriculum,
    "sft": sft_shortest,
    "eval": evaluate_stage,
}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, out: Path) -> dict:
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {"schema_version": MANIFEST_SCHEMA, "seed": cfg.seed, "artifacts": {p.name: _digest(p) for p in files}}
    _json(out / "manifest.json", manifest)
    return manifest


def run_pipeline(cfg: RunConfig, out: str | Path) -> dict:
    """All stages in order under one seed; returns the artifact manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # worker count is excluded so digests do not depend on it
    (out / "config.yaml").write_text(dump_config(replace(cfg, workers=0)), encoding="utf-8")
    order = ["gen-data", "pretrain", "extract-direction", "diagnose", "probe", "sample", "verify", "curriculum"]
    if cfg.eval.ablation:
        order.append("sft")
    order.append("eval")
    for name in order:
        log.info("stage %s", name)
        STAGES[name](cfg, out)
    return write_manifest(cfg, out)
