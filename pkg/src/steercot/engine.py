"""Small decoder-only transformer with residual-stream instrumentation.

Layers are numbered from 1. ``h^(l)`` is the residual state at the *start* of
layer ``l`` (before its attention), so ``h^(1)`` is the token embedding and
``h^(L+1)`` is the state after the last layer. Traces hold all ``L+1`` states;
hooks may edit layers ``1..L`` and always see the state before attention.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, DegenerateDataError, InputError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
NEWLINE = "\n"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    model_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 64
    max_context: int = 512
    seed: int = 0
    mlp_ratio: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "vocab_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise InputError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if (self.model_dim // self.num_heads) % 2:
            raise InputError("head dimension must be even for rotary positions")
        if self.max_context < 2:
            raise InputError("max_context must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Vocab:
    """Word-level vocabulary. Text is split on spaces; newlines are tokens."""

    def __init__(self, symbols: Sequence[str]):
        specials = [PAD, BOS, EOS]
        seen = set(specials)
        self.symbols = list(specials)
        for s in symbols:
            if s not in seen:
                seen.add(s)
                self.symbols.append(s)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id, self.bos_id, self.eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.symbols)

    @staticmethod
    def split(text: str) -> list[str]:
        return [t for t in text.replace(NEWLINE, f" {NEWLINE} ").split(" ") if t]

    def encode(self, text: str, bos: bool = False) -> list[int]:
        ids = [self.bos_id] if bos else []
        for word in self.split(text):
            if word not in self.index:
                raise InputError(f"unknown word {word!r}")
            ids.append(self.index[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words = [self.symbols[i] for i in ids if i not in (self.pad_id, self.bos_id, self.eos_id)]
        return " ".join(words).replace(f" {NEWLINE} ", NEWLINE).replace(f" {NEWLINE}", NEWLINE).replace(
            f"{NEWLINE} ", NEWLINE
        )


class StateHook(Protocol):
    """Edits residual states at the start of the layers it declares.

    ``scope`` is ``"generated"`` (only positions of generated tokens) or
    ``"all"`` (prompt positions too).
    """

    layers: frozenset[int]
    scope: str

    def __call__(self, layer: int, h: torch.Tensor) -> torch.Tensor: ...


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.rms_norm(x, (x.shape[-1],), gain, eps)


def rotary_tables(n: int, hd: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    half = hd // 2
    inv = base ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = torch.outer(torch.arange(n, dtype=torch.float64), inv)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, hd); cos/sin: (T, hd/2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype):
        super().__init__()
        d, hdim = cfg.model_dim, cfg.mlp_ratio * cfg.model_dim
        std = 0.02
        out_std = std / math.sqrt(2 * cfg.num_layers)

        def w(rows, cols, s):
            return nn.Parameter(torch.randn(rows, cols, generator=gen, dtype=torch.float64).mul_(s).to(dtype))

        self.attn_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.wq = w(d, d, std)
        self.wk = w(d, d, std)
        self.wv = w(d, d, std)
        self.wo = w(d, d, out_std)
        self.mlp_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.w_up = w(hdim, d, std)
        self.w_down = w(d, hdim, out_std)


def _linear(x, weight, name, adapters):
    y = x @ weight.T
    if adapters is not None:
        delta = adapters.delta(name, x)
        if delta is not None:
            y = y + delta
    return y


class TinyDecoder(nn.Module):
    """Pre-norm decoder: ``h~ = h + Attn(h)``, ``h' = h~ + MLP(h~)``."""

    def __init__(self, config: ModelConfig, dtype=torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d, v = config.model_dim, config.vocab_size
        self.embed = nn.Parameter(torch.randn(v, d, generator=gen, dtype=torch.float64).to(dtype))
        self.layers = nn.ModuleList([Block(config, gen, dtype) for _ in range(config.num_layers)])
        self.final_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.unembed = nn.Parameter(
            torch.randn(v, d, generator=gen, dtype=torch.float64).mul_(0.02).to(dtype)
        )

    @property
    def dtype(self):
        return self.embed.dtype

    def _rope(self, pos0: int, n: int):
        key = self.dtype
        tabs = self.__dict__.get("_rope_cache")
        if tabs is None or tabs[0] != key:
            cfg = self.config
            tabs = (key, *rotary_tables(cfg.max_context, cfg.head_dim, cfg.rope_base, key))
            self.__dict__["_rope_cache"] = tabs
        return tabs[1][pos0 : pos0 + n], tabs[2][pos0 : pos0 + n]

    def _attention(self, blk, i, x, pos0, cache, adapters):
        cfg = self.config
        B, T, d = x.shape
        H, hd = cfg.num_heads, cfg.head_dim
        p = f"layers.{i}."
        q = _linear(x, blk.wq, p + "wq", adapters).view(B, T, H, hd).transpose(1, 2)
        k = _linear(x, blk.wk, p + "wk", adapters).view(B, T, H, hd).transpose(1, 2)
        v = _linear(x, blk.wv, p + "wv", adapters).view(B, T, H, hd).transpose(1, 2)
        cos, sin = self._rope(pos0, T)
        q = rotary(q, cos, sin)
        k = rotary(k, cos, sin)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        S = k.shape[2]
        if S == T:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        elif T == 1:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            allowed = torch.arange(S).unsqueeze(0) <= torch.arange(pos0, pos0 + T).unsqueeze(1)
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        out = out.transpose(1, 2).reshape(B, T, d)
        return _linear(out, blk.wo, p + "wo", adapters)

    def run(
        self,
        ids: torch.Tensor,
        pos0: int = 0,
        cache: list[dict] | None = None,
        hook: StateHook | None = None,
        capture: bool = False,
        adapters=None,
    ):
        """Batched core pass over ``ids`` (B, T) starting at absolute position ``pos0``.

        Returns logits (B, T, V) and, when ``capture``, states (B, L+1, T, d)
        recorded after any hook edit.
        """
        h = self.embed[ids]
        states = []
        for i, blk in enumerate(self.layers):
            layer = i + 1
            if hook is not None and layer in hook.layers:
                h = hook(layer, h)
            if capture:
                states.append(h)
            h = h + self._attention(blk, i, rms_norm(h, blk.attn_norm), pos0, None if cache is None else cache[i], adapters)
            x = rms_norm(h, blk.mlp_norm)
            up = F.gelu(_linear(x, blk.w_up, f"layers.{i}.w_up", adapters))
            h = h + _linear(up, blk.w_down, f"layers.{i}.w_down", adapters)
        if capture:
            states.append(h)
        logits = _linear(rms_norm(h, self.final_norm), self.unembed, "unembed", adapters)
        return logits, (torch.stack(states, dim=1) if capture else None)


@dataclass
class ActivationTrace:
    """Residual states, shape (L+1, len(positions), model_dim)."""

    activations: torch.Tensor
    positions: tuple[int, ...]

    def at(self, layer: int, position: int) -> torch.Tensor:
        return self.activations[layer - 1, self.positions.index(position)]


def _check_tokens(model: TinyDecoder, tokens: Sequence[int]):
    cfg = model.config
    if len(tokens) == 0:
        raise InputError("empty token sequence")
    if len(tokens) > cfg.max_context:
        raise CapacityError(f"sequence length {len(tokens)} exceeds max_context {cfg.max_context}")
    bad = [t for t in tokens if not 0 <= int(t) < cfg.vocab_size]
    if bad:
        raise InputError(f"token id {bad[0]} out of range [0, {cfg.vocab_size})")


def _positions(capture, n: int) -> tuple[int, ...] | None:
    if capture is None:
        return None
    if capture == "final":
        return (n - 1,)
    if capture == "all":
        return tuple(range(n))
    pos = tuple(int(p) for p in capture)
    if any(not 0 <= p < n for p in pos):
        raise InputError(f"capture positions {pos} outside sequence of length {n}")
    return pos


@torch.no_grad()
def forward(model: TinyDecoder, tokens: Sequence[int], capture="final", adapters=None, hook=None):
    """Run one sequence. ``capture`` is None, ``"final"``, ``"all"`` or positions."""
    _check_tokens(model, tokens)
    ids = torch.as_tensor([list(tokens)], dtype=torch.long)
    pos = _positions(capture, len(tokens))
    logits, states = model.run(ids, hook=hook, capture=pos is not None, adapters=adapters)
    trace = None
    if pos is not None:
        trace = ActivationTrace(states[0][:, list(pos)].clone(), pos)
    return logits[0], trace


@torch.no_grad()
def final_token_states(model: TinyDecoder, prompts: Sequence[Sequence[int]], batch_size: int = 64, adapters=None):
    """States h^(l)_n at the last token of each prompt: (len(prompts), L+1, d)."""
    out = [None] * len(prompts)
    for idx, tokens in enumerate(prompts):
        _check_tokens(model, tokens)
    for group in _length_groups(prompts, batch_size):
        ids = torch.as_tensor([list(prompts[i]) for i in group], dtype=torch.long)
        _, states = model.run(ids, capture=True, adapters=adapters)
        for row, i in enumerate(group):
            out[i] = states[row, :, -1].clone()
    return torch.stack(out)


def _length_groups(prompts, chunk: int) -> list[list[int]]:
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    groups = []
    for n in sorted(by_len):
        idx = by_len[n]
        groups.extend(idx[j : j + chunk] for j in range(0, len(idx), chunk))
    return groups


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class Decode:
    """Greedy when ``temperature == 0``; otherwise seeded sampling."""

    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0 or not math.isfinite(self.temperature):
            raise InputError("temperature must be finite and non-negative")

    def with_seed(self, seed: int) -> "Decode":
        return Decode(self.temperature, seed)


@dataclass
class GenerationOutput:
    tokens: list[int]
    text: str
    length_tokens: int
    collapsed: bool
    stop_reason: str = "eos"  # eos | max_new | context
    trace: ActivationTrace | None = None

    @property
    def truncated(self) -> bool:
        return self.stop_reason == "context"


def detect_collapse(
    tokens: Sequence[int], window: int = 8, max_repeats: int = 6, hit_limit: bool = False
) -> bool:
    """True if some n-gram (n <= window) repeats ``max_repeats`` times back to back,
    or generation hit its token limit while the tail is periodic."""
    if window < 1:
        raise InputError("window must be >= 1")
    toks = list(tokens)
    n_tok = len(toks)
    for n in range(1, window + 1):
        if n * max_repeats > n_tok:
            break
        # run[i] counts consecutive matches toks[i] == toks[i+n] ending at i
        run = 0
        for i in range(n_tok - n):
            run = run + 1 if toks[i] == toks[i + n] else 0
            # run >= n*(r-1) matching shifts means r consecutive copies
            if run >= n * (max_repeats - 1):
                return True
    if hit_limit:
        tail = toks[-2 * window :]
        if len(tail) == 2 * window:
            for p in range(1, window + 1):
                if all(tail[j] == tail[j + p] for j in range(len(tail) - p)):
                    return True
    return False


class _Row:
    __slots__ = ("index", "tokens", "rng", "done", "reason", "states")

    def __init__(self, index, tokens, rng):
        self.index = index
        self.tokens = tokens
        self.rng = rng
        self.done = False
        self.reason = "max_new"
        self.states = []


def _pick(logits: torch.Tensor, rows: list[_Row], decode: Decode) -> list[int]:
    if decode.temperature == 0:
        return logits.argmax(-1).tolist()
    z = logits.double() / decode.temperature
    probs = torch.softmax(z, dim=-1).numpy()
    out = []
    for r, p in zip(rows, probs):
        c = np.cumsum(p)
        out.append(int(min(np.searchsorted(c, r.rng.random() * c[-1], side="right"), len(c) - 1)))
    return out


@torch.no_grad()
def _generate_group(model, prompts, idxs, decode, max_new, hook, eos_id, adapters, capture):
    cfg = model.config
    rows = [
        _Row(i, [], np.random.default_rng([decode.seed, i]) if decode.temperature > 0 else None) for i in idxs
    ]
    n0 = len(prompts[idxs[0]])
    ids = torch.as_tensor([list(prompts[i]) for i in idxs], dtype=torch.long)
    cache = [dict() for _ in range(cfg.num_layers)]
    prompt_hook = hook if hook is not None and hook.scope == "all" else None
    logits, states = model.run(ids, 0, cache, prompt_hook, capture, adapters)
    if capture:
        for r, s in zip(rows, states):
            r.states.append(s)
    active = list(range(len(rows)))
    pos = n0
    for step in range(max_new):
        nxt = _pick(logits[:, -1], [rows[a] for a in active], decode)
        still = []
        for a, t in zip(active, nxt):
            r = rows[a]
            if t == eos_id:
                r.done, r.reason = True, "eos"
            else:
                r.tokens.append(t)
                still.append(a)
        if not still or step == max_new - 1:
            break
        if pos >= cfg.max_context:
            for a in still:
                rows[a].reason = "context"
            break
        keep = [active.index(a) for a in still]
        if len(keep) != len(active):
            sel = torch.as_tensor(keep, dtype=torch.long)
            for c in cache:
                c["k"], c["v"] = c["k"][sel], c["v"][sel]
        active = still
        new = torch.as_tensor([[rows[a].tokens[-1]] for a in active], dtype=torch.long)
        logits, states = model.run(new, pos, cache, hook, capture, adapters)
        if capture:
            for a, s in zip(active, states):
                rows[a].states.append(s)
        pos += 1
    return rows


def generate_batch(
    model: TinyDecoder,
    prompts: Sequence[Sequence[int]],
    decode: Decode = Decode(),
    max_new: int = 64,
    hook: StateHook | None = None,
    *,
    vocab: Vocab | None = None,
    eos_id: int | None = None,
    adapters=None,
    capture: bool = False,
    chunk_size: int = 64,
    workers: int = 1,
) -> list[GenerationOutput]:
    """Autoregressive decoding of many prompts.

    Prompts are grouped by length and processed in fixed chunks, so results do
    not depend on ``workers``. Sampling draws from a per-prompt stream seeded by
    ``(decode.seed, prompt index)``.
    """
    if max_new < 1:
        raise InputError("max_new must be >= 1")
    if eos_id is None:
        eos_id = vocab.eos_id if vocab is not None else 2
    for p in prompts:
        _check_tokens(model, p)
    groups = _length_groups(prompts, chunk_size)

    def work(g):
        return _generate_group(model, prompts, g, decode, max_new, hook, eos_id, adapters, capture)

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(work, groups))
    else:
        results = [work(g) for g in groups]
    outs: list[GenerationOutput | None] = [None] * len(prompts)
    for rows in results:
        for r in rows:
            trace = None
            if capture:
                acts = torch.cat(r.states, dim=1)
                n = acts.shape[1]
                trace = ActivationTrace(acts.clone(), tuple(range(n)))
            outs[r.index] = GenerationOutput(
                tokens=list(r.tokens),
                text=vocab.decode(r.tokens) if vocab is not None else "",
                length_tokens=len(r.tokens),
                collapsed=detect_collapse(r.tokens, hit_limit=r.reason == "max_new"),
                stop_reason=r.reason,
                trace=trace,
            )
    return outs


def generate(
    model: TinyDecoder,
    prompt: Sequence[int],
    decode: Decode = Decode(),
    max_new: int = 64,
    hook: StateHook | None = None,
    **kwargs,
) -> GenerationOutput:
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    return generate_batch(model, [prompt], decode, max_new, hook, **kwargs)[0]


# ---------------------------------------------------------------------------
# loss


def sft_example(prompt: Sequence[int], response: Sequence[int], eos_id: int):
    """(inputs, targets, mask) for next-token training on ``response`` + EOS only."""
    seq = list(prompt) + list(response) + [eos_id]
    inputs, targets = seq[:-1], seq[1:]
    mask = [0] * (len(prompt) - 1) + [1] * (len(response) + 1)
    return inputs, targets, mask


def collate(batch, pad_id: int = 0):
    n = max(len(x[0]) for x in batch)
    ids = torch.full((len(batch), n), pad_id, dtype=torch.long)
    tgt = torch.full((len(batch), n), pad_id, dtype=torch.long)
    mask = torch.zeros((len(batch), n))
    for i, (x, y, m) in enumerate(batch):
        if not len(x) == len(y) == len(m):
            raise InputError(f"example {i}: inputs, targets and mask lengths differ")
        ids[i, : len(x)] = torch.as_tensor(x)
        tgt[i, : len(y)] = torch.as_tensor(y)
        mask[i, : len(m)] = torch.as_tensor(m, dtype=torch.float32)
    return ids, tgt, mask


def loss(model: TinyDecoder, batch, adapters=None) -> torch.Tensor:
    """Mean next-token cross-entropy over unmasked positions (differentiable)."""
    if not batch:
        raise DegenerateDataError("empty batch")
    ids, tgt, mask = collate(batch)
    if ids.shape[1] > model.config.max_context:
        raise CapacityError(f"sequence length {ids.shape[1]} exceeds max_context {model.config.max_context}")
    if mask.sum() == 0:
        raise DegenerateDataError("every position is masked")
    logits, _ = model.run(ids, adapters=adapters)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_SCHEMA = 1


def save_model(path, model: TinyDecoder, extra: dict | None = None) -> None:
    from .tensorio import write_tensor_file

    header = {
        "kind": "model",
        "schema_version": CHECKPOINT_SCHEMA,
        "config": model.config.to_dict(),
        **(extra or {}),
    }
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    write_tensor_file(path, header, tensors)


def load_model(path) -> tuple[TinyDecoder, dict]:
    from .errors import SchemaError
    from .tensorio import read_tensor_file

    header, tensors = read_tensor_file(path)
    if header.get("kind") != "model" or header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise SchemaError(f"{path}: not a version-{CHECKPOINT_SCHEMA} model checkpoint")
    model = TinyDecoder(ModelConfig.from_dict(header["config"]))
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model, header
