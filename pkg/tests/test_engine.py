from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from steercot.engine import (
    Decode,
    ModelConfig,
    TinyDecoder,
    Vocab,
    collate,
    detect_collapse,
    forward,
    generate,
    generate_batch,
    load_model,
    loss,
    save_model,
    sft_example,
)
from steercot.errors import CapacityError, DegenerateDataError, InputError, SchemaError


def tiny(L=1, d=4, heads=2, V=7, ctx=16, seed=0, dtype=torch.float64):
    return TinyDecoder(ModelConfig(num_layers=L, model_dim=d, num_heads=heads, vocab_size=V, max_context=ctx, seed=seed, mlp_ratio=2), dtype)


def _scalar_forward(model: TinyDecoder, tokens):
    """Loop-level recomputation of the decoder in float64 numpy."""
    cfg = model.config
    P = {k: v.detach().double().numpy() for k, v in model.named_parameters()}
    d, H = cfg.model_dim, cfg.num_heads
    hd = d // H
    T = len(tokens)

    def rms(x, g):
        return x / math.sqrt(sum(v * v for v in x) / len(x) + 1e-6) * g

    def matvec(W, x):
        return np.array([sum(W[i, j] * x[j] for j in range(len(x))) for i in range(W.shape[0])])

    def rope(vec, pos):
        out = vec.copy()
        half = hd // 2
        for j in range(half):
            ang = pos * cfg.rope_base ** (-j / half)
            a, b = vec[j], vec[j + half]
            out[j] = a * math.cos(ang) - b * math.sin(ang)
            out[j + half] = a * math.sin(ang) + b * math.cos(ang)
        return out

    gelu = lambda z: 0.5 * z * (1 + math.erf(z / math.sqrt(2)))
    h = [P["embed"][t].copy() for t in tokens]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        xs = [rms(v, P[p + "attn_norm"]) for v in h]
        q = [matvec(P[p + "wq"], x) for x in xs]
        k = [matvec(P[p + "wk"], x) for x in xs]
        v = [matvec(P[p + "wv"], x) for x in xs]
        att = []
        for t in range(T):
            o = np.zeros(d)
            for hh in range(H):
                sl = slice(hh * hd, (hh + 1) * hd)
                qt = rope(q[t][sl], t)
                scores = [float(qt @ rope(k[s][sl], s)) / math.sqrt(hd) for s in range(t + 1)]
                mx = max(scores)
                w = [math.exp(s - mx) for s in scores]
                z = sum(w)
                o[sl] = sum(w[s] / z * v[s][sl] for s in range(t + 1))
            att.append(matvec(P[p + "wo"], o))
        h = [h[t] + att[t] for t in range(T)]
        xs = [rms(v, P[p + "mlp_norm"]) for v in h]
        h = [h[t] + matvec(P[p + "w_down"], np.array([gelu(z) for z in matvec(P[p + "w_up"], xs[t])])) for t in range(T)]
    return np.array([matvec(P["unembed"], rms(v, P["final_norm"])) for v in h])


@pytest.mark.parametrize("L,d,heads", [(1, 2, 1), (1, 4, 2), (2, 4, 1)])
def test_forward_matches_scalar_oracle(L, d, heads):
    model = tiny(L=L, d=d, heads=heads, seed=L + d)
    with torch.no_grad():
        for p in model.parameters():  # make the signal large enough to matter
            p.mul_(8.0)
    tokens = [1, 4, 3, 6, 2]
    logits, _ = forward(model, tokens, capture=None)
    ref = _scalar_forward(model, tokens)
    np.testing.assert_allclose(logits.numpy(), ref, rtol=1e-10, atol=1e-12)


def test_trace_shapes_and_positions():
    model = tiny(L=3, d=8, heads=2)
    logits, trace = forward(model, [1, 2, 3, 4], capture="all")
    assert logits.shape == (4, 7)
    assert trace.activations.shape == (4, 4, 8)
    assert torch.equal(trace.at(1, 2), model.embed[3].detach())
    _, fin = forward(model, [1, 2, 3, 4])
    assert fin.positions == (3,)
    assert torch.allclose(fin.at(4, 3), trace.at(4, 3))
    assert forward(model, [1, 2], capture=None)[1] is None


def test_forward_input_errors():
    model = tiny(ctx=4)
    with pytest.raises(InputError):
        forward(model, [])
    with pytest.raises(InputError):
        forward(model, [1, 99])
    with pytest.raises(CapacityError):
        forward(model, [1, 2, 3, 4, 5])
    with pytest.raises(InputError):
        forward(model, [1, 2], capture=[5])


def test_model_config_validation():
    with pytest.raises(InputError):
        ModelConfig(model_dim=10, num_heads=4)
    with pytest.raises(InputError):
        ModelConfig(num_layers=0)


def _naive_greedy(model, prompt, max_new, eos):
    seq = list(prompt)
    out = []
    for _ in range(max_new):
        logits, _ = forward(model, seq, capture=None)
        t = int(logits[-1].argmax())
        if t == eos:
            break
        out.append(t)
        seq.append(t)
    return out


def test_cached_generation_matches_full_recompute():
    model = tiny(L=2, d=8, heads=2, V=11, ctx=40, seed=3)
    with torch.no_grad():
        model.unembed.mul_(200)
    prompts = [[1, 5, 6], [1, 7, 8], [1, 3], [1, 9, 10, 4]]
    outs = generate_batch(model, prompts, max_new=12, eos_id=2)
    for p, o in zip(prompts, outs):
        assert o.tokens == _naive_greedy(model, p, 12, 2)
        assert o.length_tokens == len(o.tokens)


def test_sampling_is_seeded_and_worker_independent():
    model = tiny(L=2, d=8, heads=2, V=11, ctx=40, seed=3)
    prompts = [[1, 5], [1, 6], [1, 7, 3], [1, 8, 3], [1, 9, 4, 4]]
    dec = Decode(temperature=1.0, seed=11)
    a = generate_batch(model, prompts, dec, 10, eos_id=2, workers=1, chunk_size=1)
    b = generate_batch(model, prompts, dec, 10, eos_id=2, workers=3, chunk_size=1)
    c = generate_batch(model, prompts, dec.with_seed(12), 10, eos_id=2)
    assert [o.tokens for o in a] == [o.tokens for o in b]
    assert [o.tokens for o in a] != [o.tokens for o in c]


def test_generation_context_limit():
    model = tiny(V=7, ctx=6)
    with torch.no_grad():
        model.unembed.zero_()
        model.unembed[5] = 1.0  # never emits eos
    out = generate(model, [1, 3, 4], Decode(), max_new=20, eos_id=2)
    assert out.stop_reason == "context" and out.truncated
    assert len(out.tokens) == 4  # 3 fed back to fill the context, plus the last prediction
    with pytest.raises(InputError):
        generate(model, [], Decode(), 4)


def test_capture_during_generation_covers_prompt_and_generated_tokens():
    model = tiny(L=2, d=8, heads=2, V=11, ctx=40, seed=3)
    out = generate(model, [1, 5, 6], Decode(), 5, eos_id=2, capture=True)
    # every prompt position, then one state per token fed back in
    assert out.trace.activations.shape[:2] == (3, 3 + max(len(out.tokens) - 1, 0))
    _, full = forward(model, [1, 5, 6], capture="all")
    assert torch.allclose(out.trace.activations[:, :3], full.activations, atol=1e-12)


@pytest.mark.parametrize(
    "tokens,expected",
    [
        ([5] * 6, True),
        ([5] * 5, False),
        ([1, 2] * 6, True),
        ([1, 2] * 5 + [1], False),
        (list(range(20)), False),
        ([9, 1, 2, 3] + [4, 5, 6] * 6, True),
    ],
)
def test_detect_collapse_examples(tokens, expected):
    assert detect_collapse(tokens) is expected


def test_detect_collapse_periodic_tail_at_limit():
    toks = list(range(10)) + [3, 4, 5] * 5 + [3]
    assert not detect_collapse(toks)
    assert detect_collapse(toks, hit_limit=True)


def test_loss_matches_manual_cross_entropy():
    model = tiny(L=2, d=8, heads=2, V=9, ctx=20)
    batch = [sft_example([1, 3, 4], [5, 6], 2), sft_example([1, 7], [8], 2)]
    value = loss(model, batch)
    total, count = 0.0, 0
    for x, y, m in batch:
        logits, _ = forward(model, x, capture=None)
        lp = torch.log_softmax(logits, -1)
        for t, (tgt, keep) in enumerate(zip(y, m)):
            if keep:
                total -= float(lp[t, tgt])
                count += 1
    assert count == 3 + 2
    assert value.item() == pytest.approx(total / count, rel=1e-12)


def test_sft_example_masks_prompt():
    x, y, m = sft_example([1, 3, 4], [5, 6], 2)
    assert x == [1, 3, 4, 5, 6] and y == [3, 4, 5, 6, 2] and m == [0, 0, 1, 1, 1]


def test_loss_errors():
    model = tiny(ctx=4)
    with pytest.raises(DegenerateDataError):
        loss(model, [])
    with pytest.raises(DegenerateDataError):
        loss(model, [([1, 2], [2, 3], [0, 0])])
    with pytest.raises(CapacityError):
        loss(model, [sft_example([1, 3, 4], [5, 6], 2)])
    with pytest.raises(InputError):
        collate([([1, 2], [2], [1])])


def test_vocab_roundtrip_and_unknown_word():
    v = Vocab(["a", "b", "\n", "c"])
    ids = v.encode("a b\nc", bos=True)
    assert ids[0] == v.bos_id
    assert v.decode(ids) == "a b\nc"
    with pytest.raises(InputError):
        v.encode("a z")


def test_checkpoint_roundtrip(tmp_path):
    model = tiny(L=2, d=8, heads=2, dtype=torch.float32)
    save_model(tmp_path / "m.sctf", model, {"note": "x"})
    loaded, header = load_model(tmp_path / "m.sctf")
    assert header["note"] == "x"
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    (tmp_path / "bad.sctf").write_bytes(b"XXXX")
    with pytest.raises(SchemaError):
        load_model(tmp_path / "bad.sctf")
