"""Reference computations shared by unit and acceptance tests."""

from __future__ import annotations

import math
import random

import numpy as np
import torch


def finite_difference_check(loss_fn, params, eps: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> dict:
    """Central-difference gradients vs autograd, per tensor.

    Returns ``{name: relative error}`` with relative error
    ``||g_fd - g_ad|| / max(||g_fd||, ||g_ad||)`` over the checked entries.
    ``max_entries`` samples that many entries per tensor (all when None).
    """
    named = list(params)
    for _, p in named:
        p.grad = None
    loss_fn().backward()
    rng = random.Random(seed)
    out = {}
    for name, p in named:
        auto = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = list(range(flat.numel()))
        if max_entries is not None and len(idx) > max_entries:
            idx = rng.sample(idx, max_entries)
        fd = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * eps)
        ad = auto[idx].double()
        denom = max(fd.norm().item(), ad.norm().item(), 1e-12)
        out[name] = (fd - ad).norm().item() / denom
    return out


def loop_separation(long_pts, short_pts):
    total = 0.0
    for a, b in zip(long_pts, short_pts):
        total += math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    return total / len(long_pts)


def loop_angle_variance(long_pts, short_pts):
    units = []
    for a, b in zip(long_pts, short_pts):
        u = [x - y for x, y in zip(a, b)]
        n = math.sqrt(sum(x * x for x in u))
        units.append([x / n for x in u])
    m, k = len(units), len(units[0])
    mean = [sum(u[j] for u in units) / m for j in range(k)]
    mn = math.sqrt(sum(x * x for x in mean))
    thetas = []
    for u in units:
        c = sum(u[j] * mean[j] for j in range(k)) / mn
        thetas.append(math.acos(max(-1.0, min(1.0, c))))
    tbar = sum(thetas) / m
    return sum((t - tbar) ** 2 for t in thetas) / (m - 1)


def eigh_projection(la, sa, k):
    x = np.vstack([la, sa])
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:k]
    comps = v[:, order].T
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return (la - x.mean(0)) @ comps.T, (sa - x.mean(0)) @ comps.T, w[order]
