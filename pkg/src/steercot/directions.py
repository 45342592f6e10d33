"""Length-direction extraction by difference-in-means, plus per-layer diagnostics.

Activations are arrays of shape (layer, pair, dim) with layer axis 0 holding
``h^(1)``. Diagnostics run in float64 on PCA-reduced features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import TinyDecoder, final_token_states
from .errors import CapacityError, DegenerateDataError, DegeneratePairError, InputError, SchemaError
from .tensorio import read_tensor_file, write_tensor_file

SCHEMA_VERSION = 1


@dataclass
class ContrastiveCorpus:
    """Paired long-cue / short-cue prompts for the same instruction."""

    long_prompts: list[list[int]]
    short_prompts: list[list[int]]
    instance_ids: list[str]
    filter_note: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.long_prompts) == len(self.short_prompts) == len(self.instance_ids):
            raise InputError("long, short and id lists must align one-to-one")
        if len(self.instance_ids) < 2:
            raise InputError("a contrastive corpus needs at least 2 pairs")

    def __len__(self) -> int:
        return len(self.instance_ids)


def capture_final_token_activations(model: TinyDecoder, corpus: ContrastiveCorpus, batch_size: int = 64):
    """Residual states at the final prompt token: two arrays (L+1, m, d)."""
    limit = model.config.max_context
    for i, (a, b) in enumerate(zip(corpus.long_prompts, corpus.short_prompts)):
        if max(len(a), len(b)) > limit:
            raise CapacityError(f"pair {i} ({corpus.instance_ids[i]}) exceeds max_context {limit}")
    long_s = final_token_states(model, corpus.long_prompts, batch_size)
    short_s = final_token_states(model, corpus.short_prompts, batch_size)
    return (
        long_s.transpose(0, 1).double().numpy(),
        short_s.transpose(0, 1).double().numpy(),
    )


@dataclass
class DirectionSet:
    per_pair: np.ndarray  # (layer, pair, dim)
    mean: np.ndarray  # (layer, dim)
    position: str = "final"

    @property
    def num_layers(self) -> int:
        return self.mean.shape[0]

    def layer(self, layer: int) -> np.ndarray:
        return self.mean[layer - 1]


def extract_directions(long_acts: np.ndarray, short_acts: np.ndarray) -> DirectionSet:
    long_acts = np.asarray(long_acts, dtype=np.float64)
    short_acts = np.asarray(short_acts, dtype=np.float64)
    if long_acts.shape != short_acts.shape or long_acts.ndim != 3:
        raise InputError(f"activation shapes differ or are not 3-axis: {long_acts.shape} vs {short_acts.shape}")
    u = long_acts - short_acts
    d = u.mean(axis=1)
    if not (np.isfinite(u).all() and np.isfinite(d).all()):
        raise InputError("non-finite activations")
    return DirectionSet(per_pair=u, mean=d)


def save_directions(path: str | Path, ds: DirectionSet, extra: dict | None = None) -> None:
    header = {"kind": "directions", "schema_version": SCHEMA_VERSION, "position": ds.position, **(extra or {})}
    write_tensor_file(path, header, {"mean": ds.mean.astype(np.float32), "per_pair": ds.per_pair.astype(np.float32)})


def load_directions(path: str | Path) -> tuple[DirectionSet, dict]:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "directions" or header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: not a version-{SCHEMA_VERSION} direction file")
    ds = DirectionSet(
        per_pair=tensors["per_pair"].astype(np.float64),
        mean=tensors["mean"].astype(np.float64),
        position=header.get("position", "final"),
    )
    return ds, header


# ---------------------------------------------------------------------------
# PCA and metrics


@dataclass
class PcaFit:
    components: np.ndarray  # (k, d) unit rows
    center: np.ndarray  # (d,)
    explained_variance: np.ndarray  # (k,)
    total_variance: float

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) @ self.components.T


def fit_pca(x: np.ndarray, n_components: int = 2) -> PcaFit:
    """Top principal components of the rows of ``x`` (mean-centered).

    Each component's sign makes its largest-magnitude coordinate positive.
    Singular values below round-off are reported as exactly zero variance.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    center = x.mean(axis=0)
    xc = x - center
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(xc.shape) * np.finfo(np.float64).eps * 10
    s = np.where(s > tol, s, 0.0)
    k = min(n_components, vt.shape[0])
    comps = vt[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    denom = max(n - 1, 1)
    ev = np.zeros(n_components)
    ev[:k] = s[:k] ** 2 / denom
    if k < n_components:
        comps = np.vstack([comps, np.zeros((n_components - k, x.shape[1]))])
    return PcaFit(comps, center, ev, float((xc**2).sum() / denom))


@dataclass
class Projection:
    long: np.ndarray  # (m, k)
    short: np.ndarray  # (m, k)
    basis: np.ndarray  # (k, d)
    explained_variance: np.ndarray


def pca_project(long_acts: np.ndarray, short_acts: np.ndarray, layer: int, n_components: int = 2) -> Projection:
    """Fit PCA on pooled long+short states at ``layer`` (1-based) and project both."""
    la = np.asarray(long_acts, dtype=np.float64)[layer - 1]
    sa = np.asarray(short_acts, dtype=np.float64)[layer - 1]
    if la.shape[0] < 2:
        raise InputError("pca_project needs at least 2 pairs")
    fit = fit_pca(np.vstack([la, sa]), n_components)
    if np.count_nonzero(fit.explained_variance) < n_components:
        raise DegenerateDataError(
            f"layer {layer}: pooled activations have fewer than {n_components} nonzero singular values"
        )
    return Projection(fit.project(la), fit.project(sa), fit.components, fit.explained_variance)


def separation_strength(long_pts: np.ndarray, short_pts: np.ndarray) -> float:
    """Mean L2 distance between paired projected points."""
    diff = np.asarray(long_pts, dtype=np.float64) - np.asarray(short_pts, dtype=np.float64)
    return float(np.linalg.norm(diff, axis=1).mean())


def angle_variance(long_pts: np.ndarray, short_pts: np.ndarray) -> float:
    """Sample variance (radians^2) of each pair direction's angle to the mean direction."""
    diff = np.asarray(long_pts, dtype=np.float64) - np.asarray(short_pts, dtype=np.float64)
    m = diff.shape[0]
    if m < 2:
        raise InputError("angle_variance needs at least 2 pairs")
    norms = np.linalg.norm(diff, axis=1)
    for i, nrm in enumerate(norms):
        if nrm == 0:
            raise DegeneratePairError(i)
    unit = diff / norms[:, None]
    v = unit.mean(axis=0)
    vn = np.linalg.norm(v)
    if vn == 0:
        raise DegenerateDataError("pair directions cancel: zero mean direction")
    theta = np.arccos(np.clip(unit @ (v / vn), -1.0, 1.0))
    return float(((theta - theta.mean()) ** 2).sum() / (m - 1))


@dataclass
class LayerDiagnostics:
    pca_long: list[np.ndarray]
    pca_short: list[np.ndarray]
    separation: list[float]
    angle_variance: list[float | None]  # None where the pair directions are degenerate
    pca_basis: list[np.ndarray]
    anchor_layer: int | None = None

    @property
    def num_layers(self) -> int:
        return len(self.separation)


def layer_diagnostics(long_acts: np.ndarray, short_acts: np.ndarray, n_components: int = 2) -> LayerDiagnostics:
    n_layers = np.asarray(long_acts).shape[0]
    out = LayerDiagnostics([], [], [], [], [])
    for layer in range(1, n_layers + 1):
        try:
            proj = pca_project(long_acts, short_acts, layer, n_components)
        except DegenerateDataError:
            la = np.asarray(long_acts, dtype=np.float64)[layer - 1]
            sa = np.asarray(short_acts, dtype=np.float64)[layer - 1]
            fit = fit_pca(np.vstack([la, sa]), n_components)
            proj = Projection(fit.project(la), fit.project(sa), fit.components, fit.explained_variance)
        out.pca_long.append(proj.long)
        out.pca_short.append(proj.short)
        out.pca_basis.append(proj.basis)
        out.separation.append(separation_strength(proj.long, proj.short))
        try:
            out.angle_variance.append(angle_variance(proj.long, proj.short))
        except DegenerateDataError:
            out.angle_variance.append(None)
    return out


def detect_anchor_layer(
    diag: LayerDiagnostics, tau_sep: float = 0.5, tau_ang: float = 0.05, persist: int = 3
) -> int | None:
    """Smallest layer l such that layers [l, l+persist) all have separation >= tau_sep * max
    separation and angle variance <= tau_ang. Returns a 1-based layer or None."""
    sep = diag.separation
    top = max(sep) if sep else 0.0
    if top <= 0:
        return None
    ok = [
        s >= tau_sep * top and a is not None and a <= tau_ang for s, a in zip(sep, diag.angle_variance)
    ]
    for start in range(len(ok) - persist + 1):
        if all(ok[start : start + persist]):
            return start + 1
    return None


def write_diagnostics(path: str | Path, diag: LayerDiagnostics) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i in range(diag.num_layers):
            row = {
                "schema_version": SCHEMA_VERSION,
                "layer": i + 1,
                "separation": diag.separation[i],
                "angle_variance": diag.angle_variance[i],
                "anchor": diag.anchor_layer == i + 1,
                "pca_points_long": diag.pca_long[i].tolist(),
                "pca_points_short": diag.pca_short[i].tolist(),
                "pca_basis": diag.pca_basis[i].tolist(),
            }
            f.write(json.dumps(row) + "\n")


def read_diagnostics(path: str | Path) -> LayerDiagnostics:
    diag = LayerDiagnostics([], [], [], [], [])
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("schema_version") != SCHEMA_VERSION:
                raise SchemaError(f"{path}: unsupported diagnostics schema {row.get('schema_version')}")
            diag.pca_long.append(np.asarray(row["pca_points_long"], dtype=np.float64))
            diag.pca_short.append(np.asarray(row["pca_points_short"], dtype=np.float64))
            diag.pca_basis.append(np.asarray(row["pca_basis"], dtype=np.float64))
            diag.separation.append(row["separation"])
            diag.angle_variance.append(row["angle_variance"])
            if row.get("anchor"):
                diag.anchor_layer = row["layer"]
    return diag
