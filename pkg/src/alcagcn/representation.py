"""Comparing-unit pooling, the global-average embedding and attention re-weighting.

Unit ordering is temporal-major, then body part, then performer: with the
default ``both`` division unit ``j`` is ``(i * R + r) * M + m`` for temporal
section ``i`` (start, middle, end), part ``r`` (graph part order: head, hands,
torso, legs) and performer ``m``.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .topology import SkeletonGraph

DIVISIONS = ("both", "spatial_only", "temporal_only", "none")
CONSTRAINTS = ("full", "no_adl", "no_global")
NUM_SECTIONS = 3


def temporal_sections(n_frames: int, n_sections: int = NUM_SECTIONS) -> list[range]:
    """Section ``i`` spans ``floor(i*T/3) .. floor((i+1)*T/3)``; the remainder lands at the end."""
    bounds = [(i * n_frames) // n_sections for i in range(n_sections + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(n_sections)]


def pooling_weights(n_frames: int, graph: SkeletonGraph, division: str) -> tuple[np.ndarray, np.ndarray]:
    """Averaging matrices: temporal (I, T) and spatial (R, U), rows summing to 1."""
    if division not in DIVISIONS:
        raise ContractError(f"unknown division mode {division!r}")
    if division in ("both", "temporal_only"):
        secs = temporal_sections(n_frames)
        if any(len(s) == 0 for s in secs):
            raise ContractError(f"{n_frames} frames cannot be split into {NUM_SECTIONS} sections")
        tw = np.zeros((len(secs), n_frames))
        for i, s in enumerate(secs):
            tw[i, list(s)] = 1.0 / len(s)
    else:
        tw = np.full((1, n_frames), 1.0 / n_frames)
    u = graph.num_joints
    if division in ("both", "spatial_only"):
        pw = np.zeros((len(graph.parts), u))
        for r, members in enumerate(graph.parts.values()):
            pw[r, list(members)] = 1.0 / len(members)
    else:
        pw = np.full((1, u), 1.0 / u)
    return tw, pw


def unit_labels(graph: SkeletonGraph, division: str, n_performers: int = 2) -> list[tuple[str, str, int]]:
    """(section, part, performer) for every unit in canonical order."""
    secs = ("start", "middle", "end") if division in ("both", "temporal_only") else ("all",)
    parts = graph.part_names if division in ("both", "spatial_only") else ("body",)
    return [(s, p, m) for s in secs for p in parts for m in range(n_performers)]


def pool_units(f: Tensor, graph: SkeletonGraph, division: str, performer_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Segmented mean pooling of ``f`` (B, D, T, U, M) into units (B, J, D) and a (B, J) validity mask."""
    b, d, t, u, m = f.shape
    tw, pw = pooling_weights(t, graph, division)
    g = T.einsum("bdtum,it,ru->birmd", f, Tensor(tw), Tensor(pw))
    n_units = tw.shape[0] * pw.shape[0] * m
    g = T.reshape(g, (b, n_units, d))
    mask = np.broadcast_to(np.asarray(performer_mask, bool)[:, None, None, :], (b, tw.shape[0], pw.shape[0], m))
    return g, mask.reshape(b, n_units).copy()


def global_embedding(f: Tensor, performer_mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``f`` (B, D, T, U, M) over frames, joints and present performers -> (B, D)."""
    b, d, t, u, m = f.shape
    if performer_mask is None:
        performer_mask = np.ones((b, m), dtype=bool)
    pm = np.asarray(performer_mask, dtype=np.float64)
    n_valid = pm.sum(axis=1, keepdims=True)
    if (n_valid == 0).any():
        raise ContractError("sample without any present performer")
    w = pm / (n_valid * t * u)
    return T.einsum("bdtum,bm->bd", f, Tensor(w))


def init_adl_params(d_feat: int, d_emb: int, rng: np.random.Generator, head_scale: float = 1.0) -> dict[str, Tensor]:
    """Key/query heads uniform in +-1/sqrt(d_feat); value head near identity; global projection identity.

    ``head_scale`` multiplies the value head and the global projection; 0 makes
    every representation vanish (a symmetric start where all distances tie).
    """
    lim = 1.0 / math.sqrt(d_feat)
    v = np.eye(d_feat) + rng.uniform(-0.1 * lim, 0.1 * lim, (d_feat, d_feat))
    return {
        "adl.K": Tensor(rng.uniform(-lim, lim, (d_emb, d_feat)), requires_grad=True),
        "adl.Q": Tensor(rng.uniform(-lim, lim, (d_emb, d_feat)), requires_grad=True),
        "adl.V": Tensor(head_scale * v, requires_grad=True),
        "adl.C": Tensor(head_scale * np.eye(d_feat), requires_grad=True),
    }


def attention_scores(G: Tensor, unit_mask: np.ndarray, K: Tensor, Q: Tensor) -> Tensor:
    """Row-stochastic (B, J, J) attention: unit ``i`` attends over valid units ``j``."""
    d_emb = K.shape[0]
    keys = T.einsum("ed,bjd->bje", K, G)
    queries = T.einsum("ed,bjd->bje", Q, G)
    logits = T.einsum("bie,bje->bij", queries, keys) * (1.0 / math.sqrt(d_emb))
    penalty = np.where(np.asarray(unit_mask, bool)[:, None, :], 0.0, -np.inf)
    return T.softmax_lastdim(logits + Tensor(penalty))


def adl_transform(G: Tensor, unit_mask: np.ndarray, f_glob: Tensor | None, params: dict[str, Tensor],
                  constraints: str = "full", return_attention: bool = False):
    """Attention re-weighting of comparing units plus the projected global embedding.

    ``full``: ``A (V G) + C f_glob``; ``no_adl``: ``G + C f_glob``;
    ``no_global``: ``A (V G)``.
    """
    if constraints not in CONSTRAINTS:
        raise ContractError(f"unknown constraint mode {constraints!r}")
    unit_mask = np.asarray(unit_mask, bool)
    if not unit_mask.any(axis=1).all():
        raise ContractError("every representation needs at least one valid unit")
    attn = None
    if constraints == "no_adl":
        out = G
    else:
        attn = attention_scores(G, unit_mask, params["adl.K"], params["adl.Q"])
        values = T.einsum("ed,bjd->bje", params["adl.V"], G)
        out = T.einsum("bij,bje->bie", attn, values)
    if constraints != "no_global":
        if f_glob is None:
            raise ContractError("global constraint requested without f_glob")
        proj = T.einsum("ed,bd->be", params["adl.C"], f_glob)
        out = out + T.reshape(proj, (proj.shape[0], 1, proj.shape[1]))
    return (out, attn) if return_attention else out
