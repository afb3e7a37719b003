"""Rank-stability statistics between clean and perturbed importance scores."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import toyvlm
from .compressor import importance_scores, ref_positions


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score vectors must be 1-d and equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two scores")
    return a, b


def ordinal_ranks(scores) -> np.ndarray:
    """Rank 0 = highest score; ties go to the smaller index first."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(len(scores))
    return ranks


def kendall_tau(scores_a, scores_b) -> float:
    """Tau-a over the tie-broken orderings induced by the two score vectors."""
    a, b = _check_pair(scores_a, scores_b)
    ra, rb = ordinal_ranks(a), ordinal_ranks(b)
    # order items by ra, then count inversions of rb with a merge sort
    seq = rb[np.argsort(ra)].tolist()
    inv = _count_inversions(seq)
    m = len(seq)
    pairs = m * (m - 1) // 2
    return (pairs - 2 * inv) / pairs


def _count_inversions(seq: list[int]) -> int:
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    i = j = 0
    merged = []
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            merged.append(right[j])
            inv += len(left) - i
            j += 1
    merged += left[i:] + right[j:]
    seq[:] = merged
    return inv


def spearman_rho(scores_a, scores_b) -> float:
    a, b = _check_pair(scores_a, scores_b)
    d = ordinal_ranks(a) - ordinal_ranks(b)
    m = len(a)
    return 1.0 - 6.0 * float((d * d).sum()) / (m * (m * m - 1))


def top_k(scores, k: int) -> set[int]:
    return set(np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k].tolist())


def bottom_k(scores, k: int) -> set[int]:
    return set(np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")[:k].tolist())


def topk_preservation(clean_scores, pert_scores, k: int) -> float:
    a, b = _check_pair(clean_scores, pert_scores)
    _check_k(k, len(a))
    return len(top_k(a, k) & top_k(b, k)) / k


def botk_infiltration(clean_scores, pert_scores, k: int) -> float:
    a, b = _check_pair(clean_scores, pert_scores)
    _check_k(k, len(a))
    return len(bottom_k(a, k) & top_k(b, k)) / k


def _check_k(k: int, m: int) -> None:
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")


def default_k(n_visual: int) -> int:
    return math.ceil(n_visual / 4)


@dataclass
class RankStats:
    kendall_tau: float
    spearman_rho: float
    topk_preservation: float
    botk_infiltration: float
    k: int


def rank_stats(clean_scores, pert_scores, k: int) -> RankStats:
    return RankStats(kendall_tau(clean_scores, pert_scores), spearman_rho(clean_scores, pert_scores),
                     topk_preservation(clean_scores, pert_scores, k),
                     botk_infiltration(clean_scores, pert_scores, k), k)


def layer_scores(weights: toyvlm.ModelWeights, images, prompts, ref_strategy: str = "final") -> np.ndarray:
    """(L, B, n_V) importance scores at every layer of an uncompressed pass."""
    cfg = weights.config
    tr = toyvlm.forward(weights, images, prompts)
    refs = ref_positions(ref_strategy, cfg.prompt_len)
    return np.stack([importance_scores(a.value, refs, tr.n_visual[i]) for i, a in enumerate(tr.attn)])


def ranking_trace(weights: toyvlm.ModelWeights, clean_image, pert_image, prompt,
                  k: int | None = None) -> list[RankStats]:
    """Per-layer statistics for one (clean, perturbed) image pair."""
    clean_image = np.asarray(clean_image)
    pert_image = np.asarray(pert_image)
    if clean_image.shape != pert_image.shape:
        raise ValueError("clean and perturbed images differ in shape")
    n_v = clean_image.shape[0] * clean_image.shape[1]
    k = default_k(n_v) if k is None else k
    both = np.stack([clean_image, pert_image])
    sc = layer_scores(weights, both, np.broadcast_to(prompt, (2, len(prompt))))
    return [rank_stats(sc[l, 0], sc[l, 1], k) for l in range(sc.shape[0])]


def mean_trace(traces: list[list[RankStats]]) -> list[RankStats]:
    """Average a batch of per-layer traces field by field."""
    out = []
    for per_layer in zip(*traces):
        out.append(RankStats(*(float(np.mean([getattr(s, f) for s in per_layer]))
                               for f in ("kendall_tau", "spearman_rho", "topk_preservation",
                                         "botk_infiltration")), per_layer[0].k))
    return out


def trace_to_csv(trace: list[RankStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "tau", "rho", "preservation", "infiltration"])
    for l, s in enumerate(trace, start=1):
        w.writerow([l, f"{s.kendall_tau:.6f}", f"{s.spearman_rho:.6f}",
                    f"{s.topk_preservation:.6f}", f"{s.botk_infiltration:.6f}"])
    return buf.getvalue()
