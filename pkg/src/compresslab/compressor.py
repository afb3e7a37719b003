"""Attention-based visual-token compression and configuration enumeration.

Scores are the mean attention from reference text tokens (and over heads) to
each visual token. A stage at 1-based layer ``l`` keeps ``ceil(r * n_V)``
tokens of the *original* visual count and takes effect on the input of layer
``l + 1``. Kept tokens are returned in ascending original order.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .toyvlm import LayerState

Stage = tuple[int, float]


_SNAP = Fraction(1, 10 ** 9)


def retained_count(rate: float, n_visual: int) -> int:
    """ceil(rate * n_V); products within 1e-9 above an integer snap down (5/6 * 6 -> 5)."""
    return math.ceil(_frac(rate) * n_visual - _SNAP)


def _frac(r) -> Fraction:
    return r if isinstance(r, Fraction) else Fraction(str(r)) if isinstance(r, float) else Fraction(r)


def ref_positions(strategy: str, n_text: int, ref_indices: Sequence[int] | None = None) -> np.ndarray:
    """Text-relative reference positions for ``final`` or ``multi`` strategies."""
    if strategy == "final":
        return np.array([n_text - 1])
    if strategy == "multi":
        idx = np.arange(n_text) if ref_indices is None else np.asarray(ref_indices)
        if idx.size == 0:
            raise ValueError("empty reference set")
        return idx
    raise ValueError(f"unknown ref strategy {strategy!r}")


def importance_scores(attn: np.ndarray, ref_indices: Sequence[int], n_visual: int) -> np.ndarray:
    """Mean attention from reference text rows to each visual column.

    ``attn`` is (H, n, n) or (B, H, n, n); visual tokens occupy the first
    ``n_visual`` positions and ``ref_indices`` are offsets into the text part.
    """
    ref = np.asarray(ref_indices, dtype=np.int64)
    if ref.size == 0:
        raise ValueError("importance_scores needs at least one reference token")
    attn = np.asarray(attn)
    n = attn.shape[-1]
    if np.any(ref < 0) or np.any(n_visual + ref >= n):
        raise ValueError("reference indices must address text positions")
    rows = attn[..., n_visual + ref, :n_visual]          # (..., H, R, n_V)
    return rows.mean(axis=(-3, -2))


def compress(scores: np.ndarray, rate: float, n_visual_original: int, mode: str = "top") -> np.ndarray:
    """Positions of the kept tokens, ascending. Ties prefer the smaller index.

    ``scores`` may be (m,) or (B, m); the result has the matching rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] == 0:
        raise ValueError("compress needs a nonempty score vector")
    if not 0.0 < float(rate) <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    k = retained_count(rate, n_visual_original)
    m = scores.shape[-1]
    if k > m:
        raise ValueError(f"cannot keep {k} tokens out of {m} survivors")
    if mode == "top":
        key = -scores
    elif mode == "bottom":
        key = scores
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    # stable sort on the key keeps index order among ties
    order = np.argsort(key, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


@dataclass(frozen=True)
class CompressionConfig:
    stages: tuple[Stage, ...]
    ref_strategy: str = "final"
    ref_indices: tuple[int, ...] | None = None
    selection_mode: str = "top"
    head_aggregation: str = "mean"

    def __post_init__(self):
        stages = tuple((int(l), float(r)) for l, r in self.stages)
        object.__setattr__(self, "stages", stages)
        for l, r in stages:
            if l < 1:
                raise ValueError("stage layers are 1-based")
            if not 0.0 < r <= 1.0:
                raise ValueError(f"stage rate {r} outside (0, 1]")
        for (l0, r0), (l1, r1) in zip(stages, stages[1:]):
            if l1 <= l0:
                raise ValueError("stage layers must be strictly increasing")
            if r1 >= r0:
                raise ValueError("each stage must retain fewer tokens than the previous one")
        if self.selection_mode not in ("top", "bottom"):
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")
        if self.head_aggregation != "mean":
            raise ValueError("only mean head aggregation is supported")
        ref_positions(self.ref_strategy, 1 + max(self.ref_indices or (0,)), self.ref_indices)

    @classmethod
    def fastv(cls, layer: int = 2, rate: float = 0.2) -> "CompressionConfig":
        return cls(((layer, rate),))

    @classmethod
    def pdrop(cls, stages: Sequence[Stage] = ((2, 0.4), (4, 0.2), (6, 0.1))) -> "CompressionConfig":
        return cls(tuple(stages))

    @classmethod
    def sparsevlm(cls, stages: Sequence[Stage] = ((2, 0.4), (4, 0.2), (6, 0.1)),
                  ref_indices: Sequence[int] | None = None) -> "CompressionConfig":
        return cls(tuple(stages), ref_strategy="multi",
                   ref_indices=None if ref_indices is None else tuple(ref_indices))

    def validate_for(self, n_visual: int, depth: int) -> None:
        counts = [retained_count(r, n_visual) for _, r in self.stages]
        for a, b in zip(counts, counts[1:]):
            if b >= a:
                raise ValueError(f"no-op stage: retained count {b} does not drop below {a}")
        if self.stages and self.stages[-1][0] >= depth:
            raise ValueError(f"stage layer {self.stages[-1][0]} is beyond model depth {depth}")

    def describe(self) -> str:
        return "[" + ", ".join(f"({l}, {_fmt_rate(r)})" for l, r in self.stages) + "]"


@dataclass
class StageOutcome:
    layer: int
    scores: np.ndarray        # (B, m) scores of the surviving tokens at this stage
    kept: np.ndarray          # (B, k) original patch indices, ascending
    count: int


class CompressionHook:
    """Per-layer hook for :func:`toyvlm.forward` implementing a config.

    ``overrides`` maps a stage layer to externally supplied scores of shape
    (B, m) over the tokens surviving at that stage; they replace the model's
    own attention scores there.
    """

    def __init__(self, config: CompressionConfig, n_text: int,
                 overrides: dict[int, np.ndarray] | None = None):
        self.config = config
        self.refs = ref_positions(config.ref_strategy, n_text, config.ref_indices)
        self.rates = dict(config.stages)
        self.overrides = overrides or {}
        self.outcomes: list[StageOutcome] = []

    def __call__(self, state: LayerState) -> np.ndarray | None:
        rate = self.rates.get(state.layer)
        if rate is None:
            return None
        if state.layer in self.overrides:
            scores = np.asarray(self.overrides[state.layer], dtype=np.float64)
            if scores.ndim == 1:
                scores = scores[None]
            if scores.shape[-1] != state.n_visual:
                raise ValueError(f"override at layer {state.layer} has {scores.shape[-1]} scores "
                                 f"for {state.n_visual} surviving tokens")
            scores = np.broadcast_to(scores, (state.attn.shape[0], state.n_visual))
        else:
            scores = importance_scores(state.attn, self.refs, state.n_visual)
        keep = compress(scores, rate, state.n_visual_original, self.config.selection_mode)
        self.outcomes.append(StageOutcome(state.layer, scores,
                                          np.take_along_axis(state.index_map, keep, axis=1),
                                          keep.shape[-1]))
        return keep


def make_hook(config: CompressionConfig | None, n_text: int, depth: int | None = None,
              n_visual: int | None = None,
              overrides: dict[int, np.ndarray] | None = None) -> CompressionHook | None:
    if config is None or not config.stages:
        return None
    if depth is not None and n_visual is not None:
        config.validate_for(n_visual, depth)
    return CompressionHook(config, n_text, overrides)


# ------------------------------------------------------------- enumeration

RATE_GRID = tuple(Fraction(i, 10) for i in range(1, 10))
RATE_FLOOR = Fraction(1, 10)


@dataclass(frozen=True)
class EnumeratedConfig:
    stages: tuple[tuple[int, Fraction], ...]
    avg_rate: Fraction

    def describe(self) -> str:
        return "[" + ", ".join(f"({l}, {_fmt_rate(r)})" for l, r in self.stages) + "]"

    def to_compression(self, **kw) -> CompressionConfig:
        return CompressionConfig(tuple((l, float(r)) for l, r in self.stages), **kw)


def _fmt_rate(r) -> str:
    return format(float(r), "g")


def avg_retention(stages: Iterable[tuple[int, float]], depth: int) -> Fraction:
    """Mean per-layer visual retention over ``depth`` layers, exactly.

    Layers up to the first stage run at 1; after stage ``i`` the rate is
    ``r_i`` until the next stage takes over.
    """
    stages = [(int(l), _frac(r)) for l, r in stages]
    if not stages:
        return Fraction(1)
    if stages[-1][0] > depth:
        raise ValueError("stage layer beyond depth")
    total = Fraction(stages[0][0])
    bounds = [l for l, _ in stages[1:]] + [depth]
    for (l, r), nxt in zip(stages, bounds):
        total += (nxt - l) * r
    return total / depth


def enumerate_configs(depth: int, max_avg: float, min_avg: float | None = None, *,
                      max_stages: int = 2, min_gap: int = 4, first_layer: int = 2) -> list[EnumeratedConfig]:
    """All schedules satisfying the deployment constraints, by depth-first search.

    First rate from {0.1, ..., 0.9}; each later rate is ``max(prev / 2, 0.1)``
    and must strictly drop; layers start at ``first_layer`` and are at least
    ``min_gap`` apart. Sorted by average rate, then stages.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2")
    hi = _frac(max_avg)
    lo = Fraction(0) if min_avg is None else _frac(min_avg)
    if not 0 < hi <= 1 or not 0 <= lo <= hi:
        raise ValueError(f"average-rate bounds must satisfy 0 <= min <= max <= 1, got [{lo}, {hi}]")
    if max_stages < 1 or min_gap < 1:
        raise ValueError("max_stages and min_gap must be >= 1")
    found: list[EnumeratedConfig] = []

    def dfs(stages: list[tuple[int, Fraction]]):
        if stages:
            avg = avg_retention(stages, depth)
            if lo <= avg <= hi:
                found.append(EnumeratedConfig(tuple(stages), avg))
            if len(stages) == max_stages:
                return
            l_prev, r_prev = stages[-1]
            r_next = max(r_prev / 2, RATE_FLOOR)
            if r_next >= r_prev:
                return
            for l in range(l_prev + min_gap, depth):
                dfs(stages + [(l, r_next)])
            return
        for r in RATE_GRID:
            for l in range(first_layer, depth):
                dfs([(l, r)])

    dfs([])
    found.sort(key=lambda c: (c.avg_rate, c.stages))
    return found


def layer_coverage(candidate_layers: Iterable[int], configs: Sequence[EnumeratedConfig],
                   effective: tuple[float, float] = (0.1, 0.4)) -> float:
    """Share of configs whose earliest stage with an effective rate is a candidate layer."""
    if not configs:
        raise ValueError("layer_coverage needs at least one config")
    cand = set(candidate_layers)
    lo, hi = _frac(effective[0]), _frac(effective[1])
    hits = 0
    for cfg in configs:
        first = next((l for l, r in cfg.stages if lo <= r <= hi), None)
        hits += first is not None and first in cand
    return hits / len(configs)


def configs_to_csv(configs: Sequence[EnumeratedConfig]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stages", "avg_rate"])
    for c in configs:
        w.writerow([c.describe(), f"{float(c.avg_rate):.3f}"])
    return buf.getvalue()
