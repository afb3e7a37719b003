"""Transfer attack: a uniform border plus two shared patch templates.

The clean image is framed by a border of constant patches. A "raise" template
is added to every border patch and a small "down" template to every interior
patch. Both are optimised on a surrogate so that border tokens climb the
importance ranking at every candidate layer, which makes compression at an
unknown layer and rate discard real content on a target model.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .caa import AttackDiverged, key_alignment, pairwise_logsig, scores_var
from .compressor import importance_scores, ref_positions
from .diffcore import Tape, Var
from .toyvlm import ModelWeights, forward


@dataclass(frozen=True)
class TransferConfig:
    border_width: int = 1
    eps_raise: float = 1.0
    eps_down: float = 16 / 255
    layers: tuple[int, ...] | None = None    # None -> 1..min(11, depth-1)
    alpha_raise: float = 1.0
    gamma_raise: float = 0.5
    alpha_down: float = 0.5
    gamma_down: float = 0.1
    iterations: int = 200
    step_raise: float = 4 / 255
    step_down: float = 1 / 255
    least_rate: float = 0.2       # |Omega_least| = ceil(least_rate * n_V_aug)
    most_rate: float = 0.2
    fill: float = 0.5
    ref_strategy: str = "final"
    seed: int = 0

    def __post_init__(self):
        if self.border_width < 1:
            raise ValueError("border_width must be >= 1")
        if self.eps_down > self.eps_raise or (self.eps_down == self.eps_raise and self.eps_raise > 0):
            raise ValueError("the down budget must be smaller than the raise budget")
        if self.eps_down < 0:
            raise ValueError("budgets must be non-negative")
        if not 0.0 <= self.fill <= 1.0:
            raise ValueError("fill must lie in [0, 1]")
        if self.layers is not None and (not self.layers or min(self.layers) < 1):
            raise ValueError("candidate layers are 1-based and nonempty")

    def candidate_layers(self, depth: int) -> tuple[int, ...]:
        layers = self.layers if self.layers is not None else tuple(range(1, min(11, depth - 1) + 1))
        if max(layers) > depth:
            raise ValueError(f"candidate layer {max(layers)} beyond surrogate depth {depth}")
        return tuple(sorted(set(layers)))


@dataclass(frozen=True)
class BorderLayout:
    side: int                 # G + 2w
    width: int
    border: np.ndarray        # flat indices of border patches, ascending
    interior: np.ndarray      # interior[p] = augmented index of original patch p

    @property
    def original_side(self) -> int:
        return self.side - 2 * self.width

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(side, side, 1) float masks for border and interior patches."""
        b = np.zeros(self.side * self.side)
        b[self.border] = 1.0
        b = b.reshape(self.side, self.side, 1)
        return b, 1.0 - b


def border_layout(grid_side: int, width: int) -> BorderLayout:
    if width < 1:
        raise ValueError("border width must be >= 1")
    side = grid_side + 2 * width
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    inside = (rr >= width) & (rr < width + grid_side) & (cc >= width) & (cc < width + grid_side)
    border = np.flatnonzero(~inside.ravel())
    r0, c0 = np.divmod(np.arange(grid_side * grid_side), grid_side)
    interior = (r0 + width) * side + (c0 + width)
    return BorderLayout(side, width, border, interior)


def augment_border(images, width: int, fill: float = 0.5) -> tuple[np.ndarray, BorderLayout]:
    """Place (B,)G,G,d_p images at offset (w, w) inside a constant-fill frame."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    G = batch.shape[1]
    layout = border_layout(G, width)
    out = np.full((batch.shape[0], layout.side, layout.side, batch.shape[-1]), float(fill))
    out[:, width:width + G, width:width + G] = batch
    return (out[0] if single else out), layout


@dataclass
class TemplatePair:
    raise_template: np.ndarray   # (d_p,) or (B, d_p) for per-image runs
    down_template: np.ndarray

    def __post_init__(self):
        self.raise_template = np.asarray(self.raise_template, dtype=np.float64)
        self.down_template = np.asarray(self.down_template, dtype=np.float64)

    @classmethod
    def zeros(cls, patch_dim: int, batch: int | None = None) -> "TemplatePair":
        shape = (patch_dim,) if batch is None else (batch, patch_dim)
        return cls(np.zeros(shape), np.zeros(shape))

    def __getitem__(self, i) -> "TemplatePair":
        return TemplatePair(self.raise_template[i], self.down_template[i])


def assemble_adversarial(images, layout: BorderLayout, templates: TemplatePair,
                         fill: float = 0.5) -> np.ndarray:
    """fill + raise on border patches, original + down inside, clipped to [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    aug, _ = augment_border(images, layout.width, fill)
    aug = aug[None] if single else aug
    border, inner = layout.masks()
    r = templates.raise_template.reshape(-1, 1, 1, aug.shape[-1])
    d = templates.down_template.reshape(-1, 1, 1, aug.shape[-1])
    out = np.clip(aug + border * r + inner * d, 0.0, 1.0)
    return out[0] if single else out


# --------------------------------------------------------------- partition

@dataclass
class TransferPartition:
    least_high: np.ndarray   # (B, a)
    least_low: np.ndarray    # (B, b)
    most_high: np.ndarray    # (B, c)
    most_low: np.ndarray     # (B, d)

    @property
    def least(self) -> np.ndarray:
        return np.concatenate([self.least_high, self.least_low], axis=1)

    @property
    def most(self) -> np.ndarray:
        return np.concatenate([self.most_high, self.most_low], axis=1)


def _halves(tokens: np.ndarray, mean_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split (B, n) tokens into higher and lower mean-score halves (low gets the odd one)."""
    s = np.take_along_axis(mean_scores, tokens, axis=1)
    order = np.argsort(-s, axis=1, kind="stable")
    ranked = np.take_along_axis(tokens, order, axis=1)
    h = tokens.shape[1] // 2
    return ranked[:, :h], ranked[:, h:]


def partition_from_layer_scores(scores: np.ndarray, n_least: int, n_most: int) -> TransferPartition:
    """``scores`` is (L_c, B, n_V). Tokens are ordered by mean rank across layers."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, None]
    n_v = scores.shape[-1]
    if n_least < 1 or n_most < 1:
        raise ValueError("partition sizes must be positive")
    if n_least + n_most > n_v:
        raise ValueError(f"sizes {n_least}+{n_most} exceed {n_v} visual tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n_v), axis=-1)
    mean_rank = ranks.mean(axis=0)                            # (B, n_V), 0 = most important
    by_rank = np.argsort(mean_rank, axis=-1, kind="stable")
    most = by_rank[:, :n_most]
    least = by_rank[:, n_v - n_least:]
    mean_scores = scores.mean(axis=0)
    lh, ll = _halves(least, mean_scores)
    mh, ml = _halves(most, mean_scores)
    return TransferPartition(lh, ll, mh, ml)


def layer_score_stack(weights: ModelWeights, images, prompts, layers, ref_strategy: str = "final") -> np.ndarray:
    """(len(layers), B, n_V) clean importance scores without compression."""
    tr = forward(weights, images, prompts, stop_after=max(layers))
    refs = ref_positions(ref_strategy, weights.config.prompt_len)
    return np.stack([importance_scores(tr.attn[l - 1].value, refs, tr.n_visual[l - 1]) for l in layers])


def partition_regions(weights: ModelWeights, aug_images, prompts, layers, sizes: tuple[int, int],
                      ref_strategy: str = "final") -> TransferPartition:
    n_least, n_most = sizes
    if n_least == 0 and n_most == 0:
        raise ValueError("empty partition")
    return partition_from_layer_scores(layer_score_stack(weights, aug_images, prompts, layers, ref_strategy),
                                       n_least, n_most)


# ------------------------------------------------------------------ losses

def loss_raise(scores: Var, queries: Var, keys: Var, part: TransferPartition, refs: np.ndarray,
               alpha: float, gamma: float) -> Var:
    """(B,) pull the low half of the least set above the high half of the most set."""
    pairs = _cross(part.least_low, part.most_high)
    out = -alpha * pairwise_logsig(scores, pairs)
    if gamma:
        out = out - gamma * key_alignment(queries, keys, part.least_low, refs)
    return out


def loss_down(scores: Var, queries: Var, keys: Var, part: TransferPartition, refs: np.ndarray,
              alpha: float, gamma: float) -> Var:
    """(B,) ranking anchor on the low-most half; its key alignment is suppressed."""
    pairs = _cross(part.most_low, part.least_high)
    out = -alpha * pairwise_logsig(scores, pairs)
    if gamma:
        out = out + gamma * key_alignment(queries, keys, part.most_low, refs)
    return out


def _cross(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    B = first.shape[0]
    return np.stack([np.repeat(first, second.shape[1], axis=1),
                     np.tile(second, (1, first.shape[1]))], axis=-1).reshape(B, -1, 2)


def transfer_objective(weights: ModelWeights, x: Var, prompts: np.ndarray, part: TransferPartition,
                       layers, cfg: TransferConfig) -> tuple[Var, list[Var]]:
    """(B,) mean over candidate layers of raise + down, plus the per-layer terms."""
    tr = forward(weights, x, prompts, stop_after=max(layers))
    refs = ref_positions(cfg.ref_strategy, weights.config.prompt_len)
    per_layer = []
    for l in layers:
        n_v = tr.n_visual[l - 1]
        s = scores_var(tr.attn[l - 1], refs, n_v)
        q, k = tr.queries[l - 1], tr.keys[l - 1][:, :n_v]
        per_layer.append(loss_raise(s, q, k, part, n_v + refs, cfg.alpha_raise, cfg.gamma_raise)
                         + loss_down(s, q, k, part, n_v + refs, cfg.alpha_down, cfg.gamma_down))
    total = per_layer[0]
    for t in per_layer[1:]:
        total = total + t
    return total * (1.0 / len(per_layer)), per_layer


@dataclass
class TransferResult:
    templates: TemplatePair
    layout: BorderLayout
    partition: TransferPartition
    loss_history: np.ndarray       # (iterations + 1, B) or (iterations + 1,) in batch mode
    layers: tuple[int, ...]


def tcaa_optimize(weights: ModelWeights, images, prompts, cfg: TransferConfig = TransferConfig(),
                  mode: str = "per_image") -> TransferResult:
    """Sign-gradient optimisation of the template pair on a surrogate.

    ``per_image`` gives every image its own pair (optimised jointly in one
    batch since the losses are independent); ``batch`` shares one pair and
    minimises the mean objective over the images.
    """
    if mode not in ("per_image", "batch"):
        raise ValueError(f"unknown mode {mode!r}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    prompts = np.asarray(prompts)
    if prompts.ndim == 1:
        prompts = np.broadcast_to(prompts, (images.shape[0], prompts.shape[0]))
    B, d_p = images.shape[0], images.shape[-1]
    layers = cfg.candidate_layers(weights.config.layers)
    aug, layout = augment_border(images, cfg.border_width, cfg.fill)
    n_v = layout.side ** 2
    sizes = (math.ceil(cfg.least_rate * n_v - 1e-9), math.ceil(cfg.most_rate * n_v - 1e-9))
    part = partition_regions(weights, aug, prompts, layers, sizes, cfg.ref_strategy)
    border_m, inner_m = layout.masks()
    n_t = 1 if mode == "batch" else B
    r = np.zeros((n_t, 1, 1, d_p))
    d = np.zeros((n_t, 1, 1, d_p))
    lo_r, hi_r = max(-cfg.eps_raise, -cfg.fill), min(cfg.eps_raise, 1.0 - cfg.fill)
    history = []
    for it in range(cfg.iterations + 1):
        tape = Tape()
        rv, dv = tape.leaf(r), tape.leaf(d)
        x = dc.clip(tape.const(aug) + rv * tape.const(border_m) + dv * tape.const(inner_m), 0.0, 1.0)
        per_sample, _ = transfer_objective(weights, x, prompts, part, layers, cfg)
        if not np.all(np.isfinite(per_sample.value)):
            raise AttackDiverged(it)
        history.append(per_sample.value.mean() if mode == "batch" else per_sample.value.copy())
        if it == cfg.iterations:
            break
        gr, gd = tape.gradient(dc.vsum(per_sample), [rv, dv])
        r = np.clip(r - cfg.step_raise * np.sign(gr), lo_r, hi_r)
        d = np.clip(d - cfg.step_down * np.sign(gd), -cfg.eps_down, cfg.eps_down)
    shape = (d_p,) if mode == "batch" else (B, d_p)
    return TransferResult(TemplatePair(r.reshape(shape), d.reshape(shape)), layout, part,
                          np.array(history), layers)


def border_rank(scores: np.ndarray, layout: BorderLayout) -> np.ndarray:
    """Mean rank position (0 = most important) of border tokens, per sample."""
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(scores.shape[-1]), axis=-1)
    return ranks[:, layout.border].mean(axis=-1)


# ------------------------------------------------------------- persistence

def save_templates(path, result_or_pair, layout: BorderLayout, cfg: TransferConfig,
                   surrogate_digest: str | None = None) -> None:
    pair = result_or_pair.templates if isinstance(result_or_pair, TransferResult) else result_or_pair
    doc = {
        "raise": pair.raise_template.tolist(), "down": pair.down_template.tolist(),
        "layout": {"side": layout.side, "width": layout.width, "grid_side": layout.original_side},
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "surrogate": surrogate_digest,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_templates(path) -> tuple[TemplatePair, BorderLayout, TransferConfig]:
    doc = json.loads(Path(path).read_text())
    lay = doc["layout"]
    c = doc["config"]
    if c.get("layers") is not None:
        c["layers"] = tuple(c["layers"])
    return (TemplatePair(doc["raise"], doc["down"]), border_layout(lay["grid_side"], lay["width"]),
            TransferConfig(**c))
