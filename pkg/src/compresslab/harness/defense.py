"""Region-removal defense: blank out patches picked by an importance ranking."""
from __future__ import annotations

import math

import numpy as np

from .. import toyvlm as tv
from ..compressor import CompressionConfig, importance_scores, ref_positions
from .metrics import hook_factory


def mean_patch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(-1, images.shape[-1]).mean(axis=0)


def removal_mask(scores: np.ndarray, mode: str, fraction: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """(B, n_V) boolean mask of patches to replace."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must lie in (0, 1), got {fraction}")
    scores = np.atleast_2d(scores)
    B, n = scores.shape
    k = math.floor(fraction * n + 1e-9)   # fraction -> 0 masks nothing
    if mode == "most":
        picked = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    elif mode == "least":
        picked = np.argsort(scores, axis=1, kind="stable")[:, :k]
    elif mode == "random":
        rng = rng or np.random.default_rng(0)
        picked = np.stack([rng.choice(n, size=k, replace=False) for _ in range(B)])
    else:
        raise ValueError(f"unknown mask source {mode!r}")
    mask = np.zeros((B, n), dtype=bool)
    np.put_along_axis(mask, picked, True, axis=1)
    return mask


def defended_images(weights: tv.ModelWeights, images: np.ndarray, prompts: np.ndarray, mode: str,
                    fraction: float, fill: np.ndarray, ranking_weights: tv.ModelWeights | None = None,
                    layer: int = 2, seed: int = 0) -> np.ndarray:
    """Copy of ``images`` with the selected patches replaced by ``fill``.

    The ranking comes from an uncompressed pass of ``ranking_weights``
    (default: the victim itself) at ``layer``.
    """
    images = np.asarray(images, dtype=np.float64)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must lie in (0, 1), got {fraction}")
    ranker = ranking_weights or weights
    scores = None
    if mode != "random":
        tr = tv.forward(ranker, images, prompts, stop_after=layer)
        scores = importance_scores(tr.attn[-1].value, ref_positions("final", ranker.config.prompt_len),
                                   tr.n_visual[-1])
    else:
        scores = np.zeros((images.shape[0], images.shape[1] * images.shape[2]))
    mask = removal_mask(scores, mode, fraction, np.random.default_rng(seed))
    G = images.shape[1]
    out = images.copy()
    out[mask.reshape(-1, G, G)] = fill
    return out


def region_removal_defense(weights: tv.ModelWeights, images: np.ndarray, prompts: np.ndarray, mode: str,
                           fraction: float, config: CompressionConfig | None = None,
                           ranking_weights: tv.ModelWeights | None = None, fill: np.ndarray | None = None,
                           layer: int = 2, seed: int = 0) -> np.ndarray:
    """Defended predictions under the given compression state."""
    fill = mean_patch(images) if fill is None else fill
    safe = defended_images(weights, images, prompts, mode, fraction, fill, ranking_weights, layer, seed)
    return tv.predict(weights, safe, np.asarray(prompts), hook_factory(config, weights.config.prompt_len))
