"""Retention/effectiveness metrics and accuracy helpers under compression."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import toyvlm as tv
from ..compressor import CompressionConfig, CompressionHook, make_hook


@dataclass(frozen=True)
class MetricsRecord:
    m_cl_nc: float
    m_cl_c: float
    m_adv_nc: float
    m_adv_c: float
    upr: float
    cae: float
    csg: float
    provenance: dict = field(default_factory=dict, compare=False)

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in ("m_cl_nc", "m_cl_c", "m_adv_nc", "m_adv_c", "upr", "cae", "csg")}
        out.update(self.provenance)
        return out


def compute_metrics(m_cl_nc: float, m_cl_c: float, m_adv_nc: float, m_adv_c: float,
                    provenance: dict | None = None) -> MetricsRecord:
    """UPR = adv/clean without compression, CAE = 1 - adv/clean with it, CSG = UPR + CAE - 1."""
    vals = (m_cl_nc, m_cl_c, m_adv_nc, m_adv_c)
    if any(not 0.0 <= v <= 1.0 for v in vals):
        raise ValueError(f"performance values must lie in [0, 1], got {vals}")
    if m_cl_nc == 0 or m_cl_c == 0:
        raise ValueError("clean performance is zero; retention ratios are undefined")
    upr = m_adv_nc / m_cl_nc
    kept_c = m_adv_c / m_cl_c
    cae = 1.0 - kept_c
    return MetricsRecord(m_cl_nc, m_cl_c, m_adv_nc, m_adv_c, upr, cae, upr - kept_c, dict(provenance or {}))


def hook_factory(config: CompressionConfig | None, n_text: int) -> Callable[[], CompressionHook | None] | None:
    if config is None:
        return None
    return lambda: make_hook(config, n_text)


def accuracy_under(weights: tv.ModelWeights, ds: tv.Dataset, images: np.ndarray | None = None,
                   config: CompressionConfig | None = None) -> float:
    """Accuracy of ``images`` (default: the dataset's own) under a compression state."""
    return tv.accuracy(weights, ds, hook_factory(config, weights.config.prompt_len), images=images)


def predict_with_ranking(weights: tv.ModelWeights, images: np.ndarray, prompts: np.ndarray,
                         ranking_images: np.ndarray, config: CompressionConfig,
                         batch_size: int = 128) -> np.ndarray:
    """Predictions on ``images`` while compression ranks tokens as it would on ``ranking_images``."""
    n_t = weights.config.prompt_len
    preds = []
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        ref_hook = make_hook(config, n_t)
        tv.forward(weights, ranking_images[sl], prompts[sl], ref_hook)
        overrides = {o.layer: o.scores for o in ref_hook.outcomes}
        tr = tv.forward(weights, images[sl], prompts[sl], make_hook(config, n_t, overrides=overrides))
        preds.append(tv.decode_answer(tr.final_logits))
    return np.concatenate(preds)


def robustness_gap(weights: tv.ModelWeights, ds: tv.Dataset, perturb: Callable[[np.ndarray], np.ndarray],
                   config: CompressionConfig | None = None) -> float:
    """Clean minus perturbed accuracy under one compression state; lies in [-1, 1]."""
    clean = accuracy_under(weights, ds, None, config)
    pert = accuracy_under(weights, ds, perturb(ds.images), config)
    return clean - pert
