"""White-box compression-aware attack plus random-noise and vanilla baselines.

The attack perturbs only the patches the clean model ranks least important at
the target layer, and optimises a pairwise ranking loss (least above most,
and reversed order inside the least set), a key/query alignment term and a
representation-erasure term with sign-gradient PGD. All functions work on a
batch: the loss is a sum of independent per-sample losses, so one backward
pass yields every sample's gradient.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .compressor import importance_scores, ref_positions
from .diffcore import Tape, Var
from .toyvlm import ModelWeights, fnv1a64, forward


class AttackDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite attack loss at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 32 / 255
    step: float = 2 / 255
    iterations: int = 100
    layer: int = 2
    n_least: int | None = None       # None -> ceil(attack_rate * n_V)
    n_most: int | None = None
    attack_rate: float = 0.2
    groups: int = 4
    alpha: float = 1.0
    beta: float = 0.5
    lambda_erase: float = 0.1
    lambda_key: float = 0.5
    ref_strategy: str = "final"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")

    def sizes(self, n_visual: int) -> tuple[int, int]:
        k = math.ceil(self.attack_rate * n_visual - 1e-9)
        n_least = k if self.n_least is None else self.n_least
        n_most = k if self.n_most is None else self.n_most
        if n_least + n_most > n_visual:
            raise ValueError("n_least + n_most exceeds the visual token count")
        if not 1 <= self.groups <= max(n_least, 1):
            raise ValueError("groups must lie in [1, n_least]")
        return n_least, n_most


@dataclass
class RegionPartition:
    omega_least: np.ndarray        # (B, n_least) clean-score descending
    omega_most: np.ndarray         # (B, n_most) clean-score descending
    least_groups: list[np.ndarray]  # n_g arrays (B, size); group 0 = most informative


@dataclass
class PairSets:
    lm: np.ndarray   # (B, P, 2): (least, most)
    ll: np.ndarray   # (B, Q, 2): (lower-group token, higher-group token)


@dataclass
class Perturbation:
    delta: np.ndarray              # (B, G, G, d_p)
    support: np.ndarray            # (B, n_V) bool
    epsilon: float
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (iters+1, B)

    def apply(self, images: np.ndarray) -> np.ndarray:
        return np.clip(images + self.delta, 0.0, 1.0)


# ------------------------------------------------------------------ regions

def split_groups(omega_least: np.ndarray, groups: int) -> list[np.ndarray]:
    """Contiguous slices of a score-descending index list; the last absorbs the remainder."""
    n = omega_least.shape[-1]
    size = n // groups
    bounds = [g * size for g in range(groups)] + [n]
    return [omega_least[..., bounds[g]:bounds[g + 1]] for g in range(groups)]


def partition_from_scores(scores: np.ndarray, n_least: int, n_most: int, groups: int) -> RegionPartition:
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind="stable")
    most = order[:, :n_most]
    least = order[:, scores.shape[1] - n_least:]
    return RegionPartition(least, most, split_groups(least, groups))


def clean_scores(weights: ModelWeights, images, prompts, layer: int, ref_strategy: str = "final"):
    tr = forward(weights, images, prompts, stop_after=layer)
    refs = ref_positions(ref_strategy, weights.config.prompt_len)
    return importance_scores(tr.attn[-1].value, refs, tr.n_visual[-1]), tr


def select_regions(weights: ModelWeights, images, prompts, layer: int, n_least: int,
                   n_most: int, groups: int, ref_strategy: str = "final") -> RegionPartition:
    scores, _ = clean_scores(weights, images, prompts, layer, ref_strategy)
    return partition_from_scores(scores, n_least, n_most, groups)


def build_pairs(part: RegionPartition) -> PairSets:
    B = part.omega_least.shape[0]
    L, M = part.omega_least, part.omega_most
    lm = np.stack([np.repeat(L, M.shape[1], axis=1), np.tile(M, (1, L.shape[1]))], axis=-1)
    ll = []
    for a in range(len(part.least_groups)):
        for b in range(a + 1, len(part.least_groups)):
            ga, gb = part.least_groups[a], part.least_groups[b]
            ll.append(np.stack([np.repeat(gb, ga.shape[1], axis=1), np.tile(ga, (1, gb.shape[1]))], axis=-1))
    ll = np.concatenate(ll, axis=1) if ll else np.zeros((B, 0, 2), dtype=np.int64)
    return PairSets(lm.reshape(B, -1, 2), ll)


# ------------------------------------------------------------------- losses

def pairwise_logsig(scores: Var, pairs: np.ndarray) -> Var:
    """(B,) sums of log sigma(s[first] - s[second]) over each sample's pairs."""
    if pairs.shape[1] == 0:
        return dc.vsum(scores * 0.0, axis=1)
    hi = dc.take_rows(scores, pairs[..., 0])
    lo = dc.take_rows(scores, pairs[..., 1])
    return dc.vsum(dc.log_sigmoid(hi - lo), axis=1)


def loss_rank(scores: Var, pairs: PairSets, alpha: float, beta: float) -> Var:
    return -alpha * pairwise_logsig(scores, pairs.lm) - beta * pairwise_logsig(scores, pairs.ll)


def key_alignment(queries: Var, keys: Var, tokens: np.ndarray, ref_pos: np.ndarray) -> Var:
    """(B,) mean of q_i . k_l over reference rows i and visual tokens l."""
    q = queries[:, ref_pos]                                    # (B, R, d)
    k = dc.take_rows(keys, tokens)                             # (B, T, d)
    return dc.mean(q @ dc.transpose(k, (0, 2, 1)), axis=(1, 2))


def loss_key(queries: Var, keys: Var, omega_least: np.ndarray, ref_pos: np.ndarray) -> Var:
    return -key_alignment(queries, keys, omega_least, ref_pos)


def loss_erase(pert_tokens: Var, clean_tokens: np.ndarray, omega_least: np.ndarray) -> Var:
    """Negative mean squared deviation of the least tokens from their clean values."""
    diff = dc.take_rows(pert_tokens, omega_least) - np.take_along_axis(
        clean_tokens, omega_least[..., None], axis=1)
    return -dc.mean(dc.squared_norm(diff, axis=-1), axis=1)


def scores_var(attn: Var, refs: np.ndarray, n_visual: int) -> Var:
    rows = attn[:, :, n_visual + refs, :n_visual]              # (B, H, R, n_V)
    return dc.mean(rows, axis=(1, 2))


# ------------------------------------------------------------------ attacks

def _sample_rngs(seed: int, sample_ids) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, int(i)]) for i in sample_ids]


def _as_batch(images, prompts):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    prompts = np.asarray(prompts)
    if prompts.ndim == 1:
        prompts = np.broadcast_to(prompts, (images.shape[0], prompts.shape[0]))
    return images, prompts, single


def _project(delta, images, eps, mask):
    delta = np.clip(delta, -eps, eps) * mask
    return np.clip(images + delta, 0.0, 1.0) - images


def caa_objective(weights: ModelWeights, tape: Tape, images: np.ndarray, delta: Var,
                  prompts: np.ndarray, cfg: AttackConfig, part: RegionPartition,
                  pairs: PairSets, clean_tokens: np.ndarray) -> Var:
    """(B,) per-sample total loss on an existing tape."""
    x = dc.clip(tape.const(images) + delta, 0.0, 1.0)
    tr = forward(weights, x, prompts, tape=tape, stop_after=cfg.layer)
    n_v = tr.n_visual[-1]
    refs = ref_positions(cfg.ref_strategy, weights.config.prompt_len)
    s_hat = scores_var(tr.attn[-1], refs, n_v)
    total = loss_rank(s_hat, pairs, cfg.alpha, cfg.beta)
    if cfg.lambda_erase:
        total = total + cfg.lambda_erase * loss_erase(tr.hidden_out[-1][:, :n_v], clean_tokens, part.omega_least)
    if cfg.lambda_key:
        total = total + cfg.lambda_key * loss_key(tr.queries[-1], tr.keys[-1][:, :n_v],
                                                  part.omega_least, n_v + refs)
    return total


def caa_attack(weights: ModelWeights, images, prompts, cfg: AttackConfig = AttackConfig(),
               sample_ids=None) -> Perturbation:
    """Sign-gradient PGD restricted to the clean least-important patches.

    No compression is active while optimising. ``sample_ids`` seed each
    sample's Gaussian start (defaults to batch positions).
    """
    images, prompts, single = _as_batch(images, prompts)
    B, G = images.shape[0], images.shape[1]
    n_v = G * G
    n_least, n_most = cfg.sizes(n_v)
    scores, tr = clean_scores(weights, images, prompts, cfg.layer, cfg.ref_strategy)
    part = partition_from_scores(scores, n_least, n_most, cfg.groups)
    pairs = build_pairs(part)
    clean_tokens = tr.hidden_out[-1].value[:, :n_v]

    support = np.zeros((B, n_v), dtype=bool)
    np.put_along_axis(support, part.omega_least, True, axis=1)
    mask = support.reshape(B, G, G, 1).astype(np.float64)
    ids = range(B) if sample_ids is None else sample_ids
    noise = np.stack([r.normal(0.0, 1.0, images.shape[1:]) for r in _sample_rngs(cfg.seed, ids)])
    delta = _project(noise, images, cfg.epsilon, mask)

    history = []
    for it in range(cfg.iterations + 1):
        tape = Tape()
        d = tape.leaf(delta)
        per_sample = caa_objective(weights, tape, images, d, prompts, cfg, part, pairs, clean_tokens)
        if not np.all(np.isfinite(per_sample.value)):
            raise AttackDiverged(it)
        history.append(per_sample.value.copy())
        if it == cfg.iterations:
            break
        (g,) = tape.gradient(dc.vsum(per_sample), [d])
        delta = _project(delta - cfg.step * np.sign(g), images, cfg.epsilon, mask)
    out = Perturbation(delta, support, cfg.epsilon, np.array(history))
    if single:
        out = Perturbation(delta[0], support[0], cfg.epsilon, out.loss_history[:, 0])
    return out


def random_attack(images, epsilon: float, seed: int, sample_ids=None) -> Perturbation:
    """Uniform noise in [-eps, eps] on every pixel, kept inside [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    ids = range(batch.shape[0]) if sample_ids is None else sample_ids
    noise = np.stack([r.uniform(-epsilon, epsilon, batch.shape[1:]) for r in _sample_rngs(seed, ids)])
    delta = np.clip(batch + noise, 0.0, 1.0) - batch
    support = np.ones(batch.shape[:1] + (batch.shape[1] * batch.shape[2],), dtype=bool)
    if single:
        return Perturbation(delta[0], support[0], epsilon)
    return Perturbation(delta, support, epsilon)


def gaussian_noise(images, epsilon: float, seed: int, sample_ids=None) -> Perturbation:
    """Gaussian noise (sigma = eps) truncated to the l_inf ball, kept inside [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    ids = range(batch.shape[0]) if sample_ids is None else sample_ids
    noise = np.stack([np.clip(r.normal(0.0, epsilon, batch.shape[1:]), -epsilon, epsilon)
                      for r in _sample_rngs(seed, ids)])
    delta = np.clip(batch + noise, 0.0, 1.0) - batch
    support = np.ones(batch.shape[:1] + (batch.shape[1] * batch.shape[2],), dtype=bool)
    if single:
        return Perturbation(delta[0], support[0], epsilon)
    return Perturbation(delta, support, epsilon)


@dataclass(frozen=True)
class BaselineConfig:
    correct: tuple[int, ...] | None = None    # None -> each sample's own label
    wrong: tuple[int, ...] | None = None      # None -> the other answer
    epsilon: float = 32 / 255
    step: float = 4 / 255
    iterations: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.correct is not None and self.wrong is not None and set(self.correct) & set(self.wrong):
            raise ValueError("correct and wrong answer sets must be disjoint")


def vanilla_loss(logits: Var, correct: np.ndarray, wrong: np.ndarray) -> Var:
    """(B,) mean log p(correct) - mean log p(wrong); sets are (B, k) answer ids."""
    lp = dc.log_softmax(logits)
    cor = dc.mean(dc.take_rows(lp, correct), axis=1)
    wro = dc.mean(dc.take_rows(lp, wrong), axis=1)
    return cor - wro


def vanilla_attack(weights: ModelWeights, images, prompts, labels=None,
                   cfg: BaselineConfig = BaselineConfig(), sample_ids=None) -> Perturbation:
    """Full-image PGD pushing the uncompressed answer away from the correct one."""
    images, prompts, single = _as_batch(images, prompts)
    B = images.shape[0]
    if cfg.correct is not None:
        correct = np.broadcast_to(np.array(cfg.correct), (B, len(cfg.correct)))
    else:
        correct = np.asarray(labels).reshape(B, 1)
    if cfg.wrong is not None:
        wrong = np.broadcast_to(np.array(cfg.wrong), (B, len(cfg.wrong)))
    else:
        wrong = 1 - np.asarray(labels).reshape(B, 1)
    ids = range(B) if sample_ids is None else sample_ids
    noise = np.stack([r.normal(0.0, 1.0, images.shape[1:]) for r in _sample_rngs(cfg.seed, ids)])
    ones = np.ones(images.shape[:3] + (1,))
    delta = _project(noise, images, cfg.epsilon, ones)
    history = []
    for it in range(cfg.iterations + 1):
        tape = Tape()
        d = tape.leaf(delta)
        x = dc.clip(tape.const(images) + d, 0.0, 1.0)
        tr = forward(weights, x, prompts, tape=tape)
        per_sample = vanilla_loss(tr.logits, correct, wrong)
        if not np.all(np.isfinite(per_sample.value)):
            raise AttackDiverged(it)
        history.append(per_sample.value.copy())
        if it == cfg.iterations:
            break
        (g,) = tape.gradient(dc.vsum(per_sample), [d])
        delta = _project(delta - cfg.step * np.sign(g), images, cfg.epsilon, ones)
    support = np.ones((B, images.shape[1] * images.shape[2]), dtype=bool)
    out = Perturbation(delta, support, cfg.epsilon, np.array(history))
    if single:
        out = Perturbation(delta[0], support[0], cfg.epsilon, out.loss_history[:, 0])
    return out


# ------------------------------------------------------------- persistence

def config_digest(cfg) -> str:
    return fnv1a64(json.dumps(asdict(cfg), sort_keys=True).encode())


def save_perturbations(path, pert: Perturbation, cfg, sample_ids=None) -> None:
    """One JSON object per sample: id, config digest, delta, support, loss history."""
    delta = pert.delta if pert.delta.ndim == 4 else pert.delta[None]
    support = pert.support if pert.support.ndim == 2 else pert.support[None]
    hist = pert.loss_history
    if hist.size and hist.ndim == 1:
        hist = hist[:, None]
    ids = range(len(delta)) if sample_ids is None else list(sample_ids)
    digest = config_digest(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        for b, sid in enumerate(ids):
            fh.write(json.dumps({
                "sample_id": int(sid), "config_digest": digest, "epsilon": pert.epsilon,
                "delta": delta[b].tolist(), "support": np.flatnonzero(support[b]).tolist(),
                "loss_history": hist[:, b].tolist() if hist.size else [],
            }) + "\n")


def load_perturbations(path, n_visual: int) -> tuple[list[int], Perturbation, str]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no perturbations")
    support = np.zeros((len(rows), n_visual), dtype=bool)
    for b, r in enumerate(rows):
        support[b, r["support"]] = True
    hist = [r["loss_history"] for r in rows]
    hist = np.array(hist).T if all(hist) else np.zeros((0, 0))
    pert = Perturbation(np.array([r["delta"] for r in rows]), support, rows[0]["epsilon"], hist)
    return [r["sample_id"] for r in rows], pert, rows[0]["config_digest"]
