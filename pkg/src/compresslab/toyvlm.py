"""A miniature vision-language transformer and its synthetic yes/no task.

Images are ``G x G`` grids of ``d_p``-dimensional patches with values in
[0, 1]. Each patch becomes one visual token; the prompt is ``n_T`` text tokens
asking whether a class is present. Visual tokens come first, text tokens
after. Text positions see every visual position and earlier text positions;
visual positions see only visual positions.

A per-layer hook may select a subset of the current visual tokens after a
layer's output, which is where token compression plugs in.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Var

log = logging.getLogger(__name__)

YES, NO = 1, 0
ANSWERS = ("no", "yes")

# prompt vocabulary: IS, THERE, A, class_0..class_{C-1}; prompts read "is there a <class>"
TOK_IS, TOK_THERE, TOK_A = 0, 1, 2
TOK_CLASS0 = 3


@dataclass(frozen=True)
class ModelConfig:
    grid_side: int = 8
    patch_dim: int = 12
    model_dim: int = 32
    heads: int = 4
    layers: int = 8
    num_classes: int = 8
    prompt_len: int = 4
    ffn_dim: int = 64
    pos_freqs: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.layers < 4:
            raise ValueError("need at least 4 layers")
        if self.grid_side < 4:
            raise ValueError("grid_side must be at least 4")
        if self.num_classes > self.patch_dim:
            raise ValueError("class templates need num_classes <= patch_dim")

    @property
    def n_visual(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def vocab_size(self) -> int:
        return self.num_classes + 3


@dataclass(frozen=True)
class TaskConfig:
    min_objects: int = 1
    max_objects: int = 4
    jitter: float = 0.05
    background_max: float = 0.15


# ------------------------------------------------------------------ dataset

@dataclass
class SyntheticSample:
    image: np.ndarray          # (G, G, d_p)
    prompt: np.ndarray         # (n_T,) token ids
    label: int                 # YES or NO
    query_class: int
    object_patches: tuple[int, ...]
    object_classes: tuple[int, ...]


@dataclass
class Dataset:
    """Column-stored batch of synthetic samples."""

    images: np.ndarray
    prompts: np.ndarray
    labels: np.ndarray
    query_classes: np.ndarray
    object_patches: list[tuple[int, ...]]
    object_classes: list[tuple[int, ...]]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.images[i], self.prompts[i], int(self.labels[i]),
                               int(self.query_classes[i]), self.object_patches[i],
                               self.object_classes[i])

    def __iter__(self) -> Iterator[SyntheticSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.prompts[idx], self.labels[idx],
                       self.query_classes[idx], [self.object_patches[i] for i in idx],
                       [self.object_classes[i] for i in idx], self.seed)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.prompts, self.labels, self.query_classes,
                       self.object_patches, self.object_classes, self.seed)


def class_templates(cfg: ModelConfig) -> np.ndarray:
    """One-hot templates: class c lights up patch channel c at amplitude 1."""
    return np.eye(cfg.num_classes, cfg.patch_dim)


def make_prompt(cfg: ModelConfig, query_class: int) -> np.ndarray:
    if cfg.prompt_len < 4:
        raise ValueError("prompt_len must be at least 4")
    base = [TOK_IS, TOK_THERE, TOK_A, TOK_CLASS0 + query_class]
    return np.array([TOK_IS] * (cfg.prompt_len - 4) + base, dtype=np.int64)


def generate_dataset(cfg: ModelConfig, count: int, seed: int,
                     task: TaskConfig = TaskConfig()) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    G, C, n_V = cfg.grid_side, cfg.num_classes, cfg.n_visual
    templates = class_templates(cfg)
    # exact balance: first half yes, second half no, then shuffled
    labels = np.array([YES] * ((count + 1) // 2) + [NO] * (count // 2))
    rng.shuffle(labels)
    images = rng.uniform(0.0, task.background_max, size=(count, n_V, cfg.patch_dim))
    prompts = np.empty((count, cfg.prompt_len), dtype=np.int64)
    queries = np.empty(count, dtype=np.int64)
    patches, classes = [], []
    for i in range(count):
        k = int(rng.integers(task.min_objects, task.max_objects + 1))
        q = int(rng.integers(C))
        others = [c for c in range(C) if c != q]
        if labels[i] == YES:
            cls = [q] + list(rng.choice(others, size=k - 1, replace=False))
        else:
            cls = list(rng.choice(others, size=k, replace=False))
        pos = rng.choice(n_V, size=k, replace=False)
        for p, c in zip(pos, cls):
            jit = rng.normal(0.0, task.jitter, size=cfg.patch_dim)
            images[i, p] = np.clip(templates[c] + jit, 0.0, 1.0)
        order = np.argsort(pos)
        patches.append(tuple(int(pos[j]) for j in order))
        classes.append(tuple(int(cls[j]) for j in order))
        queries[i] = q
        prompts[i] = make_prompt(cfg, q)
    return Dataset(images.reshape(count, G, G, cfg.patch_dim), prompts, labels, queries,
                   patches, classes, seed)


def erase_objects(ds: Dataset, task: TaskConfig = TaskConfig(), seed: int = 0) -> Dataset:
    """Replace every object patch by background noise; every label becomes no."""
    rng = np.random.default_rng(seed)
    images = ds.images.copy()
    G = images.shape[1]
    for i, pats in enumerate(ds.object_patches):
        for p in pats:
            images[i, p // G, p % G] = rng.uniform(0.0, task.background_max, images.shape[-1])
    return Dataset(images, ds.prompts.copy(), np.full(len(ds), NO), ds.query_classes.copy(),
                   [() for _ in ds.object_patches], [() for _ in ds.object_classes], ds.seed)


# ------------------------------------------------------------------- weights

PARAM_ORDER_GLOBAL = ("patch_w", "patch_b", "pos_w", "tok_emb", "txt_pos", "final_g", "head_w", "head_b")
PARAM_ORDER_LAYER = ("g1", "wq", "wk", "wv", "wo", "g2", "w1", "b1", "w2", "b2")


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def names(self) -> list[str]:
        out = list(PARAM_ORDER_GLOBAL)
        for l in range(self.config.layers):
            out += [f"L{l}.{n}" for n in PARAM_ORDER_LAYER]
        return out

    def digest(self) -> str:
        return fnv1a64(b"".join(canonical_bytes(self.params[n]) for n in self.names()))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    rng = np.random.default_rng(seed)
    d, f = cfg.model_dim, cfg.ffn_dim

    def mat(n_in, n_out, scale=1.0):
        return rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))

    p = {
        "patch_w": mat(cfg.patch_dim, d, 2.0),
        "patch_b": np.zeros(d),
        "pos_w": mat(4 * cfg.pos_freqs, d, 0.5),
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "txt_pos": rng.normal(0.0, 0.1, size=(cfg.prompt_len, d)),
        "final_g": np.ones(d),
        "head_w": mat(d, 2, 0.5),
        "head_b": np.zeros(2),
    }
    resid = 1.0 / math.sqrt(2 * cfg.layers)
    for l in range(cfg.layers):
        p.update({
            f"L{l}.g1": np.ones(d), f"L{l}.wq": mat(d, d), f"L{l}.wk": mat(d, d),
            f"L{l}.wv": mat(d, d), f"L{l}.wo": mat(d, d, resid),
            f"L{l}.g2": np.ones(d), f"L{l}.w1": mat(d, f), f"L{l}.b1": np.zeros(f),
            f"L{l}.w2": mat(f, d, resid), f"L{l}.b2": np.zeros(d),
        })
    return ModelWeights(cfg, p)


def position_features(side: int, freqs: int) -> np.ndarray:
    """Fourier features of normalised (row, col) coordinates; any grid size."""
    coords = (np.arange(side) + 0.5) / side
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    k = np.arange(1, freqs + 1) * np.pi
    feats = [np.sin(rr.reshape(-1, 1) * k), np.cos(rr.reshape(-1, 1) * k),
             np.sin(cc.reshape(-1, 1) * k), np.cos(cc.reshape(-1, 1) * k)]
    return np.concatenate(feats, axis=1)


# ------------------------------------------------------------------- forward

@dataclass
class LayerState:
    """What a hook sees after layer ``layer`` (1-based) has produced its output."""

    layer: int
    attn: np.ndarray          # (B, H, n, n) attention of this layer
    n_visual: int             # visual tokens currently in the sequence
    index_map: np.ndarray     # (B, n_visual) original patch index of each token
    n_visual_original: int


Hook = Callable[[LayerState], "np.ndarray | None"]


@dataclass
class LayerTrace:
    """Per-layer record of a forward pass (index 0 is layer 1)."""

    hidden_in: list[Var] = field(default_factory=list)
    hidden_out: list[Var] = field(default_factory=list)
    attn: list[Var] = field(default_factory=list)
    queries: list[Var] = field(default_factory=list)
    keys: list[Var] = field(default_factory=list)
    n_visual: list[int] = field(default_factory=list)
    index_maps: list[np.ndarray] = field(default_factory=list)
    logits: Var | None = None
    n_text: int = 0

    def attention(self, layer: int) -> np.ndarray:
        return self.attn[layer - 1].value

    def text_to_visual(self, layer: int) -> np.ndarray:
        """(B, H, n_T, n_V_l) attention from text rows to visual columns."""
        m = self.n_visual[layer - 1]
        return self.attn[layer - 1].value[:, :, m:, :m]

    @property
    def final_logits(self) -> np.ndarray:
        return self.logits.value


_MASKS: dict[tuple[int, int], np.ndarray] = {}


def attention_mask(n_visual: int, n_text: int) -> np.ndarray:
    """Additive mask: 0 where attention is allowed, -1e30 elsewhere."""
    key = (n_visual, n_text)
    if key not in _MASKS:
        n = n_visual + n_text
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:n_visual, :n_visual] = True
        allowed[n_visual:, :n_visual] = True
        allowed[n_visual:, n_visual:] = np.tril(np.ones((n_text, n_text), dtype=bool))
        _MASKS[key] = np.where(allowed, 0.0, -1e30)
    return _MASKS[key]


def bind(tape: Tape, weights: ModelWeights, trainable: bool = False) -> dict[str, Var]:
    if trainable:
        return {k: tape.leaf(v) for k, v in weights.params.items()}
    return {k: tape.const(v) for k, v in weights.params.items()}


def embed(P: dict[str, Var], cfg: ModelConfig, images: Var, prompts: np.ndarray) -> Var:
    tape = images.tape
    B, G = images.shape[0], images.shape[1]
    flat = dc.reshape(images, (B, G * G, cfg.patch_dim))
    pos = tape.const(position_features(G, cfg.pos_freqs)) @ P["pos_w"]
    vis = flat @ P["patch_w"] + P["patch_b"] + pos
    txt = dc.take(P["tok_emb"], prompts, axis=0) + P["txt_pos"]
    return dc.concat([vis, txt], axis=1)


def block(P: dict[str, Var], cfg: ModelConfig, l: int, X: Var, n_visual: int):
    """One pre-norm transformer layer; returns (X_out, attn, q, k)."""
    tape = X.tape
    B, n, d = X.shape
    H, dk = cfg.heads, cfg.head_dim
    h = dc.rmsnorm(X) * P[f"L{l}.g1"]
    q = h @ P[f"L{l}.wq"]
    k = h @ P[f"L{l}.wk"]
    v = h @ P[f"L{l}.wv"]

    def heads(t):
        return dc.transpose(dc.reshape(t, (B, n, H, dk)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    logits = (qh @ dc.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    logits = logits + tape.const(attention_mask(n_visual, n - n_visual))
    a = dc.softmax(logits)
    o = dc.reshape(dc.transpose(a @ vh, (0, 2, 1, 3)), (B, n, d))
    X = X + o @ P[f"L{l}.wo"]
    h2 = dc.rmsnorm(X) * P[f"L{l}.g2"]
    X = X + dc.gelu(h2 @ P[f"L{l}.w1"] + P[f"L{l}.b1"]) @ P[f"L{l}.w2"] + P[f"L{l}.b2"]
    return X, a, q, k


def forward(weights: ModelWeights, images, prompts, hook: Hook | None = None, *,
            tape: Tape | None = None, params: dict[str, Var] | None = None,
            stop_after: int | None = None) -> LayerTrace:
    """Run the model. ``images`` is (B,G,G,d_p) or (G,G,d_p), or a Var on ``tape``.

    ``stop_after`` truncates the pass after that (1-based) layer; the trace
    then carries no logits.
    """
    cfg = weights.config
    tape = tape if tape is not None else (images.tape if isinstance(images, Var) else Tape(record=False))
    if not isinstance(images, Var):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        images = tape.const(images)
    prompts = np.asarray(prompts)
    if prompts.ndim == 1:
        prompts = np.broadcast_to(prompts, (images.shape[0], prompts.shape[0]))
    if images.shape[-1] != cfg.patch_dim or prompts.shape[1] != cfg.prompt_len:
        raise ValueError("image/prompt do not match the model config")
    P = params if params is not None else bind(tape, weights)
    B = images.shape[0]
    n_v0 = images.shape[1] * images.shape[2]
    n_t = cfg.prompt_len
    X = embed(P, cfg, images, prompts)
    index_map = np.broadcast_to(np.arange(n_v0), (B, n_v0))
    m = n_v0
    trace = LayerTrace(n_text=n_t)
    last = cfg.layers if stop_after is None else stop_after
    for l in range(last):
        trace.hidden_in.append(X)
        trace.n_visual.append(m)
        trace.index_maps.append(index_map)
        X, a, q, k = block(P, cfg, l, X, m)
        trace.attn.append(a)
        trace.queries.append(q)
        trace.keys.append(k)
        trace.hidden_out.append(X)
        if hook is not None and l < cfg.layers - 1:
            keep = hook(LayerState(l + 1, a.value, m, index_map, n_v0))
            if keep is not None:
                keep = np.asarray(keep, dtype=np.int64)
                if keep.ndim == 1:
                    keep = np.broadcast_to(keep, (B, keep.shape[0]))
                if keep.shape[1] == 0:
                    raise ValueError(f"hook at layer {l + 1} returned an empty visual sequence")
                vis = dc.take_rows(X[:, :m], keep)
                X = dc.concat([vis, X[:, m:]], axis=1)
                index_map = np.take_along_axis(index_map, keep, axis=1)
                m = keep.shape[1]
    if stop_after is None:
        h = dc.rmsnorm(X[:, -1]) * P["final_g"]
        trace.logits = h @ P["head_w"] + P["head_b"]
    return trace


def decode_answer(logits) -> np.ndarray | int:
    """argmax over (no, yes); ties go to no."""
    z = np.asarray(logits.final_logits if isinstance(logits, LayerTrace) else logits)
    pred = (z[..., YES] > z[..., NO]).astype(np.int64)
    return int(pred) if pred.ndim == 0 else pred


def predict(weights: ModelWeights, images: np.ndarray, prompts: np.ndarray,
            hook_factory: Callable[[], Hook | None] | None = None,
            batch_size: int = 128) -> np.ndarray:
    """Predicted answers for a stack of images; hooks are rebuilt per chunk."""
    preds = []
    for s in range(0, len(images), batch_size):
        hook = hook_factory() if hook_factory is not None else None
        tr = forward(weights, images[s:s + batch_size], prompts[s:s + batch_size], hook)
        preds.append(decode_answer(tr.final_logits))
    return np.concatenate(preds)


def accuracy(weights: ModelWeights, samples: Dataset, hook_factory=None,
             images: np.ndarray | None = None) -> float:
    if len(samples) == 0:
        raise ValueError("accuracy needs a nonempty sample set")
    imgs = samples.images if images is None else images
    preds = predict(weights, imgs, samples.prompts, hook_factory)
    return float(np.mean(preds == samples.labels))


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"       # "adam" or "sgd" (momentum)
    lr: float = 3e-3
    momentum: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 60
    target_val_acc: float = 0.97
    grad_clip: float = 5.0
    # retained-evidence augmentation: some batches lose random visual tokens
    # after an early layer and are relabelled from the surviving patches
    drop_prob: float = 0.5
    drop_layers: tuple[int, ...] = (1, 2, 3)
    drop_rates: tuple[float, float] = (0.1, 0.5)
    keep_object_prob: float = 0.5
    # share of dropped batches whose keep set is the model's own top-k by
    # final-row attention instead of a random draw
    drop_attention_frac: float = 0.0
    # share of batches trained on Gaussian-jittered pixels, sigma ~ U(0, noise_max)
    noise_prob: float = 0.0
    noise_max: float = 48 / 255


@dataclass
class TrainLog:
    epochs: int
    losses: list[float]
    val_accuracies: list[float]
    final_val_accuracy: float
    digest: str


class TrainingDiverged(RuntimeError):
    pass


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    lp = dc.log_softmax(logits)
    picked = lp[(np.arange(len(labels)), np.asarray(labels))]
    return -dc.mean(picked)


def loss_and_grads(weights: ModelWeights, images: np.ndarray, prompts: np.ndarray,
                   labels: np.ndarray, hook: Hook | None = None) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    P = bind(tape, weights, trainable=True)
    tr = forward(weights, images, prompts, hook, tape=tape, params=P)
    loss = cross_entropy(tr.logits, labels)
    names = list(P)
    grads = tape.gradient(loss, [P[n] for n in names])
    return float(loss.value), dict(zip(names, grads))


def evidence_drop(ds: Dataset, idx: np.ndarray, n_visual: int, rate: float, keep_object_prob: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random keep sets of ``ceil(rate * n_V)`` tokens and the labels they imply.

    Each object patch survives with ``keep_object_prob``; the rest of the
    budget is filled with background patches. A sample answers yes iff a
    surviving object has the queried class.
    """
    k = math.ceil(rate * n_visual)
    keep = np.empty((len(idx), k), dtype=np.int64)
    labels = np.empty(len(idx), dtype=np.int64)
    for row, i in enumerate(idx):
        pats, cls = ds.object_patches[i], ds.object_classes[i]
        kept_obj = [p for p in pats if rng.random() < keep_object_prob][:k]
        rest = np.setdiff1d(np.arange(n_visual), pats)
        fill = rng.choice(rest, size=k - len(kept_obj), replace=False)
        keep[row] = np.sort(np.concatenate([np.array(kept_obj, dtype=np.int64), fill]))
        q = ds.query_classes[i]
        labels[row] = int(any(c == q for p, c in zip(pats, cls) if p in kept_obj))
    return keep, labels


def relabel(ds: Dataset, idx: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """Labels implied by the surviving patches ``kept`` (one row per sample)."""
    out = np.empty(len(idx), dtype=np.int64)
    for row, i in enumerate(idx):
        alive = set(int(p) for p in kept[row])
        q = ds.query_classes[i]
        out[row] = int(any(c == q and p in alive for p, c in zip(ds.object_patches[i], ds.object_classes[i])))
    return out


def attention_drop_hook(ds: Dataset, idx: np.ndarray, layer: int, rate: float, labels: np.ndarray) -> Hook:
    """Keep the top ``ceil(rate * n_V)`` tokens by final-row attention at ``layer``.

    ``labels`` is rewritten in place once the keep set is known, so it must be
    the array later handed to the loss.
    """
    def hook(st: LayerState):
        if st.layer != layer:
            return None
        k = math.ceil(rate * st.n_visual)
        s = st.attn[:, :, -1, :st.n_visual].mean(axis=1)
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        keep = np.sort(order, axis=1)
        labels[:] = relabel(ds, idx, np.take_along_axis(st.index_map, keep, axis=1))
        return keep
    return hook


def train(cfg: ModelConfig, train_set: Dataset, val_set: Dataset, seed: int,
          tc: TrainConfig = TrainConfig()) -> tuple[ModelWeights, TrainLog]:
    """Minimise answer cross-entropy; stops early once val accuracy hits the target."""
    weights = init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    vel = {k: np.zeros_like(v) for k, v in weights.params.items()}
    sq = {k: np.zeros_like(v) for k, v in weights.params.items()}
    step = 0
    losses, vals = [], []
    val_acc = 0.0
    epoch = 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = []
        for s in range(0, len(order), tc.batch_size):
            idx = order[s:s + tc.batch_size]
            labels, hook = train_set.labels[idx], None
            if tc.drop_prob and rng.random() < tc.drop_prob:
                layer = int(rng.choice(tc.drop_layers))
                rate = float(rng.uniform(*tc.drop_rates))
                if tc.drop_attention_frac and rng.random() < tc.drop_attention_frac:
                    labels = labels.copy()
                    hook = attention_drop_hook(train_set, idx, layer, rate, labels)
                else:
                    keep, labels = evidence_drop(train_set, idx, cfg.n_visual, rate, tc.keep_object_prob, rng)
                    hook = lambda st, layer=layer, keep=keep: keep if st.layer == layer else None
            images = train_set.images[idx]
            if tc.noise_prob and rng.random() < tc.noise_prob:
                sigma = rng.uniform(0.0, tc.noise_max)
                images = np.clip(images + rng.normal(0.0, sigma, images.shape), 0.0, 1.0)
            loss, grads = loss_and_grads(weights, images, train_set.prompts[idx], labels, hook)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {s // tc.batch_size}")
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, tc.grad_clip / (gnorm + 1e-12))
            step += 1
            for k, g in grads.items():
                g = g * scale
                if tc.optimizer == "sgd":
                    vel[k] = tc.momentum * vel[k] - tc.lr * g
                    weights.params[k] += vel[k]
                else:
                    vel[k] = tc.momentum * vel[k] + (1 - tc.momentum) * g
                    sq[k] = tc.beta2 * sq[k] + (1 - tc.beta2) * g * g
                    m_hat = vel[k] / (1 - tc.momentum ** step)
                    v_hat = sq[k] / (1 - tc.beta2 ** step)
                    weights.params[k] -= tc.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            epoch_loss.append(loss)
        losses.append(float(np.mean(epoch_loss)))
        val_acc = accuracy(weights, val_set)
        vals.append(val_acc)
        log.info("epoch %d loss %.4f val %.4f", epoch, losses[-1], val_acc)
        if val_acc >= tc.target_val_acc:
            break
    return weights, TrainLog(epoch, losses, vals, val_acc, weights.digest())


# --------------------------------------------------------------- persistence

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FORMAT_VERSION = 1


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a as 16 hex digits."""
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def canonical_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f8").tobytes()
    return arr.astype("<i8").tobytes()


def _write_arrays(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> dict:
    path = Path(path)
    payload = b"".join(canonical_bytes(a) for a in arrays.values())
    layout = {k: {"shape": list(a.shape), "dtype": "f8" if a.dtype.kind == "f" else "i8"}
              for k, a in arrays.items()}
    header = struct.pack("<4sI", b"CLAB", FORMAT_VERSION)
    path.write_bytes(header + payload)
    sidecar = dict(meta, format_version=FORMAT_VERSION, layout=layout, order=list(arrays),
                   digest=fnv1a64(payload))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def _read_arrays(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    magic, version = struct.unpack("<4sI", raw[:8])
    if magic != b"CLAB" or version != meta["format_version"]:
        raise ValueError(f"{path}: not a compresslab array file (or version mismatch)")
    payload = raw[8:]
    if fnv1a64(payload) != meta["digest"]:
        raise ValueError(f"{path}: digest mismatch")
    out, off = {}, 0
    for name in meta["order"]:
        spec = meta["layout"][name]
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        dt = "<f8" if spec["dtype"] == "f8" else "<i8"
        out[name] = np.frombuffer(payload, dtype=dt, count=n, offset=off).reshape(spec["shape"]).copy()
        off += 8 * n
    return out, meta


def save_weights(weights: ModelWeights, path, seed: int | None = None, extra: dict | None = None) -> dict:
    arrays = {n: weights.params[n] for n in weights.names()}
    meta = {"kind": "weights", "config": asdict(weights.config), "seed": seed, **(extra or {})}
    return _write_arrays(Path(path), arrays, meta)


def load_weights(path) -> ModelWeights:
    arrays, meta = _read_arrays(Path(path))
    return ModelWeights(ModelConfig(**meta["config"]), arrays)


def save_dataset(ds: Dataset, path, cfg: ModelConfig) -> dict:
    n = len(ds)
    obj = np.full((n, cfg.num_classes), -1, dtype=np.int64)
    objc = np.full((n, cfg.num_classes), -1, dtype=np.int64)
    for i, (p, c) in enumerate(zip(ds.object_patches, ds.object_classes)):
        obj[i, :len(p)] = p
        objc[i, :len(c)] = c
    arrays = {"images": ds.images, "prompts": ds.prompts, "labels": ds.labels,
              "query_classes": ds.query_classes, "object_patches": obj, "object_classes": objc}
    return _write_arrays(Path(path), arrays, {"kind": "dataset", "config": asdict(cfg),
                                              "seed": ds.seed, "count": n})


def load_dataset(path) -> tuple[Dataset, ModelConfig]:
    a, meta = _read_arrays(Path(path))
    pats = [tuple(int(x) for x in row if x >= 0) for row in a["object_patches"]]
    cls = [tuple(int(x) for x in row if x >= 0) for row in a["object_classes"]]
    ds = Dataset(a["images"], a["prompts"], a["labels"], a["query_classes"], pats, cls, meta["seed"])
    return ds, ModelConfig(**meta["config"])
