"""Trained-model cache keyed by seed, so suites and tests share one training run per seed."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from .. import toyvlm as tv

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("COMPRESSLAB_CACHE", Path(__file__).resolve().parents[3] / "artifacts" / "models"))


@dataclass(frozen=True)
class ModelRecipe:
    train_size: int = 2000
    val_size: int = 500
    train_seed_base: int = 1000
    val_seed_base: int = 2000
    train: tv.TrainConfig = tv.TrainConfig()
    model: tv.ModelConfig = tv.ModelConfig()

    def tag(self) -> str:
        return tv.fnv1a64(repr(asdict(self)).encode())[:8]


class ModelStore:
    """Loads ``model_seed{s}_{tag}.clab`` from a directory or trains and saves it."""

    def __init__(self, root: Path | str | None = None, recipe: ModelRecipe = ModelRecipe()):
        self.root = Path(root) if root is not None else DEFAULT_CACHE
        self.recipe = recipe
        self._mem: dict[int, tv.ModelWeights] = {}

    def path(self, seed: int) -> Path:
        return self.root / f"model_seed{seed}_{self.recipe.tag()}.clab"

    def get(self, seed: int) -> tv.ModelWeights:
        if seed in self._mem:
            return self._mem[seed]
        p = self.path(seed)
        if p.exists():
            w = tv.load_weights(p)
        else:
            w = self.train(seed)
            self.root.mkdir(parents=True, exist_ok=True)
            tv.save_weights(w, p, seed=seed, extra={"recipe": self.recipe.tag()})
        self._mem[seed] = w
        return w

    def train(self, seed: int) -> tv.ModelWeights:
        r = self.recipe
        tr = tv.generate_dataset(r.model, r.train_size, r.train_seed_base + seed)
        va = tv.generate_dataset(r.model, r.val_size, r.val_seed_base + seed)
        log.info("training model seed %d (%s)", seed, r.tag())
        w, lg = tv.train(r.model, tr, va, seed, r.train)
        log.info("seed %d: %d epochs, val %.4f", seed, lg.epochs, lg.final_val_accuracy)
        return w
