"""Desk-scale experiment suites.

Every suite takes an :class:`ExperimentSpec`, evaluates it on each model seed
and returns a :class:`ReportBundle` of metric records, tables, plot series and
named trend checks. Adversarial sets are memoised per (seed, attack) inside a
run so suites that share an attack do not recompute it.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Callable

import numpy as np

from .. import toyvlm as tv
from ..caa import AttackConfig, BaselineConfig, caa_attack, gaussian_noise, random_attack, vanilla_attack
from ..compressor import CompressionConfig, enumerate_configs
from ..rankstats import default_k, layer_scores, mean_trace, rank_stats
from ..tcaa import TemplatePair, TransferConfig, assemble_adversarial, augment_border, border_rank, tcaa_optimize
from .defense import defended_images, mean_patch
from .metrics import MetricsRecord, accuracy_under, compute_metrics, hook_factory, predict_with_ranking
from .models import ModelStore

log = logging.getLogger(__name__)

KINDS = ("retention_sweep", "ranking_role", "ranking_instability", "bottomk_collapse", "whitebox_table",
         "mismatch_sweep", "transfer_matrix", "refstrategy_compare", "defense_eval")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    model_seeds: tuple[int, ...] = (0,)
    data_seed: int = 5000
    n_samples: int = 500
    noise_seed: int = 0
    epsilon: float = 32 / 255
    epsilons: tuple[float, ...] = (16 / 255, 32 / 255, 64 / 255)
    layer: int = 2
    rates: tuple[float, ...] = (1.0, 0.5, 0.2, 0.1)
    probe_rate: float = 0.2
    mismatch_layers: tuple[int, ...] = (2, 3, 4)
    attack: AttackConfig = AttackConfig()
    baseline: BaselineConfig = BaselineConfig()
    transfer: TransferConfig = TransferConfig()
    transfer_mode: str = "batch"
    transfer_fit_samples: int = 32
    transfer_pairs: tuple[tuple[int, int], ...] | None = None
    transfer_configs: tuple[tuple[tuple[int, float], ...], ...] | None = None
    defense_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown suite kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.model_seeds:
            raise ValueError("need at least one model seed")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return tv.fnv1a64(json.dumps(self.to_dict(), sort_keys=True).encode())


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row) -> None:
        self.rows.append(list(row))


@dataclass
class Plot:
    title: str
    x_label: str
    y_label: str
    x: list
    series: dict[str, list[float]]
    style: str = "line"          # "line" or "bar"


@dataclass
class ReportBundle:
    kind: str
    spec: dict
    digest: str
    records: list[MetricsRecord] = field(default_factory=list)
    tables: dict[str, Table] = field(default_factory=dict)
    plots: dict[str, Plot] = field(default_factory=dict)
    checks: dict[str, float | bool] = field(default_factory=dict)

    def seed_majority(self, check_prefix: str) -> bool:
        """True when more than half of the per-seed boolean checks with this prefix hold."""
        flags = [bool(v) for k, v in self.checks.items() if k.startswith(check_prefix + "[")]
        return bool(flags) and sum(flags) * 2 > len(flags)


class SuiteRunner:
    """Holds the models, the evaluation set and memoised adversarial sets."""

    def __init__(self, spec: ExperimentSpec, store: ModelStore | None = None):
        self.spec = spec
        self.store = store or ModelStore()
        self.cfg = self.store.recipe.model
        self.data = tv.generate_dataset(self.cfg, spec.n_samples, spec.data_seed)
        self._adv: dict[tuple, np.ndarray] = {}

    def weights(self, seed: int) -> tv.ModelWeights:
        return self.store.get(seed)

    def fastv(self, rate: float | None = None, layer: int | None = None) -> CompressionConfig:
        return CompressionConfig.fastv(layer or self.spec.layer, self.spec.probe_rate if rate is None else rate)

    def styles(self) -> dict[str, CompressionConfig]:
        l = self.spec.layer
        return {
            "fastv": self.fastv(),
            "pdrop": CompressionConfig.pdrop(((l, 0.4), (l + 2, 0.2), (l + 4, 0.1))),
            "sparsevlm": CompressionConfig.sparsevlm(((l, self.spec.probe_rate),)),
        }

    # ---------------------------------------------------------- perturbations
    def noisy(self, eps: float | None = None) -> np.ndarray:
        eps = self.spec.epsilon if eps is None else eps
        key = ("gauss", eps)
        if key not in self._adv:
            p = gaussian_noise(self.data.images, eps, self.spec.noise_seed, sample_ids=range(len(self.data)))
            self._adv[key] = p.apply(self.data.images)
        return self._adv[key]

    def adversarial(self, seed: int, name: str, attack: AttackConfig | None = None) -> np.ndarray:
        attack = attack or self.spec.attack
        key = (seed, name, attack if name == "caa" else None)
        if key in self._adv:
            return self._adv[key]
        w, ds, ids = self.weights(seed), self.data, range(len(self.data))
        if name == "caa":
            out = np.concatenate([
                caa_attack(w, ds.images[s:s + 100], ds.prompts[s:s + 100], attack,
                           sample_ids=range(s, min(s + 100, len(ds)))).apply(ds.images[s:s + 100])
                for s in range(0, len(ds), 100)])
        elif name == "vanilla":
            b = self.spec.baseline
            out = np.concatenate([
                vanilla_attack(w, ds.images[s:s + 100], ds.prompts[s:s + 100], ds.labels[s:s + 100], b,
                               sample_ids=range(s, min(s + 100, len(ds)))).apply(ds.images[s:s + 100])
                for s in range(0, len(ds), 100)])
        elif name == "random":
            out = random_attack(ds.images, attack.epsilon, attack.seed, sample_ids=ids).apply(ds.images)
        else:
            raise ValueError(f"unknown attack {name!r}")
        self._adv[key] = out
        return out

    def metrics(self, seed: int, adv: np.ndarray, config: CompressionConfig, clean: np.ndarray | None = None,
                **prov) -> MetricsRecord:
        w = self.weights(seed)
        clean = self.data.images if clean is None else clean
        vals = [accuracy_under(w, self.data, img, c) for img in (clean, adv) for c in (None, config)]
        return compute_metrics(vals[0], vals[1], vals[2], vals[3],
                               dict(prov, seed=seed, config=config.describe(), spec=self.spec.digest()))


# ------------------------------------------------------------------ suites

def _retention_sweep(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    t = Table(["seed", "rate", "clean_acc", "perturbed_acc", "gap"])
    for seed in sp.model_seeds:
        w = run.weights(seed)
        noisy = run.noisy()
        gaps = []
        for r in sp.rates:
            cfg = None if r >= 1.0 else run.fastv(r)
            c = accuracy_under(w, run.data, None, cfg)
            p = accuracy_under(w, run.data, noisy, cfg)
            gaps.append(c - p)
            t.add(seed, r, c, p, c - p)
        order = np.argsort(-np.asarray(sp.rates), kind="stable")
        g = np.asarray(gaps)[order]
        b.checks[f"monotone[{seed}]"] = bool(np.all(np.diff(g) >= -1e-12))
        excess = float(g[-1] - g[0])
        b.checks[f"excess_gap[{seed}]"] = excess
        b.checks[f"excess_ok[{seed}]"] = excess >= 0.05
        b.plots[f"gap_seed{seed}"] = Plot(f"robustness gap, seed {seed}", "retention rate", "gap",
                                          list(sp.rates), {"compressed": gaps,
                                                           "uncompressed": [gaps[int(order[0])]] * len(gaps)})
    b.tables["gaps"] = t


def _ranking_role(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    t = Table(["seed", "rate", "clean_clean", "pert_pert", "pert_clean"])
    noisy = run.noisy()
    for seed in sp.model_seeds:
        w = run.weights(seed)
        drop = rec = 0.0
        never_worse = True
        series = {"clean+clean": [], "pert+pert": [], "pert+clean": []}
        rates = [r for r in sp.rates if r < 1.0]
        for r in rates:
            cfg = run.fastv(r)
            cc = accuracy_under(w, run.data, None, cfg)
            pp = accuracy_under(w, run.data, noisy, cfg)
            pc = float(np.mean(predict_with_ranking(w, noisy, run.data.prompts, run.data.images, cfg)
                               == run.data.labels))
            t.add(seed, r, cc, pp, pc)
            drop += cc - pp
            rec += pc - pp
            never_worse &= pc >= pp
            for k, v in zip(series, (cc, pp, pc)):
                series[k].append(v)
        frac = rec / drop if drop > 1e-12 else float("nan")
        b.checks[f"recovery[{seed}]"] = frac
        b.checks[f"recovery_ok[{seed}]"] = bool(frac >= 0.5)
        b.checks[f"clean_ranking_helps[{seed}]"] = bool(never_worse)
        b.plots[f"ranking_role_seed{seed}"] = Plot(f"ranking role, seed {seed}", "retention rate", "accuracy",
                                                   rates, series)
    b.tables["ranking_role"] = t


def _ranking_instability(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    t = Table(["seed", "epsilon", "layer", "tau", "rho", "preservation", "infiltration"])
    n_v = run.cfg.n_visual
    k = default_k(n_v)
    for seed in sp.model_seeds:
        w = run.weights(seed)
        clean = layer_scores(w, run.data.images, run.data.prompts)
        taus = {}
        for eps in sp.epsilons:
            pert = layer_scores(w, run.noisy(eps), run.data.prompts)
            traces = [[rank_stats(clean[l, i], pert[l, i], k) for l in range(clean.shape[0])]
                      for i in range(clean.shape[1])]
            mt = mean_trace(traces)
            for l, s in enumerate(mt, start=1):
                t.add(seed, eps, l, s.kendall_tau, s.spearman_rho, s.topk_preservation, s.botk_infiltration)
            taus[f"eps={eps * 255:.0f}/255"] = [s.kendall_tau for s in mt]
        b.plots[f"tau_seed{seed}"] = Plot(f"Kendall tau by layer, seed {seed}", "layer", "tau",
                                          list(range(1, clean.shape[0] + 1)), taus)
    b.tables["ranking_trace"] = t


def _bottomk_collapse(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    t = Table(["seed", "rate", "top_acc", "bottom_acc"])
    rates = [r for r in sp.rates if r < 1.0]
    for seed in sp.model_seeds:
        w = run.weights(seed)
        tops, bots = [], []
        for r in rates:
            top = accuracy_under(w, run.data, None, run.fastv(r))
            bot = accuracy_under(w, run.data, None, replace(run.fastv(r), selection_mode="bottom"))
            t.add(seed, r, top, bot)
            tops.append(top)
            bots.append(bot)
        if sp.probe_rate in rates:
            i = rates.index(sp.probe_rate)
            b.checks[f"collapse_margin[{seed}]"] = tops[i] - bots[i]
            b.checks[f"collapse_ok[{seed}]"] = tops[i] - bots[i] >= 0.2
        b.plots[f"topk_vs_bottomk_seed{seed}"] = Plot(f"top-k vs bottom-k, seed {seed}", "retention rate",
                                                      "accuracy", rates, {"top": tops, "bottom": bots})
    b.tables["bottomk"] = t


def _whitebox_table(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    for seed in sp.model_seeds:
        got = {}
        for attack in ("vanilla", "random", "caa"):
            adv = run.adversarial(seed, attack)
            for style, cfg in run.styles().items():
                rec = run.metrics(seed, adv, cfg, attack=attack, style=style)
                b.records.append(rec)
                got[attack, style] = rec
        caa, rnd, van = got["caa", "fastv"], got["random", "fastv"], got["vanilla", "fastv"]
        b.checks[f"csg_margin[{seed}]"] = caa.csg - rnd.csg
        b.checks[f"caa_beats_random[{seed}]"] = caa.csg >= rnd.csg + 0.10
        b.checks[f"caa_upr_ok[{seed}]"] = caa.upr >= 0.8
        b.checks[f"vanilla_upr_ok[{seed}]"] = van.upr <= 0.6
        b.checks[f"table_ok[{seed}]"] = bool(caa.csg >= rnd.csg + 0.10 and caa.upr >= 0.8 and van.upr <= 0.6)
        b.checks[f"structure_ok[{seed}]"] = bool(caa.csg > rnd.csg and caa.upr > van.upr)
    _records_plot(b, "csg", "attack")


def _mismatch_sweep(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    rates = [r for r in sp.rates if r < 1.0]
    for seed in sp.model_seeds:
        adv = run.adversarial(seed, "caa")
        series = {}
        for layer in sp.mismatch_layers:
            series[f"layer {layer}"] = []
            for r in rates:
                rec = run.metrics(seed, adv, run.fastv(r, layer), attack="caa", test_layer=layer, test_rate=r)
                b.records.append(rec)
                series[f"layer {layer}"].append(rec.csg)
        b.plots[f"mismatch_seed{seed}"] = Plot(f"CSG under mismatched configs, seed {seed}", "test retention",
                                               "CSG", rates, series)


def default_transfer_configs(depth: int, head: tuple[tuple[int, float], ...] = ((2, 0.2),),
                             limit: int = 8) -> list[CompressionConfig]:
    out = [CompressionConfig(head)]
    for c in enumerate_configs(depth, 0.5, 0.1):
        cc = c.to_compression()
        if cc.stages != out[0].stages:
            out.append(cc)
        if len(out) >= limit:
            break
    return out


def _transfer_matrix(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    seeds = list(sp.model_seeds)
    pairs = sp.transfer_pairs or tuple((seeds[i], seeds[(i + 1) % len(seeds)]) for i in range(len(seeds)))
    configs = ([CompressionConfig(c) for c in sp.transfer_configs] if sp.transfer_configs
               else default_transfer_configs(run.cfg.layers))
    fit = tv.generate_dataset(run.cfg, sp.transfer_fit_samples, sp.data_seed + 1)
    tc = sp.transfer
    for src, dst in pairs:
        res = tcaa_optimize(run.weights(src), fit.images, fit.prompts, tc, mode=sp.transfer_mode)
        pair = res.templates if sp.transfer_mode == "batch" else TemplatePair(
            res.templates.raise_template.mean(0), res.templates.down_template.mean(0))
        adv = assemble_adversarial(run.data.images, res.layout, pair, tc.fill)
        clean, _ = augment_border(run.data.images, tc.border_width, tc.fill)
        w_dst = run.weights(dst)
        for cfg in configs:
            rec = run.metrics(dst, adv, cfg, clean=clean, attack="tcaa", surrogate=src)
            b.records.append(rec)
        head = [r for r in b.records if r.provenance.get("surrogate") == src and r.provenance["seed"] == dst]
        b.checks[f"transfer_csg[{src}->{dst}]"] = head[0].csg
        b.checks[f"transfer_ok[{src}->{dst}]"] = head[0].csg > 0
        zero = layer_scores(w_dst, clean[:64], run.data.prompts[:64])[sp.layer - 1]
        pert = layer_scores(w_dst, adv[:64], run.data.prompts[:64])[sp.layer - 1]
        b.checks[f"border_rank_gain[{src}->{dst}]"] = float(border_rank(zero, res.layout).mean()
                                                           - border_rank(pert, res.layout).mean())
    _records_plot(b, "csg", "config")


def _refstrategy_compare(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    evals = {"final": run.fastv(), "multi": CompressionConfig.sparsevlm(((sp.layer, sp.probe_rate),))}
    for seed in sp.model_seeds:
        for ref in ("final", "multi"):
            adv = run.adversarial(seed, "caa", replace(sp.attack, ref_strategy=ref))
            for ev, cfg in evals.items():
                b.records.append(run.metrics(seed, adv, cfg, attack=f"caa[{ref}]", eval_refs=ev))


def _defense_eval(run: SuiteRunner, b: ReportBundle) -> None:
    sp = run.spec
    t = Table(["seed", "mode", "clean_nc", "clean_c", "adv_nc", "adv_c"])
    cfg = run.fastv()
    fill = mean_patch(run.data.images)
    p = run.data.prompts
    for seed in sp.model_seeds:
        w = run.weights(seed)
        adv = run.adversarial(seed, "caa")
        base = [accuracy_under(w, run.data, img, c) for img in (None, adv) for c in (None, cfg)]
        t.add(seed, "none", *base)
        res = {}
        for mode in ("most", "least", "random"):
            dc_ = defended_images(w, run.data.images, p, mode, sp.defense_fraction, fill, layer=sp.layer,
                                  seed=sp.noise_seed)
            da = defended_images(w, adv, p, mode, sp.defense_fraction, fill, layer=sp.layer, seed=sp.noise_seed)
            vals = [accuracy_under(w, run.data, img, c) for img in (dc_, da) for c in (None, cfg)]
            t.add(seed, mode, *vals)
            res[mode] = vals
        b.checks[f"most_hurts_clean[{seed}]"] = res["most"][1] < res["least"][1]
        b.checks[f"least_fails_to_restore[{seed}]"] = res["least"][3] < base[1] - 0.1
    b.tables["defense"] = t


def _records_plot(b: ReportBundle, metric: str, key: str) -> None:
    if not b.records:
        return
    labels = sorted({str(r.provenance.get(key)) for r in b.records})
    seeds = sorted({r.provenance["seed"] for r in b.records})
    series = {}
    for s in seeds:
        vals = []
        for lab in labels:
            got = [getattr(r, metric) for r in b.records if r.provenance["seed"] == s and str(r.provenance.get(key)) == lab]
            vals.append(float(np.mean(got)) if got else 0.0)
        series[f"seed {s}"] = vals
    b.plots[f"{metric}_by_{key}"] = Plot(f"{metric.upper()} by {key}", key, metric, labels, series, style="bar")


SUITES: dict[str, Callable[[SuiteRunner, ReportBundle], None]] = {
    "retention_sweep": _retention_sweep, "ranking_role": _ranking_role,
    "ranking_instability": _ranking_instability, "bottomk_collapse": _bottomk_collapse,
    "whitebox_table": _whitebox_table, "mismatch_sweep": _mismatch_sweep,
    "transfer_matrix": _transfer_matrix, "refstrategy_compare": _refstrategy_compare,
    "defense_eval": _defense_eval,
}


def run_suite(kind: str, spec: ExperimentSpec | None = None, store: ModelStore | None = None,
              runner: SuiteRunner | None = None) -> ReportBundle:
    """Run one suite. Passing a ``runner`` shares its memoised attacks across suites."""
    if kind not in SUITES:
        raise ValueError(f"unknown suite kind {kind!r}")
    spec = replace(spec, kind=kind) if spec is not None else ExperimentSpec(kind)
    if runner is None:
        runner = SuiteRunner(spec, store)
    else:
        runner.spec = spec
    bundle = ReportBundle(kind, spec.to_dict(), spec.digest())
    SUITES[kind](runner, bundle)
    return bundle
