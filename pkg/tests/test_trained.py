"""Checks that need the cached seed-0 model (trained on first use, then loaded)."""
import numpy as np
import pytest

from compresslab import tcaa
from compresslab import toyvlm as tv
from compresslab.caa import AttackConfig, BaselineConfig, caa_attack, clean_scores, gaussian_noise, \
    select_regions, vanilla_attack
from compresslab.compressor import compress
from compresslab.harness.metrics import accuracy_under
from compresslab.harness.models import ModelStore
from compresslab.harness.suites import ExperimentSpec, run_suite
from compresslab.rankstats import kendall_tau, layer_scores
from compresslab.tcaa import TransferConfig

N = 48

# behaviours this 8-layer toy does not reproduce; measurements in notes/decisions.md
WEAK_CAA = pytest.mark.xfail(reason="single-patch objects stay top-ranked; CAA lifts ~27% of the least set", strict=False)


@pytest.fixture(scope="module")
def store():
    return ModelStore()


@pytest.fixture(scope="module")
def model(store):
    return store.get(0)


@pytest.fixture(scope="module")
def data(model):
    return tv.generate_dataset(model.config, N, seed=77)


def test_trained_val_accuracy(store, model):
    r = store.recipe
    val = tv.generate_dataset(r.model, r.val_size, r.val_seed_base + 0)
    assert tv.accuracy(model, val) >= 0.95


@pytest.fixture(scope="module")
def caa_run(model, data):
    cfg = AttackConfig()
    n_l, n_m = cfg.sizes(model.config.n_visual)
    part = select_regions(model, data.images, data.prompts, cfg.layer, n_l, n_m, cfg.groups)
    pert = caa_attack(model, data.images, data.prompts, cfg, sample_ids=range(N))
    return cfg, part, pert.apply(data.images)


@WEAK_CAA
def test_caa_lifts_least_above_most(model, data, caa_run):
    cfg, part, adv = caa_run
    s, _ = clean_scores(model, adv, data.prompts, cfg.layer)
    least = np.take_along_axis(s, part.omega_least, 1)
    floor = np.take_along_axis(s, part.omega_most, 1).min(axis=1, keepdims=True)
    assert np.mean(least > floor) >= 0.5


def test_caa_grows_kept_least_overlap(model, data, caa_run):
    cfg, part, adv = caa_run
    n_v = model.config.n_visual

    def overlap(images):
        s, _ = clean_scores(model, images, data.prompts, 2)
        kept = compress(s, 0.2, n_v)
        return np.mean([len(set(k) & set(l)) for k, l in zip(kept, part.omega_least)])

    assert overlap(adv) > overlap(data.images)


def test_vanilla_drops_uncompressed_accuracy(model, data):
    pert = vanilla_attack(model, data.images, data.prompts, data.labels, BaselineConfig(), sample_ids=range(N))
    clean = accuracy_under(model, data)
    adv = accuracy_under(model, data, pert.apply(data.images))
    assert clean - adv >= 0.2


def test_gaussian_noise_scrambles_ranking_more_with_eps(model, data):
    clean = layer_scores(model, data.images, data.prompts)[1]
    taus = []
    for eps in (8 / 255, 16 / 255, 32 / 255):
        noisy = gaussian_noise(data.images, eps, 0, sample_ids=range(N)).apply(data.images)
        pert = layer_scores(model, noisy, data.prompts)[1]
        taus.append(np.mean([kendall_tau(a, b) for a, b in zip(clean, pert)]))
    assert taus[-1] < 1.0
    assert taus[0] > taus[1] > taus[2]


@pytest.fixture(scope="module")
def tcaa_run(model, data):
    cfg = TransferConfig(layers=(1, 2, 3), iterations=50)
    res = tcaa.tcaa_optimize(model, data.images[:32], data.prompts[:32], cfg, mode="batch")
    return cfg, res


@pytest.mark.xfail(reason="background patches are ranked near-arbitrarily; ~29% of the least set is border",
                   strict=False)
def test_least_region_sits_in_border(tcaa_run):
    _, res = tcaa_run
    border = set(res.layout.border.tolist())
    least = res.partition.least
    assert np.mean([t in border for t in least.ravel()]) >= 0.8


def test_templates_raise_border_scores(model, data, tcaa_run):
    cfg, res = tcaa_run
    clean, lay = tcaa.augment_border(data.images[:32], cfg.border_width, cfg.fill)
    adv = tcaa.assemble_adversarial(data.images[:32], lay, res.templates, cfg.fill)
    rows = [l - 1 for l in res.layers]
    before = layer_scores(model, clean, data.prompts[:32])[rows][..., lay.border].mean()
    after = layer_scores(model, adv, data.prompts[:32])[rows][..., lay.border].mean()
    assert after > before


@pytest.fixture(scope="module")
def seed0_spec():
    return ExperimentSpec("ranking_role", model_seeds=(0,), n_samples=64)


@pytest.mark.xfail(reason="64-sample accuracies move in 1/64 steps; pc trails pp by one sample at r=0.5",
                   strict=False)
def test_clean_ranking_never_worse(store, seed0_spec):
    b = run_suite("ranking_role", seed0_spec, store)
    assert b.checks["clean_ranking_helps[0]"]


@pytest.fixture(scope="module")
def defense(store, seed0_spec):
    return run_suite("defense_eval", seed0_spec, store)


def test_most_mode_hurts_clean(defense):
    assert defense.checks["most_hurts_clean[0]"]


@WEAK_CAA
def test_least_mode_fails_to_restore(defense):
    assert defense.checks["least_fails_to_restore[0]"]
