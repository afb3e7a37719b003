import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compresslab import caa
from compresslab import diffcore as dc
from compresslab.caa import AttackConfig, BaselineConfig, PairSets, RegionPartition
from compresslab.compressor import ref_positions
from compresslab.diffcore import Tape, finite_difference_check
from compresslab.toyvlm import forward


def test_split_groups_last_absorbs_remainder():
    g = caa.split_groups(np.arange(10)[None], 3)
    assert [x.tolist() for x in g] == [[[0, 1, 2]], [[3, 4, 5]], [[6, 7, 8, 9]]]


def test_partition_from_scores_example():
    s = np.array([[0.1, 0.5, 0.3, 0.05, 0.4, 0.2]])
    part = caa.partition_from_scores(s, n_least=2, n_most=2, groups=2)
    assert part.omega_most.tolist() == [[1, 4]]
    assert part.omega_least.tolist() == [[0, 3]]
    assert [g.tolist() for g in part.least_groups] == [[[0]], [[3]]]


def test_partition_ties_prefer_smaller_index_for_most():
    part = caa.partition_from_scores(np.zeros((1, 5)), 2, 2, 1)
    assert part.omega_most.tolist() == [[0, 1]]
    assert part.omega_least.tolist() == [[3, 4]]


def test_build_pairs_counts_and_direction():
    L = np.array([[10, 11, 12, 13]])
    part = RegionPartition(L, np.array([[0, 1, 2]]), caa.split_groups(L, 2))
    pairs = caa.build_pairs(part)
    assert pairs.lm.shape == (1, 12, 2)
    assert set(map(tuple, pairs.lm[0])) == {(l, m) for l in L[0] for m in (0, 1, 2)}
    # later (less informative) group is pushed above the earlier one
    assert set(map(tuple, pairs.ll[0])) == {(12, 10), (12, 11), (13, 10), (13, 11)}


def test_single_group_has_no_ll_pairs():
    L = np.array([[4, 5]])
    pairs = caa.build_pairs(RegionPartition(L, np.array([[0]]), caa.split_groups(L, 1)))
    assert pairs.ll.shape == (1, 0, 2)


def test_pairwise_logsig_and_rank_loss_values():
    tape = Tape()
    s = tape.leaf(np.array([[0.0, 1.0, 3.0]]))
    lm = np.array([[[0, 1]]])
    ll = np.array([[[2, 1]]])
    got = caa.loss_rank(s, PairSets(lm, ll), alpha=1.0, beta=0.5).value
    want = -math.log(1 / (1 + math.exp(1.0))) - 0.5 * math.log(1 / (1 + math.exp(-2.0)))
    assert got[0] == pytest.approx(want, rel=1e-12)


def test_empty_pairs_contribute_zero():
    tape = Tape()
    s = tape.leaf(np.ones((2, 4)))
    assert np.all(caa.pairwise_logsig(s, np.zeros((2, 0, 2), dtype=np.int64)).value == 0)


def test_loss_erase_value():
    tape = Tape()
    clean = np.zeros((1, 3, 2))
    pert = tape.leaf(np.array([[[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]]]))
    v = caa.loss_erase(pert, clean, np.array([[0, 1]])).value
    assert v[0] == pytest.approx(-(1.0 + 4.0) / 2)


def test_key_alignment_value():
    tape = Tape()
    q = tape.leaf(np.array([[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]]))
    k = tape.leaf(np.array([[[1.0, 1.0], [3.0, 0.0], [0.0, 0.0]]]))
    v = caa.key_alignment(q, k, np.array([[0, 1]]), np.array([2])).value
    assert v[0] == pytest.approx((2.0 + 6.0) / 2)
    assert caa.loss_key(q, k, np.array([[0, 1]]), np.array([2])).value[0] == pytest.approx(-4.0)


def test_vanilla_loss_value():
    tape = Tape()
    logits = tape.leaf(np.array([[0.0, math.log(3.0)]]))
    v = caa.vanilla_loss(logits, np.array([[1]]), np.array([[0]])).value
    assert v[0] == pytest.approx(math.log(0.75) - math.log(0.25))


# ---------------------------------------------------------------- gradients

def _mid_images(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.25, 0.75, (b, cfg.grid_side, cfg.grid_side, cfg.patch_dim))


@pytest.mark.parametrize("term", ["rank", "erase", "key", "all"])
def test_caa_objective_gradient(tiny_weights, tiny_data, term):
    cfg = tiny_weights.config
    images = _mid_images(cfg)
    prompts = tiny_data.prompts[:2]
    kw = dict(lambda_erase=0.0, lambda_key=0.0, alpha=0.0, beta=0.0)
    kw.update({"rank": dict(alpha=1.0, beta=0.5), "erase": dict(lambda_erase=1.0),
               "key": dict(lambda_key=1.0), "all": dict(alpha=1.0, beta=0.5, lambda_erase=0.1, lambda_key=0.5)}[term])
    ac = AttackConfig(n_least=4, n_most=4, groups=2, **kw)
    scores, tr = caa.clean_scores(tiny_weights, images, prompts, ac.layer)
    part = caa.partition_from_scores(scores, 4, 4, 2)
    clean = tr.hidden_out[-1].value[:, :16] + 0.1
    tape = Tape()
    d = tape.leaf(np.random.default_rng(1).uniform(-0.05, 0.05, images.shape))
    out = dc.vsum(caa.caa_objective(tiny_weights, tape, images, d, prompts, ac, part, caa.build_pairs(part), clean))
    assert finite_difference_check(out, d, step=1e-4).max_rel_error < 1e-3


def test_vanilla_loss_gradient_through_model(tiny_weights, tiny_data):
    images = _mid_images(tiny_weights.config)
    tape = Tape()
    d = tape.leaf(np.zeros(images.shape))
    x = dc.clip(tape.const(images) + d, 0.0, 1.0)
    tr = forward(tiny_weights, x, tiny_data.prompts[:2], tape=tape)
    out = dc.vsum(caa.vanilla_loss(tr.logits, np.array([[1], [0]]), np.array([[0], [1]])))
    assert finite_difference_check(out, d, step=1e-4).max_rel_error < 1e-3


# --------------------------------------------------------------- invariants

@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1 / 255, 1.0), st.floats(0.0, 1.0))
def test_project_respects_budget_support_and_range(seed, eps, frac):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (2, 3, 3, 2))
    mask = (rng.uniform(size=(2, 3, 3, 1)) < frac).astype(float)
    delta = caa._project(rng.normal(0, 2, images.shape), images, eps, mask)
    assert np.all(np.abs(delta) <= eps + 1e-12)
    assert np.all(delta * (1 - mask) == 0)
    adv = images + delta
    assert adv.min() >= -1e-12 and adv.max() <= 1 + 1e-12


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1 / 255, 0.5))
def test_noise_baselines_stay_in_ball(seed, eps):
    images = np.random.default_rng(seed).uniform(0, 1, (2, 3, 3, 2))
    for pert in (caa.random_attack(images, eps, seed), caa.gaussian_noise(images, eps, seed)):
        assert np.all(np.abs(pert.delta) <= eps + 1e-12)
        adv = pert.apply(images)
        assert np.allclose(adv, images + pert.delta)
        assert pert.support.all()


def test_caa_attack_support_budget_and_history(tiny_weights, tiny_data):
    ac = AttackConfig(iterations=3, attack_rate=0.25, groups=2)
    p = caa.caa_attack(tiny_weights, tiny_data.images[:4], tiny_data.prompts[:4], ac)
    assert p.support.sum(axis=1).tolist() == [4] * 4
    off = ~p.support.reshape(4, 4, 4)
    assert np.all(p.delta[off] == 0)
    assert np.all(np.abs(p.delta) <= ac.epsilon + 1e-12)
    adv = p.apply(tiny_data.images[:4])
    assert adv.min() >= 0 and adv.max() <= 1
    assert p.loss_history.shape == (4, 4)
    assert np.all(np.isfinite(p.loss_history))


def test_caa_attack_is_deterministic_and_batch_independent(tiny_weights, tiny_data):
    ac = AttackConfig(iterations=2, attack_rate=0.25, groups=2, seed=7)
    ims, prs = tiny_data.images[:3], tiny_data.prompts[:3]
    a = caa.caa_attack(tiny_weights, ims, prs, ac, sample_ids=[10, 11, 12])
    b = caa.caa_attack(tiny_weights, ims, prs, ac, sample_ids=[10, 11, 12])
    one = caa.caa_attack(tiny_weights, ims[1], prs[1], ac, sample_ids=[11])
    assert np.array_equal(a.delta, b.delta)
    assert np.allclose(a.delta[1], one.delta, atol=1e-12)


def test_caa_attack_lowers_its_loss(tiny_weights, tiny_data):
    ac = AttackConfig(iterations=15, attack_rate=0.25, groups=2, step=4 / 255)
    p = caa.caa_attack(tiny_weights, tiny_data.images[:6], tiny_data.prompts[:6], ac)
    assert p.loss_history[-1].mean() < p.loss_history[0].mean()


def test_vanilla_attack_full_support(tiny_weights, tiny_data):
    bc = BaselineConfig(iterations=2)
    p = caa.vanilla_attack(tiny_weights, tiny_data.images[:3], tiny_data.prompts[:3], tiny_data.labels[:3], bc)
    assert p.support.all()
    assert np.all(np.abs(p.delta) <= bc.epsilon + 1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        AttackConfig(n_least=10, n_most=10).sizes(16)
    with pytest.raises(ValueError):
        AttackConfig(n_least=2, groups=3).sizes(16)
    with pytest.raises(ValueError):
        BaselineConfig(correct=(1,), wrong=(1, 0))
    assert AttackConfig().sizes(64) == (13, 13)


def test_ref_positions_feed_scores(tiny_weights, tiny_data):
    s, _ = caa.clean_scores(tiny_weights, tiny_data.images[:2], tiny_data.prompts[:2], 2)
    assert s.shape == (2, 16)
    assert np.allclose(s.sum(axis=1) <= 1 + 1e-9, True)
    assert len(ref_positions("final", tiny_weights.config.prompt_len)) == 1


def test_perturbation_jsonl_roundtrip(tiny_weights, tiny_data, tmp_path):
    ac = AttackConfig(iterations=1, attack_rate=0.25, groups=2)
    p = caa.caa_attack(tiny_weights, tiny_data.images[:2], tiny_data.prompts[:2], ac, sample_ids=[5, 9])
    caa.save_perturbations(tmp_path / "p.jsonl", p, ac, [5, 9])
    ids, q, digest = caa.load_perturbations(tmp_path / "p.jsonl", 16)
    assert ids == [5, 9] and digest == caa.config_digest(ac)
    assert np.array_equal(q.delta, p.delta) and np.array_equal(q.support, p.support)
    assert np.array_equal(q.loss_history, p.loss_history)


def test_vanishing_budget_leaves_prediction(tiny_weights, tiny_data):
    ac = AttackConfig(epsilon=1e-9, iterations=2, attack_rate=0.25, groups=2)
    p = caa.caa_attack(tiny_weights, tiny_data.images[:4], tiny_data.prompts[:4], ac)
    assert np.abs(p.apply(tiny_data.images[:4]) - tiny_data.images[:4]).max() <= 1e-9 * (1 + 1e-6)
    bc = BaselineConfig(epsilon=1e-9, iterations=0)
    v = caa.vanilla_attack(tiny_weights, tiny_data.images[:4], tiny_data.prompts[:4], tiny_data.labels[:4], bc)
    a = forward(tiny_weights, tiny_data.images[:4], tiny_data.prompts[:4]).final_logits
    b = forward(tiny_weights, v.apply(tiny_data.images[:4]), tiny_data.prompts[:4]).final_logits
    assert np.array_equal(np.argmax(a, -1), np.argmax(b, -1))


def test_select_regions_sorted_example():
    s = np.arange(64, dtype=float)[None]
    part = caa.partition_from_scores(s, 4, 4, 2)
    assert sorted(part.omega_least[0].tolist()) == [0, 1, 2, 3]
    assert sorted(part.omega_most[0].tolist()) == list(range(60, 64))
    assert [g[0].tolist() for g in part.least_groups] == [[3, 2], [1, 0]]


def test_rank_loss_all_equal_is_log2_count():
    tape = Tape()
    s = tape.leaf(np.zeros((1, 8)))
    L = np.array([[4, 5, 6, 7]])
    part = RegionPartition(L, np.array([[0, 1]]), caa.split_groups(L, 2))
    pairs = caa.build_pairs(part)
    v = caa.loss_rank(s, pairs, 1.0, 0.5).value[0]
    assert v == pytest.approx(math.log(2) * (8 + 0.5 * 4))
