import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compresslab import rankstats as rs


def tau_oracle(a, b):
    ra, rb = rs.ordinal_ranks(a), rs.ordinal_ranks(b)
    m = len(a)
    total = 0
    for i in range(m):
        for j in range(i + 1, m):
            total += np.sign(ra[i] - ra[j]) * np.sign(rb[i] - rb[j])
    return total / (m * (m - 1) / 2)


def rho_oracle(a, b):
    return float(np.corrcoef(rs.ordinal_ranks(a), rs.ordinal_ranks(b))[0, 1])


def test_ordinal_ranks_tie_break():
    np.testing.assert_array_equal(rs.ordinal_ranks([0.5, 0.9, 0.5, 0.1]), [1, 0, 2, 3])


def test_identical_and_reversed():
    x = np.arange(10.0)
    assert rs.kendall_tau(x, x) == 1.0 and rs.spearman_rho(x, x) == 1.0
    assert rs.kendall_tau(x, -x) == -1.0 and rs.spearman_rho(x, -x) == pytest.approx(-1.0)


def test_known_small_case():
    # one discordant pair out of three
    assert rs.kendall_tau([3, 2, 1], [3, 1, 2]) == pytest.approx(1 / 3)
    assert rs.spearman_rho([3, 2, 1], [3, 1, 2]) == pytest.approx(0.5)


def test_oracles_on_random_vectors():
    rng = np.random.default_rng(7)
    for _ in range(200):
        m = int(rng.integers(2, 51))
        a, b = rng.normal(size=m), rng.normal(size=m)
        if rng.random() < 0.3:
            a = np.round(a)   # exercise ties
        assert rs.kendall_tau(a, b) == pytest.approx(tau_oracle(a, b), abs=1e-12)
        assert rs.spearman_rho(a, b) == pytest.approx(rho_oracle(a, b), abs=1e-9)


def test_preservation_and_infiltration():
    clean = np.array([9, 8, 7, 6, 5, 4, 3, 2, 1, 0], dtype=float)
    pert = clean[::-1].copy()
    assert rs.topk_preservation(clean, clean, 3) == 1.0
    assert rs.topk_preservation(clean, pert, 3) == 0.0
    assert rs.botk_infiltration(clean, pert, 3) == 1.0
    assert rs.botk_infiltration(clean, clean, 3) == 0.0
    with pytest.raises(ValueError):
        rs.topk_preservation(clean, pert, 0)


def test_input_validation():
    with pytest.raises(ValueError):
        rs.kendall_tau([1.0], [1.0])
    with pytest.raises(ValueError):
        rs.spearman_rho([1.0, 2.0], [1.0, 2.0, 3.0])


def test_default_k():
    assert rs.default_k(64) == 16 and rs.default_k(10) == 3


def test_trace_of_identical_images(tiny_weights, tiny_data):
    img = tiny_data.images[0]
    trace = rs.ranking_trace(tiny_weights, img, img, tiny_data.prompts[0])
    assert len(trace) == tiny_weights.config.layers
    assert all(s.kendall_tau == 1.0 and s.topk_preservation == 1.0 and s.botk_infiltration == 0.0
               for s in trace)
    csv = rs.trace_to_csv(trace).splitlines()
    assert csv[0] == "layer,tau,rho,preservation,infiltration" and len(csv) == 1 + len(trace)


def test_mean_trace_averages_fields():
    a = [rs.RankStats(1.0, 1.0, 1.0, 0.0, 4)]
    b = [rs.RankStats(0.0, 0.5, 0.5, 1.0, 4)]
    m = rs.mean_trace([a, b])[0]
    assert (m.kendall_tau, m.spearman_rho, m.topk_preservation, m.botk_infiltration) == (0.5, 0.75, 0.75, 0.5)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.integers(0, 1000))
def test_bounds_and_symmetry(vals, seed):
    a = np.array(vals)
    b = np.random.default_rng(seed).permutation(a)
    t, r = rs.kendall_tau(a, b), rs.spearman_rho(a, b)
    assert -1.0 <= t <= 1.0 and -1.0 - 1e-12 <= r <= 1.0 + 1e-12
    assert rs.kendall_tau(b, a) == pytest.approx(t)
