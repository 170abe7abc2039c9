import itertools
import math

import numpy as np
import pytest

import epep


def naive_bkm(a, b, m):
    bd, bl = b.shape[0] // m, b.shape[1] // m
    out = np.empty_like(b)
    for i, j in itertools.product(range(m), range(m)):
        out[i * bd:(i + 1) * bd, j * bl:(j + 1) * bl] = a[i, j] * b[i * bd:(i + 1) * bd, j * bl:(j + 1) * bl]
    return out


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_bkm_matches_blockwise_scaling(m):
    rng = np.random.default_rng(m)
    a = rng.normal(size=(m, m))
    b = rng.normal(size=(3 * m, 2 * m))
    assert np.array_equal(epep.bkm_multiply(a, b, m), naive_bkm(a, b, m))


def test_bkm_rejects_indivisible_shape():
    with pytest.raises(epep.ShapeError):
        epep.bkm_multiply(np.ones((2, 2)), np.ones((3, 4)), 2)


def test_dirichlet_and_losses():
    d = epep.dirichlet([9.0, 0.0])
    assert d["alpha"] == [10.0, 1.0]
    assert d["uncertainty"] == pytest.approx(2 / 11)
    assert epep.loss_eb([0.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0, abs=1e-10)
    assert epep.loss_eb([9.0, 0.0], [1.0, 0.0]) == pytest.approx(0.1, abs=1e-10)
    assert epep.kl_to_uniform([2.0, 1.0]) == pytest.approx(math.log(2) - 0.5, abs=1e-10)
    assert epep.kl_to_uniform([1.0, 1.0]) == 0.0


def test_evidential_gradient_matches_finite_difference():
    z, y, h = [0.7, 2.1, 0.3], [0.0, 1.0, 0.0], 1e-6
    g = epep.evidential_gradients(z, y)
    for k in range(3):
        zp, zm = list(z), list(z)
        zp[k] += h
        zm[k] -= h
        fd = (epep.loss_combined(zp, y) - epep.loss_combined(zm, y)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_parameter_counts():
    counts = [epep.param_count(2, 768, 16, 4, method) for method in ("EPEP", "MSP", "MAP")]
    assert counts == [3144, 24576, 36864]
    assert "3144" in epep.param_report(2, 768, 16, 4)


def test_protocol_quotas_are_exact():
    n = 2000
    pats = epep.sample_patterns([0.7, 0.7], n, seed=3)
    assert len(pats) == n
    assert sum(0 in p for p in pats) == 600
    assert sum(1 in p for p in pats) == 600
    assert all(len(p) < 2 for p in pats)
    assert epep.missing_quotas([1.0, 0.3], 17) == [0, 11]


def test_auroc_against_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(0, 5, size=12) / 4
        y = rng.integers(0, 2, size=12)
        y[0], y[1] = 1, 0
        pos, neg = s[y == 1], s[y == 0]
        want = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
        assert epep.auroc(s.tolist(), y.tolist()) == pytest.approx(want, abs=1e-15)


def test_f1_macro_fixture():
    assert epep.f1_macro([[0], [0], [1], [1]], [[0], [1], [1], [1]], 2) == pytest.approx((2 / 3 + 4 / 5) / 2)


def test_verify_suites_pass():
    for suite in ("bkm", "evidential", "metrics"):
        checks = epep.verify(suite)
        assert checks and all(c["passed"] for c in checks), checks


def test_cli_params_and_usage_error():
    rc, out, _ = epep.run_cli(["params"])
    assert rc == 0 and "ordering EPEP < MSP < MAP: yes" in out
    rc, _, _ = epep.run_cli(["train", "--method", "nonsense"])
    assert rc == 2
