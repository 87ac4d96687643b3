import numpy as np
import pytest

from negmargin.errors import ContractError, NumericError
from negmargin.losses import LossSpec, loss_monotonicity_witness, margin_loss
from oracles import plain_ce, scalar_oracle


SCORES = np.array([[1.0, 0.0]])
LABELS = np.array([0])


# ln(1 + e^-1.3) = 0.24100845...
@pytest.mark.parametrize("m, approx", [(0.0, 0.313262), (-0.3, 0.2410085), (0.3, 0.403186)])
def test_two_class_examples(m, approx):
    loss, _ = margin_loss(SCORES, LABELS, LossSpec(m, 1.0, "inner_product"))
    oracle = scalar_oracle(1.0, 0.0, m)
    assert loss == pytest.approx(oracle, abs=1e-15)
    assert oracle == pytest.approx(approx, abs=1e-6)


def test_zero_margin_is_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, c = rng.integers(1, 9), rng.integers(1, 7)
        s = rng.normal(size=(n, c)) * 3
        y = rng.integers(0, c, size=n)
        beta = rng.uniform(0.5, 20)
        loss, _ = margin_loss(s, y, LossSpec(0.0, beta, "cosine"))
        assert abs(loss - plain_ce(s, y, beta)) <= 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for sim in ("cosine", "inner_product"):
        for eps in (0.0, 0.1):
            spec = LossSpec(rng.uniform(-0.5, 0.5), rng.uniform(1, 10), sim, eps)
            s = rng.normal(size=(4, 5))
            y = rng.integers(0, 5, size=4)
            _, g = margin_loss(s, y, spec)
            h = 1e-5
            for idx in np.ndindex(*s.shape):
                sp, sm = s.copy(), s.copy()
                sp[idx] += h
                sm[idx] -= h
                fd = (margin_loss(sp, y, spec)[0] - margin_loss(sm, y, spec)[0]) / (2 * h)
                assert abs(fd - g[idx]) <= 1e-6 * max(1.0, abs(g[idx]))


def test_shift_invariance():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    spec = LossSpec(-0.2, 2.0, "inner_product")
    shifted = s + rng.normal(size=(6, 1)) * 5
    assert abs(margin_loss(s, y, spec)[0] - margin_loss(shifted, y, spec)[0]) <= 1e-12


def test_label_smoothing_zero_is_identity():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    a = margin_loss(s, y, LossSpec(-0.3, 5.0, "cosine"))
    b = margin_loss(s, y, LossSpec(-0.3, 5.0, "cosine", 0.0))
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_label_smoothing_targets():
    # uniform scores: p = 1/C; smoothed target row sums to one so the gradient rows sum to 0
    s = np.zeros((2, 4))
    y = np.array([0, 3])
    loss, g = margin_loss(s, y, LossSpec(0.0, 1.0, "cosine", 0.2))
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(g[0], [(0.25 - 0.85) / 2, (0.25 - 0.05) / 2, (0.25 - 0.05) / 2, (0.25 - 0.05) / 2])


def test_witness_examples():
    w = loss_monotonicity_witness(SCORES, LABELS, LossSpec(0, 1.0, "inner_product"), -0.3, 0.0)
    assert w.ordered
    assert w.loss_low == pytest.approx(scalar_oracle(1.0, 0.0, -0.3), abs=1e-15)
    assert w.loss_high == pytest.approx(0.313262, abs=1e-6)


def test_witness_single_class_is_zero():
    s = np.array([[0.7], [-0.2]])
    y = np.array([0, 0])
    for m1, m2 in [(-1.0, 0.0), (0.0, 2.0)]:
        w = loss_monotonicity_witness(s, y, LossSpec(0, 3.0, "cosine"), m1, m2)
        assert w.loss_low == w.loss_high == 0.0


def test_witness_random_pairs():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(8, 5))
    y = rng.integers(0, 5, size=8)
    for _ in range(100):
        m1, m2 = np.sort(rng.uniform(-1, 1, size=2))
        if m1 == m2:
            continue
        assert loss_monotonicity_witness(s, y, LossSpec(0, 10.0, "cosine"), m1, m2).ordered


def test_witness_requires_ordered_margins():
    with pytest.raises(ContractError):
        loss_monotonicity_witness(SCORES, LABELS, LossSpec(), 0.1, 0.1)


def test_witness_detects_violation():
    # with heavy smoothing and a confident correct score, raising m can lower the loss
    s = np.array([[10.0, 0.0]])
    spec = LossSpec(0, 1.0, "inner_product", 0.9)
    with pytest.raises(NumericError):
        loss_monotonicity_witness(s, LABELS, spec, -0.5, 0.5)


def test_contract_errors():
    with pytest.raises(ContractError):
        margin_loss(SCORES, [2], LossSpec())
    with pytest.raises(ContractError):
        margin_loss(SCORES, [-1], LossSpec())
    with pytest.raises(ContractError):
        LossSpec(temperature=0)
    with pytest.raises(ContractError):
        LossSpec(label_smoothing=1.0)
    with pytest.raises(ContractError):
        LossSpec(similarity="euclid")
