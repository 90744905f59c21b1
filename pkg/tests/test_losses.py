import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relaff import autodiff as ad
from relaff.losses import (
    UndefinedCCCError,
    ccc,
    ccc_loss,
    contrastive_loss,
    cosine_similarity_matrix,
    relational_loss,
    rmse_loss,
    total_loss,
)


def test_relational_loss_zero_for_equal_matrices():
    m = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert float(relational_loss(m, m).data) == 0.0


def test_relational_loss_orthogonal_features_identical_labels():
    # M_hat = I, M = all ones: two of four entries differ by 1
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[0.5, 0.5], [0.5, 0.5]])
    loss = relational_loss(cosine_similarity_matrix(z), cosine_similarity_matrix(y))
    assert abs(float(loss.data) - math.sqrt(0.5)) < 1e-12


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 2), elements=finite),
       st.floats(0.1, 10.0))
def test_relational_loss_scale_invariant_per_row(z, y, s):
    """Cosine similarity ignores positive rescaling of the features."""
    if np.any(np.linalg.norm(z, axis=1) < 1e-3) or np.any(np.linalg.norm(y, axis=1) < 1e-3):
        return
    m = cosine_similarity_matrix(y)
    a = float(relational_loss(cosine_similarity_matrix(z), m).data)
    b = float(relational_loss(cosine_similarity_matrix(s * z), m).data)
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite), arrays(np.float64, (3, 3), elements=finite))
def test_relational_loss_symmetric(a, b):
    assert float(relational_loss(a, b).data) == pytest.approx(float(relational_loss(b, a).data), abs=1e-15)


def test_cosine_matrix_matches_numpy():
    z = np.random.default_rng(0).normal(size=(5, 4))
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    np.testing.assert_allclose(cosine_similarity_matrix(z).data, u @ u.T, atol=1e-14)


def test_relational_loss_shape_check():
    with pytest.raises(ValueError):
        relational_loss(np.eye(2), np.eye(3))


def test_rmse_oracle():
    assert float(rmse_loss(np.array([[1.0], [3.0]]), np.array([[0.0], [0.0]])).data) == pytest.approx(math.sqrt(5))


def test_ccc_oracle_and_loss():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.5, 2.0, 2.5, 5.0])
    mx, my = x.mean(), y.mean()
    expected = 2 * np.mean((x - mx) * (y - my)) / (x.var() + y.var() + (mx - my) ** 2)
    assert float(ccc(x, y).data) == pytest.approx(expected, abs=1e-14)
    assert float(ccc(x, x).data) == pytest.approx(1.0)
    both = np.stack([x, y], axis=1)
    assert float(ccc_loss(both, both).data) == pytest.approx(0.0, abs=1e-14)


def test_ccc_undefined_for_equal_constants():
    with pytest.raises(UndefinedCCCError):
        ccc(np.ones(3), np.ones(3))


def test_total_loss_lambda_zero_is_regression_loss():
    reg = ad.constant(0.7)
    assert total_loss(reg, ad.constant(5.0), 0.0) is reg
    assert float(total_loss(reg, ad.constant(0.5), 2.0).data) == pytest.approx(1.7)
    with pytest.raises(ValueError):
        total_loss(reg, reg, -1.0)


def _nt_xent_bruteforce(a, b, tau):
    emb = np.concatenate([a, b])
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    B = a.shape[0]
    total = 0.0
    for i in range(B):
        sims = emb[i] @ emb.T / tau
        denom = sum(math.exp(sims[k]) for k in range(2 * B) if k != i)
        total += -math.log(math.exp(sims[i + B]) / denom)
    return total / B


def test_contrastive_loss_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    assert float(contrastive_loss(a, b, 0.3).data) == pytest.approx(_nt_xent_bruteforce(a, b, 0.3), abs=1e-12)


def test_contrastive_loss_prefers_matching_positives():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(6, 8))
    assert float(contrastive_loss(a, a, 0.1).data) < float(contrastive_loss(a, rng.normal(size=(6, 8)), 0.1).data)


def test_contrastive_loss_needs_negatives():
    with pytest.raises(ValueError):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))
