import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spela.linalg import make_rng, normalize_rows
from spela.losses import LossKind, head_logits_batch, local_loss, loss_and_grad

from oracles import central_diff, naive_cosine_scores, rel_err


def _instance(seed, n=4, dim=6, batch=3):
    r = make_rng(seed)
    E = normalize_rows(r.normal(size=(n, dim)))
    H = r.normal(size=(batch, dim))
    y = r.integers(0, n, batch)
    return H, y, E


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradient_matches_finite_differences(kind):
    worst = 0.0
    for seed in range(50):
        H, y, E = _instance(seed)
        _, G = loss_and_grad(H, y, E, kind)
        fd = central_diff(lambda: loss_and_grad(H, y, E, kind)[0].sum(), H)
        worst = max(worst, rel_err(G, fd))
    assert worst < 1e-5


def test_cosine_log_known_values():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([[3.0, 0.0], [0.0, 2.0], [-1.0, 0.0]])
    loss, _ = loss_and_grad(h, np.array([0, 0, 0]), e, LossKind.COSINE_LOG)
    np.testing.assert_allclose(loss, [0.0, np.log(2.0), np.log(3.0)])


def test_angular_log_known_values():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([[0.0, 1.0]])
    # angle pi/2 -> angular similarity 1/2
    loss, _ = loss_and_grad(h, np.array([0]), e, LossKind.ANGULAR_LOG)
    np.testing.assert_allclose(loss, [np.log(1.5)])


def test_euclidean_depends_on_scale_normalized_does_not():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([[100.0, 0.0]])
    lab = np.array([0])
    assert loss_and_grad(h, lab, e, LossKind.EUCLIDEAN)[0][0] == pytest.approx(99.0)
    assert loss_and_grad(h, lab, e, LossKind.NORMALIZED_EUCLIDEAN)[0][0] == pytest.approx(0.0)
    assert loss_and_grad(h, lab, e, LossKind.COSINE_LOG)[0][0] == pytest.approx(0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 50))
def test_angle_losses_scale_invariant(seed, s):
    H, y, E = _instance(seed)
    for kind in (LossKind.COSINE_LOG, LossKind.ANGULAR_LOG, LossKind.NORMALIZED_EUCLIDEAN,
                 LossKind.CROSS_ENTROPY_HEAD):
        a, _ = loss_and_grad(H, y, E, kind)
        b, _ = loss_and_grad(s * H, y, E, kind)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_angle_gradients_orthogonal_to_activation(seed):
    # scale invariance implies the gradient has no radial component
    H, y, E = _instance(seed)
    for kind in (LossKind.COSINE_LOG, LossKind.ANGULAR_LOG, LossKind.CROSS_ENTROPY_HEAD):
        _, G = loss_and_grad(H, y, E, kind)
        np.testing.assert_allclose(np.einsum("ij,ij->i", G, H), 0.0, atol=1e-10)


def test_zero_activation_gets_zero_gradient_or_raises():
    E = np.eye(3)
    H = np.zeros((1, 3))
    _, G = loss_and_grad(H, np.array([1]), E, LossKind.COSINE_LOG)
    np.testing.assert_array_equal(G, 0.0)
    with pytest.raises(ValueError):
        loss_and_grad(H, np.array([1]), E, LossKind.COSINE_LOG, strict=True)
    with pytest.raises(ValueError):
        local_loss(np.zeros(3), E[0], LossKind.COSINE_LOG)


def test_local_loss_agrees_with_batch():
    H, y, E = _instance(3, batch=1)
    for kind in LossKind:
        batch = loss_and_grad(H, y, E, kind)[0][0]
        single = local_loss(H[0], E[y[0]], kind, embeddings=E, label=int(y[0]))
        assert single == pytest.approx(batch, rel=1e-12)


def test_local_loss_needs_embeddings_for_cross_entropy():
    with pytest.raises(ValueError):
        local_loss(np.ones(3), np.eye(3)[0], LossKind.CROSS_ENTROPY_HEAD)


def test_head_logits_match_naive():
    r = make_rng(9)
    for _ in range(20):
        E = normalize_rows(r.normal(size=(5, 7)))
        H = r.normal(size=(4, 7))
        got = head_logits_batch(H, E)
        for i in range(4):
            np.testing.assert_allclose(got[i], naive_cosine_scores(H[i], E), rtol=1e-12, atol=1e-14)


def test_head_logits_reject_zero_rows():
    with pytest.raises(ValueError):
        head_logits_batch(np.zeros((1, 3)), np.eye(3))
