import numpy as np
import pytest

from unlearn_recon import losses
from unlearn_recon.losses import LossSpec

CASES = [
    LossSpec("ridge", 0.3),
    LossSpec("ridge", 0.3, n_classes=3),
    LossSpec("logistic", 0.05),
    LossSpec("svm_squared_hinge", 0.05),
    LossSpec("softmax_ce", 0.05, n_classes=3),
]


def _problem(loss, seed=0, n=30, dp=5):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([rng.uniform(-1, 1, (n, dp - 1)), np.ones(n)])
    k = max(loss.n_classes, 2)
    y = rng.integers(0, k, n) if loss.kind != "ridge" or loss.n_classes > 1 else rng.normal(size=n)
    t = losses.encode_targets(loss, y)
    B = 0.5 * rng.normal(size=(dp, loss.n_outputs))
    return Z, t, B


@pytest.mark.parametrize("loss", CASES, ids=lambda l: f"{l.kind}-{l.n_classes}")
def test_objective_gradient_matches_central_differences(loss):
    Z, t, B = _problem(loss)
    G = losses.objective_gradient(loss, B, Z, t)
    h = 1e-6
    fd = np.zeros_like(B)
    for idx in np.ndindex(B.shape):
        E = np.zeros_like(B)
        E[idx] = h
        fd[idx] = (losses.objective(loss, B + E, Z, t) - losses.objective(loss, B - E, Z, t)) / (2 * h)
    np.testing.assert_allclose(G, fd, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("loss", CASES, ids=lambda l: f"{l.kind}-{l.n_classes}")
def test_sample_gradient_is_rank_one_and_sums(loss):
    Z, t, B = _problem(loss, seed=1)
    per = [losses.sample_gradient(loss, B, Z[i], t[i]) for i in range(len(Z))]
    total = sum(per)
    if loss.averaged:
        total = total / len(Z)
    np.testing.assert_allclose(total + 2 * loss.lam * B, losses.objective_gradient(loss, B, Z, t),
                               atol=1e-12)
    assert np.linalg.matrix_rank(per[0], tol=1e-12) <= 1


@pytest.mark.parametrize("loss", CASES[2:], ids=lambda l: l.kind)
def test_data_hvp_matches_finite_difference_hessian(loss):
    Z, t, B = _problem(loss, seed=2, n=20, dp=4)
    lam0 = LossSpec(loss.kind, 0.0, loss.n_classes)
    w = losses.curvature_weights(lam0, B, Z, t)
    p = B.size
    grad = lambda b: losses.objective_gradient(lam0, b.reshape(B.shape), Z, t).ravel()
    h = 1e-5
    H = np.column_stack([(grad(B.ravel() + h * e) - grad(B.ravel() - h * e)) / (2 * h) for e in np.eye(p)])
    H_an = np.column_stack([losses.data_hvp(loss.kind, Z, w, e.reshape(B.shape)).ravel() / len(Z)
                            for e in np.eye(p)])
    np.testing.assert_allclose(H_an, H, rtol=1e-6, atol=1e-8)


def test_curvature_weight_ranges():
    loss = LossSpec("logistic")
    Z, t, B = _problem(loss, seed=3)
    D = losses.curvature_weights(loss, B, Z, t)
    assert np.all((D > 0) & (D <= 0.25))
    svm = LossSpec("svm_squared_hinge")
    D = losses.curvature_weights(svm, B, Z, losses.encode_targets(svm, (t > 0).astype(int)))
    assert set(np.unique(D)) <= {0.0, 1.0}


def test_encode_targets():
    y = np.array([0, 1, 1])
    np.testing.assert_array_equal(losses.encode_targets(LossSpec("svm_squared_hinge"), y), [-1, 1, 1])
    np.testing.assert_array_equal(losses.encode_targets(LossSpec("ridge", n_classes=2), y),
                                  [[1, 0], [0, 1], [0, 1]])


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("hinge")
    with pytest.raises(ValueError):
        LossSpec("ridge", -1.0)
    with pytest.raises(ValueError):
        LossSpec("softmax_ce", 0.1, n_classes=1)
