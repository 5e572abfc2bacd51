import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidflow.spectral import EigenConvergenceError, batch_principal_eig, check_reward_matrix, principal_eig

from .oracles import jacobi_eigh, random_reward_matrices


def test_identity():
    lam, v = principal_eig(np.eye(3))
    assert lam == 1.0
    assert np.array_equal(v, [1, 0, 0])


def test_all_ones():
    lam, v = principal_eig(np.ones((4, 4)))
    assert abs(lam - 4.0) <= 1e-10
    assert np.allclose(v, 0.5, atol=1e-10)


def test_two_by_two():
    lam, v = principal_eig([[1.0, 0.5], [0.5, 1.0]])
    assert abs(lam - 1.5) <= 1e-10
    assert np.allclose(v, [np.sqrt(0.5)] * 2, atol=1e-10)


def test_block_diagonal_picks_larger_block():
    a = np.eye(5)
    a[:3, :3] = 1.0
    a[3:, 3:] = 1.0
    lam, v = principal_eig(a)
    assert abs(lam - 3.0) <= 1e-10
    assert np.allclose(v[:3], 1 / np.sqrt(3), atol=1e-8) and np.allclose(v[3:], 0, atol=1e-8)


def test_validation():
    with pytest.raises(ValueError):
        check_reward_matrix([[1.0, 0.2], [0.3, 1.0]])
    with pytest.raises(ValueError):
        check_reward_matrix([[1.0, -0.1], [-0.1, 1.0]])
    with pytest.raises(ValueError):
        check_reward_matrix([[0.5, 0.1], [0.1, 1.0]])
    with pytest.raises(ValueError):
        check_reward_matrix(np.ones((2, 3)))


def test_non_convergence_is_reported():
    a = random_reward_matrices(np.random.default_rng(0), 1, 6)
    with pytest.raises(EigenConvergenceError) as err:
        batch_principal_eig(a, tol=1e-30, max_iter=2)
    assert err.value.index == 0 and err.value.residual > 0
    lam, _, res = batch_principal_eig(a, tol=1e-30, max_iter=2, strict=False)
    assert np.isfinite(lam[0]) and res[0] > 0


def test_empty_batch():
    lam, v, res = batch_principal_eig(np.zeros((0, 4, 4)))
    assert lam.shape == (0,) and v.shape == (0, 4)


def test_matches_jacobi_oracle():
    rng = np.random.default_rng(1)
    mats = random_reward_matrices(rng, 300, 17)
    lam, v, _ = batch_principal_eig(mats)
    w, vecs = jacobi_eigh(mats)
    top = vecs[:, :, -1]
    top *= np.sign(np.einsum("ni,ni->n", top, v))[:, None]
    assert np.abs(lam - w[:, -1]).max() <= 1e-8
    assert np.abs(v - top).max() <= 1e-8


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 17))
def test_perron_and_rayleigh_properties(seed, d):
    rng = np.random.default_rng(seed)
    a = random_reward_matrices(rng, 1, d)[0]
    # sparsify some entries to exercise reducible matrices
    mask = rng.uniform(size=(d, d)) < 0.3
    mask = mask | mask.T
    a[mask & ~np.eye(d, dtype=bool)] = 0.0
    lam, v = principal_eig(a)
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-12
    assert np.all(v >= -1e-8)
    assert 1.0 - 1e-10 <= lam <= d + 1e-10
    assert np.linalg.norm(a @ v - lam * v) <= 1e-10 * d
    for _ in range(5):
        x = rng.normal(size=d)
        assert x @ a @ x / (x @ x) <= lam + 1e-9


def test_deterministic():
    mats = random_reward_matrices(np.random.default_rng(2), 50, 9)
    a = batch_principal_eig(mats)
    b = batch_principal_eig(mats.copy())
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
