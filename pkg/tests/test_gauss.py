"""Gaussian primitives: KL, interpolation, guarded factorizations."""

import numpy as np
import pytest

from drtrajopt import (
    ContractError,
    FactorizationError,
    Gaussian,
    barycentric,
    blend_precision,
    kl_gaussian,
    kl_gaussian_many,
    safe_cholesky,
    spd_inverse,
    symmetrize,
)


def random_gaussian(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    cov = a @ a.T + n * 1e-3 * np.eye(n)
    return Gaussian(rng.standard_normal(n) * scale, cov * scale)


def test_symmetrize():
    m = np.array([[1.0, 2.0], [0.0, 3.0]])
    s = symmetrize(m)
    assert np.array_equal(s, s.T)
    assert np.allclose(s, [[1.0, 1.0], [1.0, 3.0]])


def test_safe_cholesky_identity():
    factor, jitter = safe_cholesky(np.eye(2))
    assert jitter == 0.0
    assert np.allclose(factor, np.eye(2))


def test_safe_cholesky_hand_factor():
    # [[4,2],[2,3]] factors as [[2,0],[1,sqrt(2)]] exactly.
    factor, jitter = safe_cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert jitter == 0.0
    assert np.allclose(factor, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-12)


def test_safe_cholesky_jitter_repair():
    s = np.array([[1.0, 0.0], [0.0, -1e-12]])
    factor, jitter = safe_cholesky(s)
    assert jitter >= 1e-12
    assert np.linalg.norm(factor @ factor.T - s) <= jitter * np.sqrt(2.0) + 1e-9


def test_safe_cholesky_rejects_hopeless():
    with pytest.raises(FactorizationError):
        safe_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ContractError):
        safe_cholesky(np.zeros((2, 3)))


def test_safe_cholesky_frobenius_bound():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = rng.integers(1, 6)
        a = rng.standard_normal((n, n))
        s = symmetrize(a @ a.T)
        factor, jitter = safe_cholesky(s)
        assert np.linalg.norm(factor @ factor.T - s) <= jitter * np.sqrt(n) + 1e-9


def test_gaussian_construction_contracts():
    with pytest.raises(ContractError):
        Gaussian(np.zeros(2), np.eye(3))
    with pytest.raises(ContractError):
        Gaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        Gaussian(np.array([np.nan, 0.0]), np.eye(2))
    g = Gaussian([1.0], [[2.0]])
    assert g.dim == 1 and g.cov.shape == (1, 1)


def test_spd_inverse():
    s = np.array([[4.0, 2.0], [2.0, 3.0]])
    assert np.allclose(spd_inverse(s) @ s, np.eye(2), atol=1e-12)
    with pytest.raises(FactorizationError):
        spd_inverse(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_kl_identity_is_exact_zero():
    g = Gaussian(np.zeros(2), np.eye(2))
    assert kl_gaussian(g, g) == 0.0
    h = Gaussian(np.zeros(2), np.eye(2))
    assert kl_gaussian(g, h) == 0.0


def test_kl_scalar_oracles():
    # KL(N(1,1) || N(0,1)) = 1/2; KL(N(0,2) || N(0,1)) = (2 - 1 - ln 2)/2.
    # Both checked against numerical integration of p log(p/q).
    p = Gaussian([1.0], [[1.0]])
    q = Gaussian([0.0], [[1.0]])
    assert kl_gaussian(p, q) == pytest.approx(0.5, rel=1e-12)
    p2 = Gaussian([0.0], [[2.0]])
    assert kl_gaussian(p2, q) == pytest.approx(0.15342640972002733, rel=1e-12)


def test_kl_against_quadrature():
    p = Gaussian([0.3], [[1.7]])
    q = Gaussian([-0.5], [[0.8]])
    x = np.linspace(-12.0, 12.0, 200001)
    lp = -0.5 * (x - 0.3) ** 2 / 1.7 - 0.5 * np.log(2 * np.pi * 1.7)
    lq = -0.5 * (x + 0.5) ** 2 / 0.8 - 0.5 * np.log(2 * np.pi * 0.8)
    numeric = np.trapezoid(np.exp(lp) * (lp - lq), x)
    assert kl_gaussian(p, q) == pytest.approx(numeric, rel=1e-9)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = rng.integers(1, 5)
        p = random_gaussian(rng, n)
        q = random_gaussian(rng, n)
        kl = kl_gaussian(p, q)
        assert kl >= 0.0
        assert kl > 0.0 or (
            np.allclose(p.mean, q.mean, atol=1e-9)
            and np.allclose(p.cov, q.cov, atol=1e-9)
        )


def test_kl_errors():
    with pytest.raises(ContractError):
        kl_gaussian(Gaussian([0.0], [[1.0]]), Gaussian(np.zeros(2), np.eye(2)))


def test_kl_many_matches_scalar():
    rng = np.random.default_rng(11)
    ps = [random_gaussian(rng, 3) for _ in range(20)]
    qs = [random_gaussian(rng, 3) for _ in range(20)]
    batched = kl_gaussian_many(ps, qs)
    single = np.array([kl_gaussian(p, q) for p, q in zip(ps, qs)])
    assert np.allclose(batched, single, rtol=1e-12, atol=1e-12)
    # identical pair inside the batch comes out exactly zero
    same = kl_gaussian_many([ps[0], ps[1]], [ps[0], qs[1]])
    assert same[0] == 0.0 and same[1] > 0.0
    assert kl_gaussian_many([], []).shape == (0,)


def test_blend_precision_weights():
    p = Gaussian([0.0], [[1.0]])
    q = Gaussian([2.0], [[1.0]])
    mid = blend_precision(p, q, 0.5)
    assert np.allclose(mid.mean, [1.0]) and np.allclose(mid.cov, [[1.0]])
    # weight 1 reproduces p up to factorization round trip
    one = blend_precision(p, q, 1.0)
    assert np.allclose(one.mean, p.mean, atol=1e-12)
    # strong extrapolation out of the PD cone fails loudly
    narrow = Gaussian([0.0], [[0.1]])
    wide = Gaussian([0.0], [[10.0]])
    with pytest.raises(FactorizationError):
        blend_precision(wide, narrow, 50.0)


def test_barycentric_endpoints_exact():
    rng = np.random.default_rng(5)
    p = random_gaussian(rng, 3)
    q = random_gaussian(rng, 3)
    assert barycentric(p, q, 1.0) is p
    assert barycentric(p, q, 0.0) is q
    with pytest.raises(ContractError):
        barycentric(p, q, 1.5)


def test_barycentric_hand_midpoint():
    # lam = 0.5 between N(0,1) and N(2,1) is N(1,1).
    h = barycentric(Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]]), 0.5)
    assert np.allclose(h.mean, [1.0], atol=1e-12)
    assert np.allclose(h.cov, [[1.0]], atol=1e-12)


def test_barycentric_minimizes_weighted_kl():
    rng = np.random.default_rng(9)
    p = random_gaussian(rng, 2)
    q = random_gaussian(rng, 2)
    lam = 0.3
    h = barycentric(p, q, lam)

    def objective(g):
        return lam * kl_gaussian(g, p) + (1.0 - lam) * kl_gaussian(g, q)

    base = objective(h)
    for _ in range(100):
        dm = 0.05 * rng.standard_normal(2)
        da = 0.05 * rng.standard_normal((2, 2))
        cov = symmetrize(h.cov + da @ da.T + 0.01 * symmetrize(da))
        perturbed = Gaussian(h.mean + dm, cov + 1e-6 * np.eye(2))
        assert objective(perturbed) >= base - 1e-12
