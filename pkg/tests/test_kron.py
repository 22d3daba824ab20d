import numpy as np
import pytest

from dkpkit.kron import (
    KronFactorPair,
    choose_factor_shapes,
    factor_param_count,
    kron_materialize,
    kron_matvec,
    kron_matvec_grad,
)
from oracles import central_diff, kron_nested_loops, rel_err


def test_materialize_scalar_product():
    kp = KronFactorPair(b=[[2.0]], c=[[3.0]])
    np.testing.assert_array_equal(kron_materialize(kp), [[6.0]])


def test_materialize_identity():
    kp = KronFactorPair(b=np.eye(2), c=np.eye(2))
    np.testing.assert_array_equal(kron_materialize(kp), np.eye(4))


def test_materialize_matches_nested_loop_oracle():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((2, 3))
    c = rng.standard_normal((3, 2))
    got = kron_materialize(KronFactorPair(b=b, c=c))
    np.testing.assert_allclose(got, kron_nested_loops(b, c), rtol=0, atol=0)


def test_materialize_overflow_guard():
    kp = KronFactorPair(b=np.ones((40000, 1)), c=np.ones((40000, 1)))
    with pytest.raises(ValueError, match="element limit"):
        kron_materialize(kp)


def test_matvec_identity():
    kp = KronFactorPair(b=np.eye(2), c=np.eye(2))
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(kron_matvec(kp, x), x)


def test_matvec_block_swap_permutation():
    kp = KronFactorPair(b=[[0.0, 1.0], [1.0, 0.0]], c=np.eye(2))
    out = kron_matvec(kp, [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(out, [3.0, 4.0, 1.0, 2.0])


def test_matvec_matches_materialized_multiply():
    rng = np.random.default_rng(1)
    kp = KronFactorPair(b=rng.standard_normal((3, 2)), c=rng.standard_normal((2, 3)))
    x = rng.standard_normal(6)
    want = kron_materialize(kp) @ x
    assert np.max(np.abs(kron_matvec(kp, x) - want)) < 1e-12


def test_matvec_random_shapes_property():
    rng = np.random.default_rng(2)
    for _ in range(200):
        m1, n1, m2, n2 = rng.integers(1, 9, size=4)
        kp = KronFactorPair(
            b=rng.standard_normal((m1, n1)), c=rng.standard_normal((m2, n2))
        )
        x = rng.standard_normal(n1 * n2)
        want = kron_materialize(kp) @ x
        assert np.max(np.abs(kron_matvec(kp, x) - want)) < 1e-12


def test_matvec_mixed_product_structure():
    # (B kron C)(xb kron xc) == (B xb) kron (C xc)
    rng = np.random.default_rng(3)
    b = rng.standard_normal((3, 4))
    c = rng.standard_normal((2, 5))
    xb = rng.standard_normal(4)
    xc = rng.standard_normal(5)
    kp = KronFactorPair(b=b, c=c)
    got = kron_matvec(kp, np.outer(xb, xc).reshape(-1))
    want = np.outer(b @ xb, c @ xc).reshape(-1)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_matvec_batch_agrees_with_rows():
    rng = np.random.default_rng(4)
    kp = KronFactorPair(b=rng.standard_normal((3, 2)), c=rng.standard_normal((4, 5)))
    xs = rng.standard_normal((7, 10))
    batched = kron_matvec(kp, xs)
    for i in range(7):
        np.testing.assert_array_equal(batched[i], kron_matvec(kp, xs[i]))


def test_matvec_length_mismatch():
    kp = KronFactorPair(b=np.eye(2), c=np.eye(2))
    with pytest.raises(ValueError, match="length"):
        kron_matvec(kp, np.ones(3))


def test_grad_zero_upstream():
    rng = np.random.default_rng(5)
    kp = KronFactorPair(b=rng.standard_normal((2, 2)), c=rng.standard_normal((2, 2)))
    x = rng.standard_normal(4)
    g_b, g_c, g_x = kron_matvec_grad(kp, x, np.zeros(4))
    assert not g_b.any() and not g_c.any() and not g_x.any()


def test_grad_scalar_chain_rule():
    b, c, x0, g = 1.7, -0.4, 2.5, 3.0
    kp = KronFactorPair(b=[[b]], c=[[c]])
    g_b, g_c, g_x = kron_matvec_grad(kp, [x0], [g])
    np.testing.assert_allclose(g_b, [[g * c * x0]])
    np.testing.assert_allclose(g_c, [[g * b * x0]])
    np.testing.assert_allclose(g_x, [g * b * c])


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(6)
    kp = KronFactorPair(b=rng.standard_normal((2, 2)), c=rng.standard_normal((2, 2)))
    x = rng.standard_normal(4)
    g_out = rng.standard_normal(4)

    def loss():
        return float(g_out @ kron_matvec(kp, x))

    g_b, g_c, g_x = kron_matvec_grad(kp, x, g_out)
    assert rel_err(g_b, central_diff(loss, kp.b), floor=1e-6).max() < 1e-6
    assert rel_err(g_c, central_diff(loss, kp.c), floor=1e-6).max() < 1e-6
    assert rel_err(g_x, central_diff(loss, x), floor=1e-6).max() < 1e-6


def test_grad_batch_accumulates():
    rng = np.random.default_rng(7)
    kp = KronFactorPair(b=rng.standard_normal((2, 3)), c=rng.standard_normal((3, 2)))
    xs = rng.standard_normal((5, 6))
    gs = rng.standard_normal((5, 6))
    g_b, g_c, g_x = kron_matvec_grad(kp, xs, gs)
    want_b = np.zeros_like(kp.b)
    want_c = np.zeros_like(kp.c)
    for i in range(5):
        rb, rc, rx = kron_matvec_grad(kp, xs[i], gs[i])
        want_b += rb
        want_c += rc
        np.testing.assert_allclose(g_x[i], rx, atol=1e-12)
    np.testing.assert_allclose(g_b, want_b, atol=1e-12)
    np.testing.assert_allclose(g_c, want_c, atol=1e-12)


def test_param_count():
    kp = KronFactorPair(b=np.ones((13, 65)), c=np.ones((50, 20)))
    assert kp.param_count == 13 * 65 + 50 * 20 == 1845
    assert factor_param_count((13, 65), (50, 20)) == 1845


def test_choose_factor_shapes_minimizes_params():
    (m1, n1), (m2, n2) = choose_factor_shapes(512, 256)
    assert m1 * m2 == 512 and n1 * n2 == 256
    assert m1 * n1 + m2 * n2 == 768
    assert min(m1, m2, n1, n2) >= 2


def test_choose_factor_shapes_prime_fallback():
    # No split of a prime dimension keeps every factor dim >= 2.
    (m1, n1), (m2, n2) = choose_factor_shapes(7, 4)
    assert m1 * m2 == 7 and n1 * n2 == 4


def test_factor_validation():
    with pytest.raises(ValueError, match="2-D"):
        KronFactorPair(b=np.ones(3), c=np.eye(2))
    with pytest.raises(ValueError, match="finite"):
        KronFactorPair(b=[[np.nan]], c=np.eye(2))
