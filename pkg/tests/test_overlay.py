import numpy as np
import pytest

from dkpkit.overlay import (
    PruneSchedule,
    SparseOverlay,
    overlay_apply_grad,
    overlay_matvec,
    prune_to_sparsity,
    schedule_sparsity,
)


def full_sort_survivors(values, keep):
    """Oracle: sort all magnitudes, take the top-`keep` positions."""
    flat = np.abs(values.reshape(-1))
    idx = sorted(range(flat.size), key=lambda i: (flat[i], -i))
    return set(idx[-keep:]) if keep else set()


def test_schedule_zero_at_start():
    sched = PruneSchedule(target_sparsity=0.8, start_step=10, end_step=110)
    assert schedule_sparsity(sched, 10) == 0.0
    assert schedule_sparsity(sched, 0) == 0.0


def test_schedule_hits_target_at_end():
    sched = PruneSchedule(target_sparsity=0.9993, start_step=0, end_step=100)
    assert schedule_sparsity(sched, 100) == 0.9993
    assert schedule_sparsity(sched, 500) == 0.9993


def test_schedule_midpoint_closed_form():
    sched = PruneSchedule(target_sparsity=0.8, start_step=0, end_step=100, exponent=3)
    assert schedule_sparsity(sched, 50) == pytest.approx(0.8 * (1 - 0.5**3))
    assert schedule_sparsity(sched, 50) == pytest.approx(0.7)


def test_schedule_monotone_and_clamped():
    sched = PruneSchedule(target_sparsity=0.95, start_step=17, end_step=331)
    vals = [schedule_sparsity(sched, t) for t in range(0, 400)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 0.95 for v in vals)


def test_schedule_validation():
    with pytest.raises(ValueError):
        PruneSchedule(target_sparsity=1.2, start_step=0, end_step=10)
    with pytest.raises(ValueError):
        PruneSchedule(target_sparsity=0.5, start_step=10, end_step=10)


def test_prune_noop_at_current_sparsity():
    m = SparseOverlay.from_dense(np.arange(1.0, 5.0).reshape(2, 2))
    before = m.values.copy()
    prune_to_sparsity(m, 0.0)
    np.testing.assert_array_equal(m.values, before)
    assert m.nnz == 4


def test_prune_small_example():
    m = SparseOverlay.from_dense(np.array([[3.0, -1.0], [0.5, 2.0]]))
    prune_to_sparsity(m, 0.5)
    np.testing.assert_array_equal(m.values, [[3.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(m.mask, [[True, False], [False, True]])
    assert m.nnz == 2
    m.check_invariants()


def test_prune_matches_full_sort_oracle():
    rng = np.random.default_rng(10)
    m = SparseOverlay.from_dense(rng.standard_normal((20, 20)))
    want = full_sort_survivors(m.values, 20)
    prune_to_sparsity(m, 0.95)
    got = set(np.flatnonzero(m.mask.reshape(-1)))
    assert got == want
    assert m.nnz == 20


def test_prune_rejects_sparsity_decrease():
    m = SparseOverlay.from_dense(np.ones((4, 4)))
    prune_to_sparsity(m, 0.5)
    with pytest.raises(ValueError, match="decrease"):
        prune_to_sparsity(m, 0.25)


def test_prune_threshold_property():
    rng = np.random.default_rng(11)
    m = SparseOverlay.from_dense(rng.standard_normal((13, 7)))
    before = np.abs(m.values).copy()
    prune_to_sparsity(m, 0.7)
    surviving = np.abs(m.values[m.mask])
    pruned = before[~m.mask]
    assert surviving.min() >= pruned.max()


def test_prune_is_permanent_and_monotone():
    rng = np.random.default_rng(12)
    m = SparseOverlay.from_dense(rng.standard_normal((10, 10)))
    active_sets = []
    for s in [0.2, 0.2, 0.5, 0.8, 0.99]:
        prune_to_sparsity(m, s)
        m.check_invariants()
        active_sets.append(set(np.flatnonzero(m.mask.reshape(-1))))
    for prev, nxt in zip(active_sets, active_sets[1:]):
        assert nxt <= prev


def test_prune_keep_count_is_ceiling():
    m = SparseOverlay.from_dense(np.arange(1.0, 10.0).reshape(3, 3))
    prune_to_sparsity(m, 0.5)  # ceil(0.5 * 9) = 5 survivors
    assert m.nnz == 5


def test_matvec_all_masked_is_zero():
    m = SparseOverlay.from_dense(np.ones((3, 4)))
    prune_to_sparsity(m, 1.0)
    np.testing.assert_array_equal(overlay_matvec(m, np.ones(4)), np.zeros(3))


def test_matvec_dense_mask_matches_dense_multiply():
    rng = np.random.default_rng(13)
    w = rng.standard_normal((5, 6))
    m = SparseOverlay.from_dense(w)
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(overlay_matvec(m, x), w @ x)


def test_matvec_sparse_matches_dense_oracle():
    rng = np.random.default_rng(14)
    m = SparseOverlay.from_dense(rng.standard_normal((16, 16)))
    prune_to_sparsity(m, 0.9)
    x = rng.standard_normal(16)
    dense = np.where(m.mask, m.values, 0.0)
    assert np.max(np.abs(overlay_matvec(m, x) - dense @ x)) < 1e-12


def test_matvec_all_sparsities_match_dense_oracle():
    rng = np.random.default_rng(15)
    m = SparseOverlay.from_dense(rng.standard_normal((12, 9)))
    x = rng.standard_normal(9)
    for s in [0.0, 0.25, 0.5, 0.9, 1.0]:
        prune_to_sparsity(m, s)
        dense = np.where(m.mask, m.values, 0.0)
        assert np.max(np.abs(overlay_matvec(m, x) - dense @ x)) < 1e-12


def test_matvec_batch():
    rng = np.random.default_rng(16)
    m = SparseOverlay.from_dense(rng.standard_normal((4, 5)))
    xs = rng.standard_normal((3, 5))
    out = overlay_matvec(m, xs)
    for i in range(3):
        np.testing.assert_allclose(out[i], overlay_matvec(m, xs[i]), atol=1e-12)


def test_matvec_length_mismatch():
    m = SparseOverlay.zeros(3, 4)
    with pytest.raises(ValueError, match="length"):
        overlay_matvec(m, np.ones(5))


def test_apply_grad_zero_is_noop():
    rng = np.random.default_rng(17)
    m = SparseOverlay.from_dense(rng.standard_normal((4, 4)))
    before = m.values.copy()
    overlay_apply_grad(m, np.zeros((4, 4)), lr=0.1)
    np.testing.assert_array_equal(m.values, before)


def test_apply_grad_fully_masked_is_noop():
    m = SparseOverlay.from_dense(np.ones((4, 4)))
    prune_to_sparsity(m, 1.0)
    overlay_apply_grad(m, np.ones((4, 4)), lr=0.5)
    np.testing.assert_array_equal(m.values, np.zeros((4, 4)))


def test_apply_grad_half_masked_exact_update():
    values = np.arange(1.0, 17.0).reshape(4, 4)
    m = SparseOverlay.from_dense(values.copy())
    prune_to_sparsity(m, 0.5)
    mask = m.mask.copy()
    g = np.full((4, 4), 2.0)
    overlay_apply_grad(m, g, lr=0.25)
    want = np.where(mask, np.where(mask, values, 0.0) - 0.25 * 2.0, 0.0)
    np.testing.assert_array_equal(m.values, want)
    m.check_invariants()


def test_apply_grad_shape_mismatch():
    m = SparseOverlay.zeros(2, 2)
    with pytest.raises(ValueError, match="shape"):
        overlay_apply_grad(m, np.ones((3, 2)), lr=0.1)


def test_construction_zeroes_inactive():
    m = SparseOverlay(values=np.ones((2, 2)), mask=np.array([[True, False], [False, True]]))
    np.testing.assert_array_equal(m.values, [[1.0, 0.0], [0.0, 1.0]])
    assert m.nnz == 2
    assert m.sparsity == 0.5
